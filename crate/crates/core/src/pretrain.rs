//! Joint masked-LM + supertagging pretraining.
//!
//! One training step draws a batch from a per-epoch seeded permutation,
//! masks every instance afresh from `(seed, epoch, instance)`, sums the two
//! cross-entropies, backpropagates and applies AdamW at the scheduled rate.
//! All randomness is derived from the global seed, so a run (or a resumed
//! run) is fully determined by its configuration.

use alloc::format;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use rand::seq::SliceRandom;

use crate::masking::{collate, mask_instance, MaskedBatch, MaskedInstance, MaskingConfig, IGNORE};
use crate::model::{Dropout, Model};
use crate::numerics::{clip_global_norm, cross_entropy, AdamW, Graph, OptimState, Reduction, Scalar, Schedule, Tensor, Var};
use crate::rng;
use crate::vocab::TokenizedSentence;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Mean over contributing rows within each stream, summed across streams.
    #[default]
    SumOfMeans,
    /// Sum over contributing rows within each stream, summed across streams.
    SumOfSums,
}

impl LossMode {
    fn reduction(self) -> Reduction {
        match self {
            LossMode::SumOfMeans => Reduction::Mean,
            LossMode::SumOfSums => Reduction::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub masking: MaskingConfig,
    pub loss_mode: LossMode,
    pub max_len: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub optimizer: AdamW,
    /// Stop after this many optimizer steps (for interrupted runs).
    pub max_steps: Option<u64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            batch_size: 256,
            epochs: 8,
            peak_lr: 1e-4,
            warmup_steps: 10_000,
            seed: 0,
            masking: MaskingConfig::default(),
            loss_mode: LossMode::SumOfMeans,
            max_len: 100,
            grad_clip: Some(1.0),
            optimizer: AdamW::default(),
            max_steps: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        self.masking.validate()
    }

    pub fn steps_per_epoch(&self, instances: usize) -> u64 {
        instances.div_ceil(self.batch_size) as u64
    }

    pub fn schedule(&self, instances: usize) -> Result<Schedule> {
        Schedule::new(self.peak_lr, self.warmup_steps, self.epochs as u64 * self.steps_per_epoch(instances))
    }
}

/// Per-stream and joint loss values of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    pub joint: f64,
    pub mlm: f64,
    pub tag: f64,
    pub mlm_count: usize,
    pub tag_count: usize,
}

/// Builds the summed two-stream cross-entropy on the graph. A stream without
/// labels contributes exactly zero; both empty is an error.
pub fn joint_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    mlm_logits: Var,
    tag_logits: Option<Var>,
    batch: &MaskedBatch,
    mode: LossMode,
) -> Result<(Var, JointLoss)> {
    let (mlm, mlm_count) = g.cross_entropy(mlm_logits, &batch.mlm_labels, mode.reduction())?;
    let (joint, tag, tag_count) = match tag_logits {
        Some(t) => {
            let (tag, n) = g.cross_entropy(t, &batch.tag_labels, mode.reduction())?;
            (g.add(mlm, tag)?, g.value(tag).item().to_f64(), n)
        }
        None => (mlm, 0.0, 0),
    };
    if mlm_count == 0 && tag_count == 0 {
        return Err(Error::Empty("batch has neither masked tokens nor supertag labels"));
    }
    let mlm_v = g.value(mlm).item().to_f64();
    Ok((
        joint,
        JointLoss { joint: mlm_v + tag, mlm: mlm_v, tag, mlm_count, tag_count },
    ))
}

/// Standalone joint loss over materialized logits (`(.., V)` and `(.., T)`).
pub fn joint_loss<S: Scalar>(
    mlm_logits: &Tensor<S>,
    tag_logits: Option<&Tensor<S>>,
    batch: &MaskedBatch,
    mode: LossMode,
) -> Result<JointLoss> {
    let pick = |ce: crate::numerics::CrossEntropy| match mode {
        LossMode::SumOfMeans => ce.loss,
        LossMode::SumOfSums => ce.total,
    };
    let mlm = cross_entropy(mlm_logits, &batch.mlm_labels)?;
    let tag = match tag_logits {
        Some(t) => Some(cross_entropy(t, &batch.tag_labels)?),
        None => None,
    };
    let tag_count = tag.map_or(0, |t| t.count);
    if mlm.count == 0 && tag_count == 0 {
        return Err(Error::Empty("batch has neither masked tokens nor supertag labels"));
    }
    let (m, t) = (pick(mlm), tag.map_or(0.0, pick));
    Ok(JointLoss { joint: m + t, mlm: m, tag: t, mlm_count: mlm.count, tag_count })
}

/// Argmax hits and labeled positions of `logits (.., K)` against `labels`.
pub fn argmax_hits<S: Scalar>(logits: &[S], classes: usize, labels: &[i32]) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (row, &label) in logits.chunks(classes).zip(labels) {
        if label == IGNORE {
            continue;
        }
        total += 1;
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best as i32 == label {
            hits += 1;
        }
    }
    (hits, total)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub mlm_loss: f64,
    pub tag_loss: f64,
    pub joint_loss: f64,
    /// Over non-ignored supertag positions of the batch; NaN when there are none.
    pub tag_accuracy: f64,
    pub masked_token_count: usize,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<S> {
    pub optim: OptimState<S>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Zero-based epoch of the next batch.
    pub epoch: usize,
    /// Position of the next batch within its epoch.
    pub batch_in_epoch: usize,
}

impl<S: Scalar> TrainState<S> {
    pub fn fresh(model: &Model<S>) -> Self {
        TrainState {
            optim: OptimState::for_params(model.params().tensors()),
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        }
    }
}

pub enum TrainEvent<'a, S> {
    Step(&'a TrainMetrics),
    EpochEnd {
        epoch: usize,
        mean_joint_loss: f64,
        model: &'a Model<S>,
        state: &'a TrainState<S>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    /// Mean joint loss of each epoch completed in this call.
    pub epoch_mean_loss: Vec<f64>,
    pub finished: bool,
}

/// Order in which epoch `epoch` visits the instances.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, rng::STREAM_SHUFFLE, epoch as u64, 0));
    order
}

pub fn masking_seed(seed: u64, epoch: usize, instance: usize) -> u64 {
    rng::derive_seed(seed, rng::STREAM_MASK, epoch as u64, instance as u64)
}

/// Trains `model` in place. `state` carries the position to resume from.
/// `on_event` sees every step's metrics and every epoch end, and may stop the
/// run early by returning `ControlFlow::Break`.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &[TokenizedSentence],
    config: &PretrainConfig,
    state: &mut TrainState<S>,
    mut on_event: impl FnMut(TrainEvent<'_, S>) -> Result<ControlFlow<()>>,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let schedule = config.schedule(data.len())?;
    let steps_per_epoch = config.steps_per_epoch(data.len()) as usize;
    let vocab = model.config().vocab_size;
    let types = model.config().type_vocab_size;
    let mut summary = TrainSummary { steps: 0, epoch_mean_loss: Vec::new(), finished: false };

    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let order = epoch_permutation(config.seed, epoch, data.len());
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        while state.batch_in_epoch < steps_per_epoch {
            if config.max_steps.is_some_and(|m| state.step >= m) {
                return Ok(summary);
            }
            let b = state.batch_in_epoch;
            let ids = &order[b * config.batch_size..((b + 1) * config.batch_size).min(data.len())];
            let instances: Vec<MaskedInstance> = ids
                .iter()
                .map(|&i| mask_instance(&data[i], vocab, types, &config.masking, masking_seed(config.seed, epoch, i)))
                .collect();
            let batch = collate(&instances, config.max_len)?;
            let step = state.step + 1;
            let lr = schedule.lr_at(step);
            let metrics = train_step(model, &batch, config, state, lr, step, epoch, b)?;
            state.step = step;
            state.batch_in_epoch += 1;
            summary.steps += 1;
            loss_sum += metrics.joint_loss;
            loss_n += 1;
            if on_event(TrainEvent::Step(&metrics))?.is_break() {
                return Ok(summary);
            }
        }
        state.epoch += 1;
        state.batch_in_epoch = 0;
        let mean = if loss_n == 0 { f64::NAN } else { loss_sum / loss_n as f64 };
        summary.epoch_mean_loss.push(mean);
        let flow = on_event(TrainEvent::EpochEnd {
            epoch,
            mean_joint_loss: mean,
            model,
            state,
        })?;
        if flow.is_break() {
            return Ok(summary);
        }
    }
    summary.finished = true;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn train_step<S: Scalar>(
    model: &mut Model<S>,
    batch: &MaskedBatch,
    config: &PretrainConfig,
    state: &mut TrainState<S>,
    lr: f64,
    step: u64,
    epoch: usize,
    batch_id: usize,
) -> Result<TrainMetrics> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let mut drop_rng = rng::substream(config.seed, rng::STREAM_DROPOUT, step, 0);
    let dropout = (model.config().dropout > 0.0).then(|| Dropout {
        rate: model.config().dropout,
        rng: &mut drop_rng,
    });
    let states = model.encode_graph(&mut g, &bound, &batch.input_ids, &batch.attention_mask, batch.batch, batch.len, dropout)?;
    let mlm = model.mlm_logits_graph(&mut g, &bound, *states.last().expect("embedding state"))?;
    let tag = model.tag_logits_graph(&mut g, &bound, &states)?;
    let (loss, parts) = joint_loss_graph(&mut g, mlm, tag, batch, config.loss_mode)?;
    if !parts.joint.is_finite() {
        return Err(Error::NonFinite { step, batch: batch_id, seed: config.seed });
    }
    let (hits, total) = match tag {
        Some(t) => argmax_hits(g.value(t).data(), model.config().type_vocab_size, &batch.tag_labels),
        None => (0, 0),
    };
    let mut grads = g.backward(loss)?;
    let mut flat: Vec<Option<Vec<S>>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    if let Some(max) = config.grad_clip {
        clip_global_norm(&mut flat, max);
    }
    let params = model.params_mut();
    let decay: Vec<bool> = params.decay_flags().to_vec();
    config.optimizer.step(params.tensors_mut(), &decay, &flat, &mut state.optim, lr);
    Ok(TrainMetrics {
        step,
        epoch,
        lr,
        mlm_loss: parts.mlm,
        tag_loss: parts.tag,
        joint_loss: parts.joint,
        tag_accuracy: if total == 0 { f64::NAN } else { hits as f64 / total as f64 },
        masked_token_count: parts.mlm_count,
    })
}

/// Anything that produces masked-LM and supertag logits for a batch.
pub trait Predictor<S> {
    fn predict(&self, batch: &MaskedBatch) -> Result<(Tensor<S>, Option<Tensor<S>>)>;
}

impl<S: Scalar> Predictor<S> for Model<S> {
    fn predict(&self, batch: &MaskedBatch) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let states = self.encode_graph(&mut g, &b, &batch.input_ids, &batch.attention_mask, batch.batch, batch.len, None)?;
        let mlm = self.mlm_logits_graph(&mut g, &b, *states.last().expect("embedding state"))?;
        let tag = self.tag_logits_graph(&mut g, &b, &states)?;
        Ok((g.value(mlm).clone(), tag.map(|t| g.value(t).clone())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeldoutReport {
    pub mlm_perplexity: f64,
    pub tag_accuracy: f64,
    pub masked_tokens: usize,
    pub tag_positions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_len: usize,
    pub masking: MaskingConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            batch_size: 64,
            max_len: 100,
            masking: MaskingConfig { tag_replace_prob: 0.0, ..MaskingConfig::default() },
        }
    }
}

/// Masked-LM perplexity and supertag accuracy on held-out sentences masked
/// with a fixed evaluation seed. Supertag labels are the gold ones (no
/// stochastic replacement).
pub fn evaluate_heldout<S: Scalar, P: Predictor<S>>(
    predictor: &P,
    data: &[TokenizedSentence],
    vocab_size: usize,
    type_count: usize,
    config: &EvalConfig,
) -> Result<HeldoutReport> {
    if data.is_empty() {
        return Err(Error::Empty("held-out stream"));
    }
    let masking = MaskingConfig { tag_replace_prob: 0.0, ..config.masking };
    let mut ce_total = 0.0;
    let mut masked = 0;
    let mut hits = 0;
    let mut positions = 0;
    for (c, chunk) in data.chunks(config.batch_size.max(1)).enumerate() {
        let instances: Vec<MaskedInstance> = chunk
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let id = (c * config.batch_size + i) as u64;
                mask_instance(t, vocab_size, type_count, &masking, rng::derive_seed(config.seed, rng::STREAM_EVAL, id, 0))
            })
            .collect();
        let batch = collate(&instances, config.max_len)?;
        let (mlm, tag) = predictor.predict(&batch)?;
        let ce = cross_entropy(&mlm, &batch.mlm_labels)?;
        ce_total += ce.total;
        masked += ce.count;
        if let Some(tag) = tag {
            let (h, n) = argmax_hits(tag.data(), tag.cols(), &batch.tag_labels);
            hits += h;
            positions += n;
        }
    }
    if !ce_total.is_finite() {
        return Err(Error::Invalid(format!("non-finite held-out loss {ce_total}")));
    }
    Ok(HeldoutReport {
        mlm_perplexity: if masked == 0 { f64::NAN } else { libm::exp(ce_total / masked as f64) },
        tag_accuracy: if positions == 0 { f64::NAN } else { hits as f64 / positions as f64 },
        masked_tokens: masked,
        tag_positions: positions,
    })
}
