//! Token-classification fine-tuning with per-seed validation-based epoch
//! selection.
//!
//! The classifier is an affine map from the final block output to the label
//! set, read at the first subword of every word. Pretrained weights stay
//! trainable; the optimizer is Adam without decoupled decay at a constant
//! learning rate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use crate::corpus::Sentence;
use crate::masking::{collate, MaskedBatch, MaskedInstance, IGNORE};
use crate::metrics::{self, SpanScores};
use crate::model::{apply_dropout, Bound, truncated_normal, Dropout, Model, INIT_STD};
use crate::numerics::{AdamW, Graph, OptimState, Reduction, Scalar, Tensor, Var};
use crate::pretrain::epoch_permutation;
use crate::rng;
use crate::vocab::{SubwordVocab, CLS, SEP};
use crate::{Error, Result};

pub const HEAD_WEIGHT: &str = "classifier.weight";
pub const HEAD_BIAS: &str = "classifier.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Plain,
    Iob,
}

/// Labeled sentences; the words' tags are the task labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub sentences: Vec<Sentence>,
    pub label_set: Vec<String>,
    pub scheme: Scheme,
}

impl TaskDataset {
    /// Validates every label against `label_set` and, for IOB, its syntax.
    pub fn new(sentences: Vec<Sentence>, label_set: Vec<String>, scheme: Scheme) -> Result<Self> {
        if scheme == Scheme::Iob {
            metrics::validate_iob(&label_set)?;
        }
        for s in &sentences {
            if let Some(bad) = s.tags().iter().find(|t| !label_set.contains(t)) {
                return Err(Error::Invalid(format!("label {bad:?} not in label set")));
            }
        }
        Ok(TaskDataset { sentences, label_set, scheme })
    }

    pub fn label_index(&self) -> BTreeMap<&str, usize> {
        self.label_set.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()
    }
}

/// Train, validation and test portions sharing one label set.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub validation: TaskDataset,
    pub test: TaskDataset,
}

impl TaskSplits {
    /// The label set is the sorted union of labels seen in all three parts.
    pub fn new(train: Vec<Sentence>, validation: Vec<Sentence>, test: Vec<Sentence>, scheme: Scheme) -> Result<Self> {
        let mut labels: Vec<String> = [&train, &validation, &test]
            .iter()
            .flat_map(|part| part.iter().flat_map(|s| s.tags().iter().cloned()))
            .collect();
        labels.sort();
        labels.dedup();
        Ok(TaskSplits {
            train: TaskDataset::new(train, labels.clone(), scheme)?,
            validation: TaskDataset::new(validation, labels.clone(), scheme)?,
            test: TaskDataset::new(test, labels, scheme)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMetric {
    Accuracy,
    SpanF1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    /// Subword limit per sentence including CLS and SEP.
    pub max_len: usize,
    pub selection_metric: SelectionMetric,
    pub head_dropout: f64,
    pub optimizer: AdamW,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 3e-5,
            batch_size: 32,
            max_epochs: 10,
            seeds: vec![1, 2, 3],
            max_len: 100,
            selection_metric: SelectionMetric::Accuracy,
            head_dropout: 0.1,
            optimizer: AdamW { weight_decay: 0.0, ..AdamW::default() },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if self.max_len < 3 {
            return Err(Error::Config("max_len must leave room for one subword".into()));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config("head_dropout outside [0,1)".into()));
        }
        Ok(())
    }
}

/// A backbone with a token-classification head appended to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<S> {
    pub model: Model<S>,
    pub num_labels: usize,
}

pub fn attach_head<S: Scalar>(model: &Model<S>, num_labels: usize, seed: u64) -> Result<Classifier<S>> {
    if num_labels < 2 {
        return Err(Error::Config(format!("a classifier needs at least 2 labels, got {num_labels}")));
    }
    let d = model.config().hidden;
    let mut store = model.params().filtered(|n| n != HEAD_WEIGHT && n != HEAD_BIAS);
    let mut r = rng::substream(seed, rng::STREAM_INIT, 1, 0);
    let w = (0..d * num_labels).map(|_| S::from_f64(truncated_normal(&mut r, INIT_STD))).collect();
    store.push(HEAD_WEIGHT.into(), Tensor::new(&[d, num_labels], w)?, true)?;
    store.push(HEAD_BIAS.into(), Tensor::zeros(&[num_labels]), false)?;
    Ok(Classifier { model: Model::from_params(model.config().clone(), store)?, num_labels })
}

impl<S: Scalar> Classifier<S> {
    /// Rebuilds a classifier from a model that already carries a head.
    pub fn from_model(model: Model<S>) -> Result<Self> {
        let b = model
            .params()
            .get(HEAD_BIAS)
            .ok_or_else(|| Error::Invalid(format!("model has no {HEAD_BIAS}")))?;
        let num_labels = b.len();
        let w = model
            .params()
            .get(HEAD_WEIGHT)
            .ok_or_else(|| Error::Invalid(format!("model has no {HEAD_WEIGHT}")))?;
        let expect = vec![model.config().hidden, num_labels];
        if w.shape() != expect.as_slice() {
            return Err(Error::Shape { op: "classifier", left: w.shape().to_vec(), right: expect });
        }
        Ok(Classifier { model, num_labels })
    }

    pub fn head_param_count(&self) -> usize {
        self.model.config().hidden * self.num_labels + self.num_labels
    }

    fn logits_graph(
        &self,
        g: &mut Graph<S>,
        batch: &MaskedBatch,
        trainable: bool,
        dropout: Option<Dropout<'_>>,
        head_dropout: Option<Dropout<'_>>,
    ) -> Result<(Var, Bound)> {
        let b = self.model.bind(g, trainable);
        let states = self
            .model
            .encode_graph(g, &b, &batch.input_ids, &batch.attention_mask, batch.batch, batch.len, dropout)?;
        let mut last = *states.last().expect("embedding state");
        if let Some(mut d) = head_dropout {
            last = apply_dropout(g, last, &mut d)?;
        }
        let w = self.model.var(&b, HEAD_WEIGHT);
        let bias = self.model.var(&b, HEAD_BIAS);
        Ok((g.linear(last, w, bias)?, b))
    }

    /// Logits of shape `(batch·len, labels)`.
    pub fn logits(&self, batch: &MaskedBatch) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let (l, _) = self.logits_graph(&mut g, batch, false, None, None)?;
        Ok(g.value(l).clone())
    }
}

/// Encoded task data. Words whose first subword does not fit in `max_len`
/// are dropped from both prediction and scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTask {
    pub instances: Vec<MaskedInstance>,
    /// Per sentence, which words survived truncation.
    pub kept: Vec<Vec<bool>>,
    pub truncated_words: usize,
}

pub fn encode_task(vocab: &SubwordVocab, data: &TaskDataset, max_len: usize) -> Result<EncodedTask> {
    if max_len < 3 {
        return Err(Error::Config("max_len must leave room for one subword".into()));
    }
    let index = data.label_index();
    let budget = max_len - 2;
    let mut instances = Vec::with_capacity(data.sentences.len());
    let mut kept = Vec::with_capacity(data.sentences.len());
    let mut truncated_words = 0;
    for s in &data.sentences {
        let mut ids = vec![CLS];
        let mut labels = vec![IGNORE];
        let mut keep = Vec::with_capacity(s.len());
        for (w, t) in s.words().iter().zip(s.tags()) {
            let pieces = vocab.tokenize_word(w);
            let room = budget - (ids.len() - 1);
            if room == 0 {
                keep.push(false);
                truncated_words += 1;
                continue;
            }
            let take = pieces.len().min(room);
            labels.push(index[t.as_str()] as i32);
            labels.extend(core::iter::repeat_n(IGNORE, take - 1));
            ids.extend_from_slice(&pieces[..take]);
            keep.push(true);
        }
        ids.push(SEP);
        labels.push(IGNORE);
        instances.push(MaskedInstance { mlm_labels: vec![IGNORE; ids.len()], input_ids: ids, tag_labels: labels, seed: 0 });
        kept.push(keep);
    }
    Ok(EncodedTask { instances, kept, truncated_words })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub spans: Option<SpanScores>,
}

impl Scores {
    pub fn get(&self, metric: SelectionMetric) -> f64 {
        match metric {
            SelectionMetric::Accuracy => self.accuracy,
            SelectionMetric::SpanF1 => self.spans.map_or(f64::NAN, |s| s.f1),
        }
    }
}

/// Predicted label ids for every kept word, sentence by sentence.
pub fn predict<S: Scalar>(clf: &Classifier<S>, task: &EncodedTask, batch_size: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(task.instances.len());
    for chunk in task.instances.chunks(batch_size.max(1)) {
        let batch = collate(chunk, max_len)?;
        let logits = clf.logits(&batch)?;
        let c = clf.num_labels;
        for row in 0..batch.batch {
            let mut labels = Vec::new();
            for pos in 0..batch.len {
                let i = row * batch.len + pos;
                if batch.tag_labels[i] == IGNORE {
                    continue;
                }
                let r = &logits.data()[i * c..(i + 1) * c];
                let best = (0..c).fold(0, |b, k| if r[k] > r[b] { k } else { b });
                labels.push(best);
            }
            out.push(labels);
        }
    }
    Ok(out)
}

/// Accuracy, plus span scores for IOB data, over words that survived
/// truncation.
pub fn evaluate<S: Scalar>(
    clf: &Classifier<S>,
    data: &TaskDataset,
    task: &EncodedTask,
    batch_size: usize,
    max_len: usize,
) -> Result<Scores> {
    let pred = predict(clf, task, batch_size, max_len)?;
    let label = |i: usize| data.label_set[i].as_str();
    let gold: Vec<Vec<&str>> = data
        .sentences
        .iter()
        .zip(&task.kept)
        .map(|(s, k)| s.tags().iter().zip(k).filter(|(_, &k)| k).map(|(t, _)| t.as_str()).collect())
        .collect();
    let pred: Vec<Vec<&str>> = pred.into_iter().map(|p| p.into_iter().map(label).collect()).collect();
    let accuracy = metrics::accuracy(&pred, &gold)?;
    let spans = match data.scheme {
        Scheme::Iob => Some(metrics::span_f1(&pred, &gold)?),
        Scheme::Plain => None,
    };
    Ok(Scores { accuracy, spans })
}

/// Earliest index of the maximum; NaN never wins.
pub fn select_epoch(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// One fine-tuning run.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun<S> {
    pub seed: u64,
    /// Validation scores after each epoch; index 0 is before any training.
    pub validation: Vec<Scores>,
    pub best_epoch: usize,
    pub test: Scores,
    pub classifier: Classifier<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport<S> {
    pub runs: Vec<SeedRun<S>>,
    pub mean_test_accuracy: f64,
    pub mean_test_f1: Option<f64>,
    /// Words dropped by truncation in train, validation and test.
    pub truncated_words: [usize; 3],
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Progress callback payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Scores,
}

/// Fine-tunes one classifier per seed, keeps the epoch with the best
/// validation score (earliest on ties, epoch 0 being the untrained head),
/// and averages test scores over seeds.
pub fn finetune<S: Scalar>(
    pretrained: &Model<S>,
    vocab: &SubwordVocab,
    splits: &TaskSplits,
    config: &FinetuneConfig,
    mut on_epoch: impl FnMut(&EpochReport) -> ControlFlow<()>,
) -> Result<FinetuneReport<S>> {
    config.validate()?;
    if splits.train.sentences.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if config.selection_metric == SelectionMetric::SpanF1 && splits.validation.scheme != Scheme::Iob {
        return Err(Error::Config("span_f1 selection needs IOB labels".into()));
    }
    let train = encode_task(vocab, &splits.train, config.max_len)?;
    let valid = encode_task(vocab, &splits.validation, config.max_len)?;
    let test = encode_task(vocab, &splits.test, config.max_len)?;
    let num_labels = splits.train.label_set.len();
    let eval_batch = config.batch_size.max(64);

    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut clf = attach_head(pretrained, num_labels, seed)?;
        let mut state = OptimState::for_params(clf.model.params().tensors());
        let mut best = clf.clone();
        let mut validation = vec![evaluate(&clf, &splits.validation, &valid, eval_batch, config.max_len)?];
        let mut step = 0u64;
        for epoch in 1..=config.max_epochs {
            let order = epoch_permutation(seed, epoch - 1, train.instances.len());
            let mut losses = Vec::new();
            for ids in order.chunks(config.batch_size) {
                let chunk: Vec<MaskedInstance> = ids.iter().map(|&i| train.instances[i].clone()).collect();
                let batch = collate(&chunk, config.max_len)?;
                losses.push(train_step(&mut clf, &batch, config, &mut state, seed, step)?);
                step += 1;
            }
            let v = evaluate(&clf, &splits.validation, &valid, eval_batch, config.max_len)?;
            validation.push(v);
            let metric: Vec<f64> = validation.iter().map(|s| s.get(config.selection_metric)).collect();
            if select_epoch(&metric) == Some(epoch) {
                best = clf.clone();
            }
            let report = EpochReport { seed, epoch, train_loss: mean(&losses), validation: v };
            if on_epoch(&report).is_break() {
                break;
            }
        }
        let metric: Vec<f64> = validation.iter().map(|s| s.get(config.selection_metric)).collect();
        let best_epoch = select_epoch(&metric).unwrap_or(0);
        let test_scores = evaluate(&best, &splits.test, &test, eval_batch, config.max_len)?;
        runs.push(SeedRun { seed, validation, best_epoch, test: test_scores, classifier: best });
    }

    let accs: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
    let f1s: Option<Vec<f64>> = runs.iter().map(|r| r.test.spans.map(|s| s.f1)).collect();
    Ok(FinetuneReport {
        mean_test_accuracy: mean(&accs),
        mean_test_f1: f1s.map(|f| mean(&f)),
        runs,
        truncated_words: [train.truncated_words, valid.truncated_words, test.truncated_words],
    })
}

fn train_step<S: Scalar>(
    clf: &mut Classifier<S>,
    batch: &MaskedBatch,
    config: &FinetuneConfig,
    state: &mut OptimState<S>,
    seed: u64,
    step: u64,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut body_rng = rng::substream(seed, rng::STREAM_DROPOUT, step, 1);
    let mut head_rng = rng::substream(seed, rng::STREAM_DROPOUT, step, 2);
    let rate = clf.model.config().dropout;
    let body = (rate > 0.0).then(|| Dropout { rate, rng: &mut body_rng });
    let head = (config.head_dropout > 0.0).then(|| Dropout { rate: config.head_dropout, rng: &mut head_rng });
    let (logits, bound) = clf.logits_graph(&mut g, batch, true, body, head)?;
    let (loss, count) = g.cross_entropy(logits, &batch.tag_labels, Reduction::Mean)?;
    let value = g.value(loss).item().to_f64();
    if count == 0 {
        return Ok(f64::NAN);
    }
    if !value.is_finite() {
        return Err(Error::NonFinite { step, batch: step as usize, seed });
    }
    let mut grads = g.backward(loss)?;
    let flat: Vec<Option<Vec<S>>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
    let params = clf.model.params_mut();
    let decay = params.decay_flags().to_vec();
    config.optimizer.step(params.tensors_mut(), &decay, &flat, state, config.lr);
    Ok(value)
}

#[cfg(test)]
mod tests;
