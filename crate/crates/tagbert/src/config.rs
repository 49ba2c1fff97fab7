//! Run configuration: flat `key = value` text with dotted keys.
//!
//! Values are layered defaults < config file < `--set` overrides. Unknown
//! keys are rejected at every layer, and the resolved table is written into
//! each run directory so a run can be replayed from it alone.

use std::collections::BTreeMap;
use std::str::FromStr;

use tagbert_core::finetune::{FinetuneConfig, SelectionMetric};
use tagbert_core::masking::{MaskingConfig, Treatments};
use tagbert_core::model::ModelConfig;
use tagbert_core::numerics::AdamW;
use tagbert_core::pretrain::{EvalConfig, LossMode, PretrainConfig};
use tagbert_core::syngen::GrammarParams;

use crate::{Error, Result};

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("corpus.max_tokens", "100"),
    ("corpus.tail_quantile", "none"),
    ("corpus.heldout", "0"),
    ("vocab.size", "30000"),
    ("typevocab.coverage", "0.95"),
    ("model.dtype", "f32"),
    ("model.num_layers", "12"),
    ("model.hidden", "768"),
    ("model.heads", "12"),
    ("model.ffn_hidden", "1536"),
    ("model.max_positions", "512"),
    ("model.tag_layer", "4"),
    ("model.layer_weighter", "false"),
    ("model.tag_head", "true"),
    ("model.tie_decoder", "true"),
    ("model.dropout", "0.1"),
    ("model.layer_norm_eps", "1e-12"),
    ("masking.mask_rate", "0.15"),
    ("masking.mask", "0.8"),
    ("masking.random", "0.1"),
    ("masking.keep", "0.1"),
    ("masking.tag_replace_prob", "0.01"),
    ("pretrain.batch_size", "256"),
    ("pretrain.epochs", "8"),
    ("pretrain.peak_lr", "1e-4"),
    ("pretrain.warmup_steps", "10000"),
    ("pretrain.loss_mode", "sum_of_means"),
    ("pretrain.max_len", "100"),
    ("pretrain.grad_clip", "1.0"),
    ("pretrain.max_steps", "none"),
    ("pretrain.beta1", "0.9"),
    ("pretrain.beta2", "0.999"),
    ("pretrain.eps", "1e-8"),
    ("pretrain.weight_decay", "0.01"),
    ("eval.batch_size", "64"),
    ("finetune.lr", "3e-5"),
    ("finetune.batch_size", "32"),
    ("finetune.max_epochs", "10"),
    ("finetune.seeds", "1,2,3"),
    ("finetune.max_len", "100"),
    ("finetune.selection_metric", "accuracy"),
    ("finetune.head_dropout", "0.1"),
    ("syngen.vocab_size", "50"),
    ("syngen.type_count", "12"),
    ("syngen.ambiguity_rate", "0.3"),
    ("syngen.max_depth", "3"),
    ("syngen.min_len", "2"),
    ("syngen.max_len", "30"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

fn parse_line(line: &str) -> Result<Option<(String, String)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key = value, got {line:?}")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a config file's assignments over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_line(line).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))? {
                self.set(&k, &v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
            }
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        match parse_line(assignment)? {
            Some((k, v)) => self.set(&k, &v),
            None => Err(Error::Config(format!("empty override {assignment:?}"))),
        }
    }

    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(text) = file {
            c.apply_text(text)?;
        }
        for o in overrides {
            c.apply_override(o)?;
        }
        Ok(c)
    }

    /// The resolved table in config-file syntax, sorted by key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key {key} has no default"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key} = {raw:?} is not a valid {}", std::any::type_name::<T>())))
    }

    /// `none` maps to `None`.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key).eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn model(&self, vocab_size: usize, type_vocab_size: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            num_layers: self.get("model.num_layers")?,
            hidden: self.get("model.hidden")?,
            heads: self.get("model.heads")?,
            ffn_hidden: self.get("model.ffn_hidden")?,
            vocab_size,
            type_vocab_size,
            max_positions: self.get("model.max_positions")?,
            tag_layer: self.get("model.tag_layer")?,
            layer_weighter: self.get("model.layer_weighter")?,
            tag_head: self.get("model.tag_head")?,
            tie_decoder: self.get("model.tie_decoder")?,
            dropout: self.get("model.dropout")?,
            layer_norm_eps: self.get("model.layer_norm_eps")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn masking(&self) -> Result<MaskingConfig> {
        let m = MaskingConfig {
            mask_rate: self.get("masking.mask_rate")?,
            treatments: Treatments {
                mask: self.get("masking.mask")?,
                random: self.get("masking.random")?,
                keep: self.get("masking.keep")?,
            },
            tag_replace_prob: self.get("masking.tag_replace_prob")?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let loss_mode = match self.raw("pretrain.loss_mode") {
            "sum_of_means" => LossMode::SumOfMeans,
            "sum_of_sums" => LossMode::SumOfSums,
            other => return Err(Error::Config(format!("unknown pretrain.loss_mode {other:?}"))),
        };
        let c = PretrainConfig {
            batch_size: self.get("pretrain.batch_size")?,
            epochs: self.get("pretrain.epochs")?,
            peak_lr: self.get("pretrain.peak_lr")?,
            warmup_steps: self.get("pretrain.warmup_steps")?,
            seed: self.seed()?,
            masking: self.masking()?,
            loss_mode,
            max_len: self.get("pretrain.max_len")?,
            grad_clip: self.opt("pretrain.grad_clip")?,
            optimizer: AdamW {
                beta1: self.get("pretrain.beta1")?,
                beta2: self.get("pretrain.beta2")?,
                eps: self.get("pretrain.eps")?,
                weight_decay: self.get("pretrain.weight_decay")?,
            },
            max_steps: self.opt("pretrain.max_steps")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            seed: self.seed()?,
            batch_size: self.get("eval.batch_size")?,
            max_len: self.get("pretrain.max_len")?,
            masking: self.masking()?,
        })
    }

    pub fn finetune(&self) -> Result<FinetuneConfig> {
        let seeds = self
            .raw("finetune.seeds")
            .split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Config(format!("bad seed {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let selection_metric = match self.raw("finetune.selection_metric") {
            "accuracy" => SelectionMetric::Accuracy,
            "span_f1" => SelectionMetric::SpanF1,
            other => return Err(Error::Config(format!("unknown finetune.selection_metric {other:?}"))),
        };
        let c = FinetuneConfig {
            lr: self.get("finetune.lr")?,
            batch_size: self.get("finetune.batch_size")?,
            max_epochs: self.get("finetune.max_epochs")?,
            seeds,
            max_len: self.get("finetune.max_len")?,
            selection_metric,
            head_dropout: self.get("finetune.head_dropout")?,
            optimizer: AdamW { weight_decay: 0.0, ..AdamW::default() },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn grammar(&self) -> Result<GrammarParams> {
        Ok(GrammarParams {
            vocab_size: self.get("syngen.vocab_size")?,
            type_count: self.get("syngen.type_count")?,
            ambiguity_rate: self.get("syngen.ambiguity_rate")?,
            max_depth: self.get("syngen.max_depth")?,
        })
    }

    pub fn length_range(&self) -> Result<(usize, usize)> {
        Ok((self.get("syngen.min_len")?, self.get("syngen.max_len")?))
    }
}
