use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::ParamStore;
use crate::numerics::Scalar;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub type_vocab_size: usize,
    pub max_positions: usize,
    /// 1-based block whose output feeds the supertag head.
    pub tag_layer: usize,
    pub layer_weighter: bool,
    pub tag_head: bool,
    /// Share the masked-LM decoder with the token embedding table.
    pub tie_decoder: bool,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl ModelConfig {
    /// BERT-base with a 1536-wide feed-forward layer and the tag head on block 4.
    pub fn base() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden: 768,
            heads: 12,
            ffn_hidden: 1536,
            vocab_size: 30_000,
            type_vocab_size: 2_883,
            max_positions: 512,
            tag_layer: 4,
            layer_weighter: false,
            tag_head: true,
            tie_decoder: true,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden size {} not divisible by {} heads", self.hidden, self.heads));
        }
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.tag_layer < 1 || self.tag_layer > self.num_layers {
            return fail(format!("tag_layer {} outside [1, {}]", self.tag_layer, self.num_layers));
        }
        if self.ffn_hidden == 0 || self.max_positions == 0 {
            return fail("ffn_hidden and max_positions must be positive".into());
        }
        if self.vocab_size <= crate::vocab::SUBWORD_RESERVED.len() {
            return fail(format!("vocab_size {} leaves no room beyond reserved tokens", self.vocab_size));
        }
        if self.tag_head && self.type_vocab_size <= crate::vocab::TYPE_RESERVED.len() {
            return fail(format!("type_vocab_size {} leaves no room beyond reserved types", self.type_vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0,1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Parameter names, shapes and initializers in storage order.
    pub(crate) fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let (d, f, v, t) = (self.hidden, self.ffn_hidden, self.vocab_size, self.type_vocab_size);
        let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
        let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str| {
            push(format!("{prefix}.gain"), vec![d], Init::Ones);
            push(format!("{prefix}.bias"), vec![d], Init::Zeros);
        };
        let affine = |push: &mut dyn FnMut(String, Vec<usize>, Init), prefix: &str, i: usize, o: usize| {
            push(format!("{prefix}.weight"), vec![i, o], Init::Normal);
            push(format!("{prefix}.bias"), vec![o], Init::Zeros);
        };
        push("embeddings.token".into(), vec![v, d], Init::Normal);
        push("embeddings.position".into(), vec![self.max_positions, d], Init::Normal);
        norm(&mut push, "embeddings.norm");
        for l in 0..self.num_layers {
            for part in ["query", "key", "value", "output"] {
                affine(&mut push, &format!("blocks.{l}.attn.{part}"), d, d);
            }
            norm(&mut push, &format!("blocks.{l}.attn.norm"));
            affine(&mut push, &format!("blocks.{l}.ffn.input"), d, f);
            affine(&mut push, &format!("blocks.{l}.ffn.output"), f, d);
            norm(&mut push, &format!("blocks.{l}.ffn.norm"));
        }
        affine(&mut push, "mlm_head.transform", d, d);
        norm(&mut push, "mlm_head.norm");
        if !self.tie_decoder {
            push("mlm_head.decoder.weight".into(), vec![d, v], Init::Normal);
        }
        push("mlm_head.output_bias".into(), vec![v], Init::Zeros);
        if self.tag_head {
            affine(&mut push, "tag_head", d, t);
            if self.layer_weighter {
                push("layer_weighter.logits".into(), vec![self.num_layers], Init::Zeros);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamBreakdown {
    pub embeddings: usize,
    pub per_block: usize,
    pub blocks: usize,
    pub mlm_head: usize,
    pub tag_head: usize,
    pub layer_weighter: usize,
    /// Anything else stored alongside the model, such as a task head.
    pub other: usize,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn tag_head_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.tag_head as f64 / self.total as f64
        }
    }

    pub(crate) fn measure<S: Scalar>(config: &ModelConfig, store: &ParamStore<S>) -> Self {
        let mut b = ParamBreakdown {
            embeddings: 0,
            per_block: 0,
            blocks: 0,
            mlm_head: 0,
            tag_head: 0,
            layer_weighter: 0,
            other: 0,
            total: 0,
        };
        for (name, t, _) in store.iter() {
            let n = t.len();
            match name.split('.').next().unwrap_or_default() {
                "embeddings" => b.embeddings += n,
                "blocks" => b.blocks += n,
                "mlm_head" => b.mlm_head += n,
                "tag_head" => b.tag_head += n,
                "layer_weighter" => b.layer_weighter += n,
                _ => b.other += n,
            }
            b.total += n;
        }
        b.per_block = b.blocks / config.num_layers.max(1);
        b
    }
}

/// Closed-form parameter accounting for `config`.
pub fn count_params(config: &ModelConfig) -> ParamBreakdown {
    let (l, d, f, v, t, p) = (
        config.num_layers,
        config.hidden,
        config.ffn_hidden,
        config.vocab_size,
        config.type_vocab_size,
        config.max_positions,
    );
    let embeddings = v * d + p * d + 2 * d;
    // four d×d projections with bias, two FFN affines, two normalizations
    let per_block = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d);
    let decoder = if config.tie_decoder { 0 } else { v * d };
    let mlm_head = (d * d + d) + 2 * d + decoder + v;
    let tag_head = if config.tag_head { d * t + t } else { 0 };
    let layer_weighter = if config.tag_head && config.layer_weighter { l } else { 0 };
    let total = embeddings + l * per_block + mlm_head + tag_head + layer_weighter;
    ParamBreakdown {
        embeddings,
        per_block,
        blocks: l * per_block,
        mlm_head,
        tag_head,
        layer_weighter,
        other: 0,
        total,
    }
}
