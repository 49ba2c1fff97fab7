//! The dual-head transformer encoder.
//!
//! Post-normalization BERT blocks over token plus learned position
//! embeddings. The masked-LM head reads the last block; the supertag head
//! is a single affine map reading block `tag_layer` (or, with the layer
//! weighter, a softmax-weighted mixture of all block outputs). The tag head
//! only reads hidden states, so attaching or detaching it never changes the
//! encoder or the masked-LM output.

mod config;
mod params;

pub use config::{count_params, ModelConfig, ParamBreakdown};
pub use params::ParamStore;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::masking::MaskedBatch;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamStore<S>,
}

/// Graph variables for every parameter of a model, aligned with its store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Dropout source for a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut rng::Rng,
}

/// Inverted dropout on every element of `x`.
pub fn apply_dropout<S: Scalar>(g: &mut Graph<S>, x: Var, d: &mut Dropout<'_>) -> Result<Var> {
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = S::from_f64(1.0 / (1.0 - d.rate));
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if d.rng.gen::<f64>() < d.rate { S::ZERO } else { keep })
        .collect();
    g.mul_const(x, mask)
}

pub(crate) fn truncated_normal(rng: &mut rng::Rng, std: f64) -> f64 {
    loop {
        // Box-Muller
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let z = libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub const INIT_STD: f64 = 0.02;

impl<S: Scalar> Model<S> {
    /// Fresh parameters: affine weights and embeddings from a normal with
    /// standard deviation 0.02 truncated at two deviations, zero biases,
    /// unit normalization gains and a uniform layer weighter.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, rng::STREAM_INIT, 0, 0);
        let mut params = ParamStore::new();
        for (name, shape, kind) in config.layout() {
            let n: usize = shape.iter().product();
            let (data, decay) = match kind {
                config::Init::Normal => (
                    (0..n).map(|_| S::from_f64(truncated_normal(&mut rng, INIT_STD))).collect(),
                    true,
                ),
                config::Init::Zeros => (vec![S::ZERO; n], false),
                config::Init::Ones => (vec![S::ONE; n], false),
            };
            params.push(name, Tensor::new(&shape, data)?, decay)?;
        }
        Ok(Model { config, params })
    }

    /// Reassembles a model from stored parameters, checking every expected
    /// name and shape. Extra entries (e.g. a task head) are kept.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in config.layout() {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "checkpoint",
                        left: shape,
                        right: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Invalid(format!("missing parameter {name}"))),
            }
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<S> {
        self.params
    }

    /// The same model with the supertag head (and layer weighter) removed.
    pub fn without_tag_head(&self) -> Self {
        let mut config = self.config.clone();
        config.tag_head = false;
        config.layer_weighter = false;
        let params = self
            .params
            .filtered(|name| !name.starts_with("tag_head.") && !name.starts_with("layer_weighter"));
        Model { config, params }
    }

    /// Parameter counts measured on the stored tensors.
    pub fn breakdown(&self) -> ParamBreakdown {
        ParamBreakdown::measure(&self.config, &self.params)
    }

    /// Inserts every parameter into `g`; trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn var(&self, bound: &Bound, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} not in model"));
        bound.vars[i]
    }

    fn dropout(&self, g: &mut Graph<S>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
        match dropout.as_mut() {
            Some(d) => apply_dropout(g, x, d),
            None => Ok(x),
        }
    }

    /// Runs the encoder on a `(batch, len)` batch. Returns `L + 1` hidden
    /// states of shape `(batch·len, d)`: the embedding output followed by
    /// each block's output.
    pub fn encode_graph(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        input_ids: &[u32],
        attention_mask: &[bool],
        batch: usize,
        len: usize,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<Vec<Var>> {
        let c = &self.config;
        if len > c.max_positions {
            return Err(Error::TooLong { len, limit: c.max_positions });
        }
        if input_ids.len() != batch * len || attention_mask.len() != batch * len {
            return Err(Error::Shape {
                op: "encode",
                left: vec![batch, len],
                right: vec![input_ids.len(), attention_mask.len()],
            });
        }
        let positions: Vec<u32> = (0..batch).flat_map(|_| 0..len as u32).collect();
        let tok = g.embedding(self.var(b, "embeddings.token"), input_ids)?;
        let pos = g.embedding(self.var(b, "embeddings.position"), &positions)?;
        let x = g.add(tok, pos)?;
        let x = g.layer_norm(
            x,
            self.var(b, "embeddings.norm.gain"),
            self.var(b, "embeddings.norm.bias"),
            c.layer_norm_eps,
        )?;
        let mut x = self.dropout(g, x, &mut dropout)?;

        let heads = c.heads;
        let blocked: Vec<bool> = (0..batch)
            .flat_map(|bi| {
                let row = &attention_mask[bi * len..(bi + 1) * len];
                (0..heads * len).flat_map(move |_| row.iter().map(|&m| !m))
            })
            .collect();
        let scale = S::from_f64(1.0 / libm::sqrt((c.hidden / heads) as f64));

        let mut states = vec![x];
        for l in 0..c.num_layers {
            let p = |n: &str| format!("blocks.{l}.{n}");
            let q = g.linear(x, self.var(b, &p("attn.query.weight")), self.var(b, &p("attn.query.bias")))?;
            let k = g.linear(x, self.var(b, &p("attn.key.weight")), self.var(b, &p("attn.key.bias")))?;
            let v = g.linear(x, self.var(b, &p("attn.value.weight")), self.var(b, &p("attn.value.bias")))?;
            let (q, k, v) = (
                g.split_heads(q, batch, len, heads)?,
                g.split_heads(k, batch, len, heads)?,
                g.split_heads(v, batch, len, heads)?,
            );
            let scores = g.batched_matmul(q, k, true)?;
            let scores = g.scale(scores, scale);
            let scores = g.mask_fill(scores, blocked.clone())?;
            let probs = g.softmax(scores);
            let probs = self.dropout(g, probs, &mut dropout)?;
            let ctx = g.batched_matmul(probs, v, false)?;
            let ctx = g.merge_heads(ctx, batch, len, heads)?;
            let attn = g.linear(ctx, self.var(b, &p("attn.output.weight")), self.var(b, &p("attn.output.bias")))?;
            let h = g.add(x, attn)?;
            let h = g.layer_norm(h, self.var(b, &p("attn.norm.gain")), self.var(b, &p("attn.norm.bias")), c.layer_norm_eps)?;
            let f = g.linear(h, self.var(b, &p("ffn.input.weight")), self.var(b, &p("ffn.input.bias")))?;
            let f = g.gelu(f);
            let f = g.linear(f, self.var(b, &p("ffn.output.weight")), self.var(b, &p("ffn.output.bias")))?;
            let f = self.dropout(g, f, &mut dropout)?;
            let out = g.add(h, f)?;
            x = g.layer_norm(out, self.var(b, &p("ffn.norm.gain")), self.var(b, &p("ffn.norm.bias")), c.layer_norm_eps)?;
            states.push(x);
        }
        Ok(states)
    }

    /// Masked-LM logits `(batch·len, V)` from the last hidden state.
    pub fn mlm_logits_graph(&self, g: &mut Graph<S>, b: &Bound, last: Var) -> Result<Var> {
        let t = g.linear(last, self.var(b, "mlm_head.transform.weight"), self.var(b, "mlm_head.transform.bias"))?;
        let t = g.gelu(t);
        let t = g.layer_norm(
            t,
            self.var(b, "mlm_head.norm.gain"),
            self.var(b, "mlm_head.norm.bias"),
            self.config.layer_norm_eps,
        )?;
        let logits = if self.config.tie_decoder {
            g.matmul(t, self.var(b, "embeddings.token"), true)?
        } else {
            g.matmul(t, self.var(b, "mlm_head.decoder.weight"), false)?
        };
        g.add_bias(logits, self.var(b, "mlm_head.output_bias"))
    }

    /// Softmax mixture weights over block outputs, when the weighter is on.
    pub fn layer_weights_graph(&self, g: &mut Graph<S>, b: &Bound) -> Option<Var> {
        if !(self.config.tag_head && self.config.layer_weighter) {
            return None;
        }
        Some(g.softmax(self.var(b, "layer_weighter.logits")))
    }

    /// The representation the tag head reads.
    pub fn tag_input_graph(&self, g: &mut Graph<S>, b: &Bound, states: &[Var]) -> Result<Var> {
        match self.layer_weights_graph(g, b) {
            Some(w) => g.mix(w, &states[1..]),
            None => Ok(states[self.config.tag_layer]),
        }
    }

    /// Supertag logits `(batch·len, T)`, or `None` when the head is detached.
    pub fn tag_logits_graph(&self, g: &mut Graph<S>, b: &Bound, states: &[Var]) -> Result<Option<Var>> {
        if !self.config.tag_head {
            return Ok(None);
        }
        let input = self.tag_input_graph(g, b, states)?;
        let logits = g.linear(input, self.var(b, "tag_head.weight"), self.var(b, "tag_head.bias"))?;
        Ok(Some(logits))
    }

    fn forward_constants(&self, batch: &MaskedBatch) -> Result<(Graph<S>, Bound, Vec<Var>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let states = self.encode_graph(&mut g, &b, &batch.input_ids, &batch.attention_mask, batch.batch, batch.len, None)?;
        Ok((g, b, states))
    }

    /// Hidden states as `(batch, len, d)` tensors, embedding output first.
    pub fn encode(&self, batch: &MaskedBatch) -> Result<Vec<Tensor<S>>> {
        let (g, _, states) = self.forward_constants(batch)?;
        let shape = [batch.batch, batch.len, self.config.hidden];
        states.iter().map(|&s| g.value(s).clone().reshape(&shape)).collect()
    }

    /// `(batch, len, V)` masked-LM logits.
    pub fn mlm_logits(&self, batch: &MaskedBatch) -> Result<Tensor<S>> {
        let (mut g, b, states) = self.forward_constants(batch)?;
        let out = self.mlm_logits_graph(&mut g, &b, *states.last().expect("embedding state"))?;
        g.value(out).clone().reshape(&[batch.batch, batch.len, self.config.vocab_size])
    }

    /// `(batch, len, T)` supertag logits; `None` when the head is detached.
    pub fn tag_logits(&self, batch: &MaskedBatch) -> Result<Option<Tensor<S>>> {
        let (mut g, b, states) = self.forward_constants(batch)?;
        match self.tag_logits_graph(&mut g, &b, &states)? {
            Some(out) => Ok(Some(g.value(out).clone().reshape(&[batch.batch, batch.len, self.config.type_vocab_size])?)),
            None => Ok(None),
        }
    }

    /// Current softmax mixture weights of the layer weighter.
    pub fn layer_weights(&self) -> Option<Vec<f64>> {
        if !(self.config.tag_head && self.config.layer_weighter) {
            return None;
        }
        let logits = self.params.get("layer_weighter.logits")?;
        let max = logits.data().iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.data().iter().map(|v| libm::exp(v.to_f64() - max)).collect();
        let z: f64 = e.iter().sum();
        Some(e.into_iter().map(|v| v / z).collect())
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.names().iter()
    }
}
