//! Checkpoint directories.
//!
//! ```text
//! manifest.json   config, dtype, and every parameter's name, shape and
//!                 byte range in params.bin
//! params.bin      all parameters, concatenated row-major little-endian
//! optimizer.bin   optional: first moments of every parameter in the same
//!                 order, then second moments
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tagbert_core::model::{Model, ModelConfig, ParamStore};
use tagbert_core::numerics::{OptimState, Scalar, Tensor};
use tagbert_core::pretrain::TrainState;

use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const OPTIMIZER: &str = "optimizer.bin";
const FORMAT: &str = "tagbert-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub bytes: u64,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumePoint {
    pub step: u64,
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub optimizer_updates: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub params: Vec<TensorEntry>,
    pub resume: Option<ResumePoint>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != FORMAT {
            return Err(Error::Format(format!("{} is not a checkpoint manifest", dir.display())));
        }
        Ok(m)
    }
}

fn blob<S: Scalar>(tensors: impl Iterator<Item = impl AsRef<[S]>>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for &v in t.as_ref() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<S: Scalar>(dir: &Path, model: &Model<S>, state: Option<&TrainState<S>>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut offset = 0u64;
    let params = model
        .params()
        .iter()
        .map(|(name, t, decay)| {
            let bytes = (t.len() * S::BYTES) as u64;
            let e = TensorEntry { name: name.into(), shape: t.shape().to_vec(), offset, bytes, decay };
            offset += bytes;
            e
        })
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        dtype: S::DTYPE.into(),
        config: model.config().clone(),
        params,
        resume: state.map(|s| ResumePoint {
            step: s.step,
            epoch: s.epoch,
            batch_in_epoch: s.batch_in_epoch,
            optimizer_updates: s.optim.t,
        }),
    };
    fs::write(dir.join(PARAMS), blob(model.params().tensors().iter().map(Tensor::data)))?;
    if let Some(s) = state {
        fs::write(dir.join(OPTIMIZER), blob(s.optim.m.iter().chain(&s.optim.v)))?;
    } else if dir.join(OPTIMIZER).exists() {
        fs::remove_file(dir.join(OPTIMIZER))?;
    }
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

fn slice<'a>(data: &'a [u8], e: &TensorEntry, base: u64) -> Result<&'a [u8]> {
    let start = (base + e.offset) as usize;
    let end = start + e.bytes as usize;
    data.get(start..end)
        .ok_or_else(|| Error::Format(format!("blob too short for parameter {}", e.name)))
}

fn decode<S: Scalar>(bytes: &[u8]) -> Vec<S> {
    bytes.chunks_exact(S::BYTES).map(S::read_le).collect()
}

/// Loads the model and, if the checkpoint carries one, its resume state.
pub fn load<S: Scalar>(dir: &Path) -> Result<(Model<S>, Option<TrainState<S>>)> {
    let manifest = Manifest::read(dir)?;
    if manifest.dtype != S::DTYPE {
        return Err(Error::Format(format!("checkpoint holds {} values, {} requested", manifest.dtype, S::DTYPE)));
    }
    let data = fs::read(dir.join(PARAMS))?;
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let count: usize = e.shape.iter().product();
        if count * S::BYTES != e.bytes as usize {
            return Err(Error::Format(format!("parameter {} byte length disagrees with its shape", e.name)));
        }
        let values = decode(slice(&data, e, 0)?);
        store.push(e.name.clone(), Tensor::new(&e.shape, values)?, e.decay)?;
    }
    let total: u64 = manifest.params.iter().map(|e| e.bytes).sum();
    if data.len() as u64 != total {
        return Err(Error::Format(format!("{PARAMS} has {} bytes, manifest describes {total}", data.len())));
    }
    let model = Model::from_params(manifest.config.clone(), store)?;
    let state = match &manifest.resume {
        None => None,
        Some(r) => {
            let opt = fs::read(dir.join(OPTIMIZER))?;
            if opt.len() as u64 != 2 * total {
                return Err(Error::Format(format!("{OPTIMIZER} has {} bytes, expected {}", opt.len(), 2 * total)));
            }
            let m = manifest.params.iter().map(|e| slice(&opt, e, 0).map(decode)).collect::<Result<_>>()?;
            let v = manifest.params.iter().map(|e| slice(&opt, e, total).map(decode)).collect::<Result<_>>()?;
            Some(TrainState {
                optim: OptimState { m, v, t: r.optimizer_updates },
                step: r.step,
                epoch: r.epoch,
                batch_in_epoch: r.batch_in_epoch,
            })
        }
    };
    Ok((model, state))
}

/// Human-readable parameter summary; identical for identical checkpoints.
pub fn describe<S: Scalar>(model: &Model<S>) -> String {
    use std::fmt::Write;
    let c = model.config();
    let b = model.breakdown();
    let mut out = String::new();
    let _ = writeln!(out, "dtype            {}", S::DTYPE);
    let _ = writeln!(
        out,
        "architecture     L={} d={} h={} f={} V={} P={} T={} k={} weighter={} tied={}",
        c.num_layers, c.hidden, c.heads, c.ffn_hidden, c.vocab_size, c.max_positions, c.type_vocab_size, c.tag_layer, c.layer_weighter, c.tie_decoder
    );
    let _ = writeln!(out, "embeddings       {}", b.embeddings);
    let _ = writeln!(out, "per block        {}", b.per_block);
    let _ = writeln!(out, "blocks           {}", b.blocks);
    let _ = writeln!(out, "mlm head         {}", b.mlm_head);
    let _ = writeln!(out, "tag head         {}", b.tag_head);
    let _ = writeln!(out, "layer weighter   {}", b.layer_weighter);
    let _ = writeln!(out, "other            {}", b.other);
    let _ = writeln!(out, "total            {}", b.total);
    let _ = writeln!(out, "tag head share   {:.4}%", 100.0 * b.tag_head_fraction());
    out
}
