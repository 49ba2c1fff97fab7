//! Encoded-corpus shard files.
//!
//! ```text
//! u64 LE        header length in bytes
//! header        JSON: format, sentence count, vocabulary sizes and the
//!               field list (name, dtype, shape) in storage order
//! arrays        each field, row-major little-endian, in header order
//! ```
//!
//! Sentences are stored ragged: `offsets[i]..offsets[i+1]` indexes the
//! per-token arrays of sentence `i`, `word_offsets` likewise the per-word
//! tag ids.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use tagbert_core::vocab::TokenizedSentence;

use crate::{Error, Result};

const FORMAT: &str = "tagbert-shard";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub format: String,
    pub version: u32,
    pub sentences: usize,
    pub vocab_size: usize,
    pub type_vocab_size: usize,
    pub fields: Vec<Field>,
}

fn field(name: &str, dtype: &str, len: usize) -> Field {
    Field { name: name.into(), dtype: dtype.into(), shape: vec![len] }
}

pub fn write_shard(
    mut w: impl Write,
    data: &[TokenizedSentence],
    vocab_size: usize,
    type_vocab_size: usize,
) -> Result<()> {
    let tokens: usize = data.iter().map(TokenizedSentence::len).sum();
    let words: usize = data.iter().map(|s| s.tag_ids.len()).sum();
    let header = ShardHeader {
        format: FORMAT.into(),
        version: 1,
        sentences: data.len(),
        vocab_size,
        type_vocab_size,
        fields: vec![
            field("offsets", "u64", data.len() + 1),
            field("token_ids", "u32", tokens),
            field("word_index", "i32", tokens),
            field("is_first_subword", "u8", tokens),
            field("word_offsets", "u64", data.len() + 1),
            field("tag_ids", "u32", words),
        ],
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(8 * (data.len() + 1) + 13 * tokens);
    let mut off = 0u64;
    buf.extend_from_slice(&off.to_le_bytes());
    for s in data {
        off += s.len() as u64;
        buf.extend_from_slice(&off.to_le_bytes());
    }
    data.iter().flat_map(|s| &s.token_ids).for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    data.iter().flat_map(|s| &s.word_index).for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    data.iter().flat_map(|s| &s.is_first_subword).for_each(|&v| buf.push(v as u8));
    let mut off = 0u64;
    buf.extend_from_slice(&off.to_le_bytes());
    for s in data {
        off += s.tag_ids.len() as u64;
        buf.extend_from_slice(&off.to_le_bytes());
    }
    data.iter().flat_map(|s| &s.tag_ids).for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("shard ends early".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize, T>(&mut self, f: &Field, dtype: &str, conv: fn([u8; N]) -> T) -> Result<Vec<T>> {
        if f.dtype != dtype {
            return Err(Error::Format(format!("field {} has dtype {}, expected {dtype}", f.name, f.dtype)));
        }
        let n: usize = f.shape.iter().product();
        Ok(self
            .take(n * N)?
            .chunks_exact(N)
            .map(|c| conv(c.try_into().expect("chunk size")))
            .collect())
    }
}

pub fn read_shard(mut r: impl Read) -> Result<(ShardHeader, Vec<TokenizedSentence>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { data: &bytes, pos: 0 };
    let len = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: ShardHeader = serde_json::from_slice(c.take(len)?)?;
    if header.format != FORMAT {
        return Err(Error::Format("not a shard file".into()));
    }
    let names: Vec<&str> = header.fields.iter().map(|f| f.name.as_str()).collect();
    if names != ["offsets", "token_ids", "word_index", "is_first_subword", "word_offsets", "tag_ids"] {
        return Err(Error::Format(format!("unexpected shard fields {names:?}")));
    }
    let f = &header.fields;
    let offsets = c.array(&f[0], "u64", u64::from_le_bytes)?;
    let token_ids = c.array(&f[1], "u32", u32::from_le_bytes)?;
    let word_index = c.array(&f[2], "i32", i32::from_le_bytes)?;
    let first = c.array(&f[3], "u8", |[b]: [u8; 1]| b != 0)?;
    let word_offsets = c.array(&f[4], "u64", u64::from_le_bytes)?;
    let tag_ids = c.array(&f[5], "u32", u32::from_le_bytes)?;
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after shard arrays".into()));
    }
    let ends_ok = |o: &[u64], n: usize| o.len() == header.sentences + 1 && o.last().copied() == Some(n as u64);
    if !ends_ok(&offsets, token_ids.len()) || !ends_ok(&word_offsets, tag_ids.len()) {
        return Err(Error::Format("shard offsets disagree with array lengths".into()));
    }
    let lens_ok = [word_index.len(), first.len()].iter().all(|&n| n == token_ids.len());
    if !lens_ok {
        return Err(Error::Format("shard arrays differ in length".into()));
    }
    let mut out = Vec::with_capacity(header.sentences);
    for (w, ww) in offsets.windows(2).zip(word_offsets.windows(2)) {
        let (a, b) = (w[0] as usize, w[1] as usize);
        let (wa, wb) = (ww[0] as usize, ww[1] as usize);
        if a > b || wa > wb {
            return Err(Error::Format("shard offsets are not monotone".into()));
        }
        out.push(TokenizedSentence {
            token_ids: token_ids[a..b].to_vec(),
            word_index: word_index[a..b].to_vec(),
            is_first_subword: first[a..b].to_vec(),
            tag_ids: tag_ids[wa..wb].to_vec(),
        });
    }
    Ok((header, out))
}
