//! Sentences, corpus sanitation and length filtering.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::vocab::SubwordVocab;
use crate::{Error, Result};

/// A sentence of words paired one-to-one with raw supertag strings.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence {
    words: Vec<String>,
    tags: Vec<String>,
}

impl Sentence {
    pub fn new(words: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Invalid("empty sentence".into()));
        }
        if words.len() != tags.len() {
            return Err(Error::Invalid(format!(
                "{} words but {} tags",
                words.len(),
                tags.len()
            )));
        }
        if let Some(w) = words
            .iter()
            .find(|w| w.is_empty() || w.chars().any(char::is_whitespace))
        {
            return Err(Error::Invalid(format!("invalid word {w:?}")));
        }
        if let Some(t) = tags
            .iter()
            .find(|t| t.is_empty() || t.contains(['\n', '\r']))
        {
            return Err(Error::Invalid(format!("invalid tag {t:?}")));
        }
        Ok(Sentence { words, tags })
    }

    pub fn from_pairs<W: Into<String>, T: Into<String>>(
        pairs: impl IntoIterator<Item = (W, T)>,
    ) -> Result<Self> {
        let (words, tags) = pairs.into_iter().map(|(w, t)| (w.into(), t.into())).unzip();
        Self::new(words, tags)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Lowercased, single-space join of the words. Tags do not participate.
    pub fn key(&self) -> String {
        normalize_key(self.words.iter().map(String::as_str))
    }
}

/// Normalizes arbitrary text the same way [`Sentence::key`] does, so that
/// exclusion lists can be built from plain evaluation sentences.
pub fn normalize_key<'a>(words: impl IntoIterator<Item = &'a str>) -> String {
    let mut out = String::new();
    for w in words.into_iter().flat_map(str::split_whitespace) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(w.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Drops duplicates (first occurrence wins) and anything whose key is excluded.
pub fn sanitize(sentences: Vec<Sentence>, exclusion: &BTreeSet<String>) -> Vec<Sentence> {
    let mut seen = BTreeSet::new();
    sentences
        .into_iter()
        .filter(|s| {
            let key = s.key();
            !exclusion.contains(&key) && seen.insert(key)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LengthPolicy {
    /// Keep sentences of strictly fewer than `n` subwords, boundary markers included.
    MaxTokens(usize),
    /// Drop the upper `q` tail of the subword-length distribution.
    TailQuantile(f64),
}

/// Number of subword tokens the sentence occupies, including CLS and SEP.
pub fn subword_length(vocab: &SubwordVocab, sentence: &Sentence) -> usize {
    2 + sentence
        .words()
        .iter()
        .map(|w| vocab.tokenize_word(w).len())
        .sum::<usize>()
}

/// Nearest-rank empirical quantile of `values` at probability `p`.
pub fn nearest_rank(values: &[usize], p: f64) -> Option<usize> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let rank = libm::ceil(p * n as f64 - 1e-9).clamp(1.0, n as f64) as usize;
    Some(sorted[rank - 1])
}

pub fn length_filter(
    sentences: Vec<Sentence>,
    vocab: &SubwordVocab,
    policy: LengthPolicy,
) -> Result<Vec<Sentence>> {
    let lengths: Vec<usize> = sentences.iter().map(|s| subword_length(vocab, s)).collect();
    // (limit, inclusive)
    let (limit, inclusive) = match policy {
        LengthPolicy::MaxTokens(n) => {
            if n == 0 {
                return Err(Error::Config("max_tokens must be at least 1".into()));
            }
            (n, false)
        }
        LengthPolicy::TailQuantile(q) => {
            if !(q > 0.0 && q < 1.0) {
                return Err(Error::Config(format!("tail quantile {q} outside (0,1)")));
            }
            let limit = nearest_rank(&lengths, 1.0 - q)
                .ok_or(Error::Empty("length quantile of an empty corpus"))?;
            (limit, true)
        }
    };
    let keep = |len: usize| len < limit || (inclusive && len == limit);
    Ok(sentences
        .into_iter()
        .zip(lengths)
        .filter(|&(_, len)| keep(len))
        .map(|(s, _)| s)
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorpusStats {
    pub sentence_count: u64,
    pub word_count: u64,
    pub tag_frequency: BTreeMap<String, u64>,
    /// Subword length (with boundary markers) to sentence count.
    pub length_histogram: BTreeMap<usize, u64>,
}

impl CorpusStats {
    pub fn add(&mut self, sentence: &Sentence, vocab: Option<&SubwordVocab>) {
        self.sentence_count += 1;
        self.word_count += sentence.len() as u64;
        for tag in sentence.tags() {
            *self.tag_frequency.entry(tag.clone()).or_default() += 1;
        }
        if let Some(vocab) = vocab {
            *self
                .length_histogram
                .entry(subword_length(vocab, sentence))
                .or_default() += 1;
        }
    }

    /// Combines statistics of two shards. Associative and commutative.
    pub fn merge(mut self, other: &CorpusStats) -> CorpusStats {
        self.sentence_count += other.sentence_count;
        self.word_count += other.word_count;
        for (k, v) in &other.tag_frequency {
            *self.tag_frequency.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.length_histogram {
            *self.length_histogram.entry(*k).or_default() += v;
        }
        self
    }
}

/// Tag and length statistics. Without a vocabulary the length histogram stays empty.
pub fn compute_stats(sentences: &[Sentence], vocab: Option<&SubwordVocab>) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for s in sentences {
        stats.add(s, vocab);
    }
    stats
}
