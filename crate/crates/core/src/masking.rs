//! Dynamic whole-word masking, label construction and batch collation.
//!
//! Corruption is decided per word: a selected word gets one treatment
//! (mask, random replacement or keep) applied to every one of its subword
//! tokens. Supertag labels sit on first subwords only, are produced for
//! every word whether masked or not, and are absent for filtered-out types.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::rng;
use crate::vocab::{TokenizedSentence, MASK, PAD, SEP, SUBWORD_RESERVED, TYPE_RESERVED, T_PAD, T_UNK};
use crate::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE: i32 = -100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Treatments {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for Treatments {
    fn default() -> Self {
        Treatments { mask: 0.8, random: 0.1, keep: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    pub mask_rate: f64,
    pub treatments: Treatments,
    pub tag_replace_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_rate: 0.15,
            treatments: Treatments::default(),
            tag_replace_prob: 0.01,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let t = self.treatments;
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(alloc::format!("mask_rate {} outside [0,1]", self.mask_rate)));
        }
        if [t.mask, t.random, t.keep].iter().any(|p| *p < 0.0)
            || libm::fabs(t.mask + t.random + t.keep - 1.0) > 1e-9
        {
            return Err(Error::Config("treatment probabilities must be non-negative and sum to 1".into()));
        }
        if !(0.0..1.0).contains(&self.tag_replace_prob) {
            return Err(Error::Config("tag_replace_prob outside [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Treatment {
    Mask,
    Random,
    Keep,
}

/// Independent per-word Bernoulli selection with at least one word chosen.
pub fn select_words<R: Rng + ?Sized>(tokenized: &TokenizedSentence, mask_rate: f64, rng: &mut R) -> Vec<usize> {
    let n = tokenized.word_count();
    if n == 0 {
        return Vec::new();
    }
    if mask_rate > 0.0 {
        for _ in 0..64 {
            let picked: Vec<usize> = (0..n).filter(|_| rng.gen::<f64>() < mask_rate).collect();
            if !picked.is_empty() {
                return picked;
            }
        }
    }
    vec![rng.gen_range(0..n)]
}

pub fn draw_treatment<R: Rng + ?Sized>(scheme: &Treatments, rng: &mut R) -> Treatment {
    let u = rng.gen::<f64>();
    if u < scheme.mask {
        Treatment::Mask
    } else if u < scheme.mask + scheme.random {
        Treatment::Random
    } else {
        Treatment::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    pub input_ids: Vec<u32>,
    pub mlm_labels: Vec<i32>,
    /// Treatment applied to each selected word, in selection order.
    pub treatments: Vec<(usize, Treatment)>,
}

pub fn corrupt<R: Rng + ?Sized>(
    tokenized: &TokenizedSentence,
    selection: &[usize],
    vocab_size: usize,
    rng: &mut R,
    scheme: &Treatments,
) -> Corruption {
    let spans = tokenized.word_spans();
    let mut input_ids = tokenized.token_ids.clone();
    let mut mlm_labels = vec![IGNORE; input_ids.len()];
    let first_free = SUBWORD_RESERVED.len() as u32;
    let mut treatments = Vec::with_capacity(selection.len());
    for &w in selection {
        let t = draw_treatment(scheme, rng);
        treatments.push((w, t));
        for pos in spans[w].clone() {
            mlm_labels[pos] = tokenized.token_ids[pos] as i32;
            match t {
                Treatment::Mask => input_ids[pos] = MASK,
                Treatment::Random if vocab_size as u32 > first_free => {
                    input_ids[pos] = rng.gen_range(first_free..vocab_size as u32)
                }
                Treatment::Random | Treatment::Keep => {}
            }
        }
    }
    Corruption { input_ids, mlm_labels, treatments }
}

/// Per-token supertag labels. `type_count` is the full type vocabulary size,
/// reserved entries included.
pub fn build_tag_labels<R: Rng + ?Sized>(
    tokenized: &TokenizedSentence,
    rng: &mut R,
    replace_prob: f64,
    type_count: usize,
) -> Vec<i32> {
    let first_free = TYPE_RESERVED.len() as u32;
    let choices = (type_count as u32).saturating_sub(first_free + 1);
    tokenized
        .word_index
        .iter()
        .zip(&tokenized.is_first_subword)
        .map(|(&w, &first)| {
            if !first || w < 0 {
                return IGNORE;
            }
            let gold = tokenized.tag_ids[w as usize];
            if gold == T_UNK || gold == T_PAD {
                return IGNORE;
            }
            if replace_prob > 0.0 && choices > 0 && rng.gen::<f64>() < replace_prob {
                // uniform over non-reserved ids other than gold
                let mut r = first_free + rng.gen_range(0..choices);
                if r >= gold {
                    r += 1;
                }
                return r as i32;
            }
            gold as i32
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedInstance {
    pub input_ids: Vec<u32>,
    pub mlm_labels: Vec<i32>,
    pub tag_labels: Vec<i32>,
    /// Seed of the generator that produced every draw; replaying it with the
    /// same sentence and configuration reproduces the instance exactly.
    pub seed: u64,
}

impl MaskedInstance {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Uncorrupted instance carrying only the given per-token tag labels.
    pub fn unmasked(tokenized: &TokenizedSentence, tag_labels: Vec<i32>) -> Self {
        MaskedInstance {
            input_ids: tokenized.token_ids.clone(),
            mlm_labels: vec![IGNORE; tokenized.len()],
            tag_labels,
            seed: 0,
        }
    }
}

pub fn mask_instance(
    tokenized: &TokenizedSentence,
    vocab_size: usize,
    type_count: usize,
    config: &MaskingConfig,
    seed: u64,
) -> MaskedInstance {
    let mut rng = rng::from_seed(seed);
    let selection = select_words(tokenized, config.mask_rate, &mut rng);
    let c = corrupt(tokenized, &selection, vocab_size, &mut rng, &config.treatments);
    let tag_labels = build_tag_labels(tokenized, &mut rng, config.tag_replace_prob, type_count);
    MaskedInstance {
        input_ids: c.input_ids,
        mlm_labels: c.mlm_labels,
        tag_labels,
        seed,
    }
}

/// Row-major padded batch of shape `(batch, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub len: usize,
    pub input_ids: Vec<u32>,
    pub mlm_labels: Vec<i32>,
    pub tag_labels: Vec<i32>,
    pub attention_mask: Vec<bool>,
}

impl MaskedBatch {
    pub fn row_len(&self, row: usize) -> usize {
        self.attention_mask[row * self.len..(row + 1) * self.len]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

/// Pads instances into one batch; longer instances are cut before SEP so the
/// last real token stays SEP.
pub fn collate(instances: &[MaskedInstance], max_len: usize) -> Result<MaskedBatch> {
    if instances.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if max_len < 2 {
        return Err(Error::Config("max_len must leave room for CLS and SEP".into()));
    }
    let len = instances.iter().map(|i| i.len().min(max_len)).max().unwrap_or(0);
    let size = instances.len() * len;
    let mut b = MaskedBatch {
        batch: instances.len(),
        len,
        input_ids: vec![PAD; size],
        mlm_labels: vec![IGNORE; size],
        tag_labels: vec![IGNORE; size],
        attention_mask: vec![false; size],
    };
    for (row, inst) in instances.iter().enumerate() {
        let off = row * len;
        let n = inst.len().min(max_len);
        let truncated = inst.len() > max_len;
        let keep = if truncated { n - 1 } else { n };
        b.input_ids[off..off + keep].copy_from_slice(&inst.input_ids[..keep]);
        b.mlm_labels[off..off + keep].copy_from_slice(&inst.mlm_labels[..keep]);
        b.tag_labels[off..off + keep].copy_from_slice(&inst.tag_labels[..keep]);
        if truncated {
            b.input_ids[off + keep] = SEP;
        }
        b.attention_mask[off..off + n].fill(true);
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;
    use crate::vocab::{encode, SubwordVocab, TypeVocab, CLS};
    use proptest::prelude::*;

    fn fixture() -> (SubwordVocab, TypeVocab, TokenizedSentence) {
        let v = SubwordVocab::from_tokens(["de", "huis", "##je", "kat"]).unwrap();
        let t = TypeVocab::from_tokens(["np/n", "n"]).unwrap();
        let s = Sentence::from_pairs([("de", "np/n"), ("huisje", "n")]).unwrap();
        let enc = encode(&v, &t, &s);
        (v, t, enc)
    }

    fn uniform_rng(seed: u64) -> rng::Rng {
        rng::from_seed(seed)
    }

    #[test]
    fn select_floor_and_ceiling() {
        let (_, _, enc) = fixture();
        let mut r = uniform_rng(1);
        for _ in 0..20 {
            assert_eq!(select_words(&enc, 0.0, &mut r).len(), 1);
            assert_eq!(select_words(&enc, 1.0, &mut r), vec![0, 1]);
        }
    }

    #[test]
    fn whole_word_mask_treatment() {
        let (v, _, enc) = fixture();
        let mut r = uniform_rng(2);
        let only_mask = Treatments { mask: 1.0, random: 0.0, keep: 0.0 };
        let c = corrupt(&enc, &[1], v.len(), &mut r, &only_mask);
        assert_eq!(c.input_ids, vec![CLS, v.id("de").unwrap(), MASK, MASK, SEP]);
        let huis = v.id("huis").unwrap() as i32;
        let je = v.id("##je").unwrap() as i32;
        assert_eq!(c.mlm_labels, vec![IGNORE, IGNORE, huis, je, IGNORE]);

        let only_keep = Treatments { mask: 0.0, random: 0.0, keep: 1.0 };
        let c = corrupt(&enc, &[1], v.len(), &mut r, &only_keep);
        assert_eq!(c.input_ids, enc.token_ids);
        assert_eq!(c.mlm_labels, vec![IGNORE, IGNORE, huis, je, IGNORE]);

        let only_random = Treatments { mask: 0.0, random: 1.0, keep: 0.0 };
        for _ in 0..50 {
            let c = corrupt(&enc, &[0, 1], v.len(), &mut r, &only_random);
            assert!(c.input_ids[1..4].iter().all(|&i| i >= 5 && (i as usize) < v.len()));
        }
    }

    #[test]
    fn tag_labels_respect_ignore_rules() {
        let (_, t, enc) = fixture();
        let mut r = uniform_rng(3);
        let labels = build_tag_labels(&enc, &mut r, 0.0, t.len());
        assert_eq!(labels, vec![IGNORE, 2, 3, IGNORE, IGNORE]);

        let v = SubwordVocab::from_tokens(["de", "kat"]).unwrap();
        let s = Sentence::from_pairs([("de", "np/n"), ("kat", "rare")]).unwrap();
        let enc = encode(&v, &t, &s);
        assert_eq!(build_tag_labels(&enc, &mut r, 0.0, t.len()), vec![IGNORE, 2, IGNORE, IGNORE]);
    }

    #[test]
    fn replacement_never_resamples_gold() {
        let (_, _, enc) = fixture();
        let mut r = uniform_rng(4);
        for _ in 0..200 {
            let labels = build_tag_labels(&enc, &mut r, 0.999, 6);
            assert!(labels[1] != 2 && (2..6).contains(&labels[1]));
            assert!(labels[2] != 3 && (2..6).contains(&labels[2]));
        }
    }

    #[test]
    fn masked_words_keep_tag_supervision() {
        let (v, t, enc) = fixture();
        let cfg = MaskingConfig { mask_rate: 1.0, tag_replace_prob: 0.0, ..Default::default() };
        let inst = mask_instance(&enc, v.len(), t.len(), &cfg, 9);
        assert_eq!(inst.tag_labels[1], 2);
        assert_eq!(inst.tag_labels[2], 3);
    }

    #[test]
    fn replay_is_bit_identical() {
        let (v, t, enc) = fixture();
        let cfg = MaskingConfig::default();
        let a = mask_instance(&enc, v.len(), t.len(), &cfg, 1234);
        let b = mask_instance(&enc, v.len(), t.len(), &cfg, a.seed);
        assert_eq!(a, b);
    }

    fn inst(len: usize) -> MaskedInstance {
        let mut ids: Vec<u32> = (0..len as u32).map(|i| 10 + i).collect();
        ids[0] = CLS;
        ids[len - 1] = SEP;
        MaskedInstance {
            input_ids: ids,
            mlm_labels: vec![7; len],
            tag_labels: vec![2; len],
            seed: 0,
        }
    }

    #[test]
    fn collate_pads_and_truncates() {
        let b = collate(&[inst(4), inst(7)], 10).unwrap();
        assert_eq!((b.batch, b.len), (2, 7));
        assert_eq!((b.row_len(0), b.row_len(1)), (4, 7));
        assert_eq!(&b.input_ids[4..7], &[PAD; 3]);
        assert_eq!(&b.mlm_labels[4..7], &[IGNORE; 3]);
        assert_eq!(&b.tag_labels[4..7], &[IGNORE; 3]);

        let b = collate(&[inst(120)], 100).unwrap();
        assert_eq!(b.len, 100);
        assert_eq!(b.input_ids[0], CLS);
        assert_eq!(b.input_ids[99], SEP);
        assert_eq!(b.mlm_labels[99], IGNORE);
        assert_eq!(b.tag_labels[99], IGNORE);
        assert!(collate(&[], 10).is_err());
    }

    proptest! {
        #[test]
        fn corruption_covers_whole_words(seed in any::<u64>(), pieces in proptest::collection::vec(1usize..4, 1..10)) {
            let mut token_ids = vec![CLS];
            let mut word_index = vec![-1];
            let mut first = vec![false];
            for (w, &k) in pieces.iter().enumerate() {
                for j in 0..k {
                    token_ids.push(10 + j as u32);
                    word_index.push(w as i32);
                    first.push(j == 0);
                }
            }
            token_ids.push(SEP);
            word_index.push(-1);
            first.push(false);
            let enc = TokenizedSentence {
                token_ids, word_index, is_first_subword: first,
                tag_ids: (0..pieces.len()).map(|i| if i % 3 == 2 { T_UNK } else { 2 }).collect(),
            };
            let cfg = MaskingConfig { mask_rate: 0.3, ..Default::default() };
            let m = mask_instance(&enc, 20, 5, &cfg, seed);
            for span in enc.word_spans() {
                let labeled = span.clone().filter(|&p| m.mlm_labels[p] != IGNORE).count();
                prop_assert!(labeled == 0 || labeled == span.len());
                let changed: Vec<bool> = span.clone().map(|p| m.input_ids[p] == MASK).collect();
                prop_assert!(changed.iter().all(|&c| c) || changed.iter().all(|&c| !c));
            }
            for p in 0..enc.len() {
                if m.tag_labels[p] != IGNORE {
                    prop_assert!(enc.is_first_subword[p]);
                    prop_assert!(enc.tag_ids[enc.word_index[p] as usize] != T_UNK);
                }
                if m.input_ids[p] != enc.token_ids[p] {
                    prop_assert!(m.mlm_labels[p] != IGNORE);
                }
            }
        }
    }
}
