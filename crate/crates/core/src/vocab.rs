//! Subword (WordPiece-style) and supertag vocabularies, and sentence encoding
//! with first-subword alignment of word-level tags.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{CorpusStats, Sentence};
use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SUBWORD_RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Alignment filler, never a loss target.
pub const T_PAD: u32 = 0;
/// Stands in for every type dropped by coverage filtering.
pub const T_UNK: u32 = 1;
pub const TYPE_RESERVED: [&str; 2] = ["[PAD]", "[UNK]"];

pub const CONTINUATION: &str = "##";
/// Longer words are not segmented and map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 64;

fn index_tokens(tokens: &[String]) -> Result<BTreeMap<String, u32>> {
    let mut id_of = BTreeMap::new();
    for (i, t) in tokens.iter().enumerate() {
        if t.is_empty() || t.contains(['\n', '\r']) {
            return Err(Error::Invalid(format!("invalid vocabulary entry at line {}", i + 1)));
        }
        if id_of.insert(t.clone(), i as u32).is_some() {
            return Err(Error::Invalid(format!("duplicate vocabulary entry {t:?}")));
        }
    }
    Ok(id_of)
}

fn parse_lines(text: &str, reserved: &[&str]) -> Result<Vec<String>> {
    let tokens: Vec<String> = text.lines().map(str::to_string).collect();
    for (i, r) in reserved.iter().enumerate() {
        if tokens.get(i).map(String::as_str) != Some(*r) {
            return Err(Error::Invalid(format!("line {} must hold reserved entry {r}", i + 1)));
        }
    }
    Ok(tokens)
}

fn to_lines(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        out.push_str(t);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    id_of: BTreeMap<String, u32>,
}

impl SubwordVocab {
    /// Builds a vocabulary from non-reserved entries; reserved ids are prepended.
    pub fn from_tokens<S: Into<String>>(entries: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = SUBWORD_RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(Into::into));
        let id_of = index_tokens(&tokens)?;
        Ok(SubwordVocab { tokens, id_of })
    }

    /// Parses the one-entry-per-line file format (line number = id).
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = parse_lines(text, &SUBWORD_RESERVED)?;
        let id_of = index_tokens(&tokens)?;
        Ok(SubwordVocab { tokens, id_of })
    }

    pub fn to_text(&self) -> String {
        to_lines(&self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match-first segmentation. A word with any unmatched
    /// position maps to a single `[UNK]`.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.is_empty() || chars.len() > MAX_WORD_CHARS {
            return alloc::vec![UNK];
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut buf = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let lo = chars[start].0;
                let hi = chars.get(end).map_or(word.len(), |c| c.0);
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION);
                }
                buf.push_str(&word[lo..hi]);
                if let Some(id) = self.id(&buf) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => return alloc::vec![UNK],
            }
        }
        pieces
    }
}

/// Word-piece vocabulary induction by iterative highest-frequency pair merging
/// inside words. Ties are broken lexicographically on the (left, right) pair.
pub fn build_subword_vocab<'a>(
    words: impl IntoIterator<Item = &'a str>,
    target_size: usize,
) -> Result<SubwordVocab> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for w in words {
        *counts.entry(w).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::Empty("subword vocabulary corpus"));
    }
    let mut alphabet: Vec<String> = Vec::new();
    for w in counts.keys() {
        for c in w.chars() {
            alphabet.push(c.to_string());
            alphabet.push(format!("{CONTINUATION}{c}"));
        }
    }
    alphabet.sort();
    alphabet.dedup();
    let floor = SUBWORD_RESERVED.len() + alphabet.len();
    if target_size <= floor {
        return Err(Error::Config(format!(
            "target size {target_size} must exceed reserved + alphabet size {floor}"
        )));
    }

    let mut segmented: Vec<(Vec<String>, u64)> = counts
        .iter()
        .filter(|(w, _)| w.chars().count() <= MAX_WORD_CHARS)
        .map(|(w, &n)| {
            let pieces = w
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                .collect();
            (pieces, n)
        })
        .collect();
    let mut entries = alphabet;
    let mut known: alloc::collections::BTreeSet<String> = entries.iter().cloned().collect();

    while SUBWORD_RESERVED.len() + entries.len() < target_size {
        let mut pairs: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (pieces, n) in &segmented {
            for p in pieces.windows(2) {
                *pairs.entry((p[0].as_str(), p[1].as_str())).or_default() += n;
            }
        }
        // BTreeMap iteration is lexicographic, so the first maximum wins ties.
        let Some(((left, right), _)) = pairs
            .iter()
            .fold(None, |best: Option<(&(&str, &str), u64)>, (k, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((k, v)),
            })
        else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{}", right.trim_start_matches(CONTINUATION));
        for (pieces, _) in &mut segmented {
            let mut out = Vec::with_capacity(pieces.len());
            let mut i = 0;
            while i < pieces.len() {
                if i + 1 < pieces.len() && pieces[i] == left && pieces[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(core::mem::take(&mut pieces[i]));
                    i += 1;
                }
            }
            *pieces = out;
        }
        if known.insert(merged.clone()) {
            entries.push(merged);
        }
    }
    SubwordVocab::from_tokens(entries)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeVocab {
    tokens: Vec<String>,
    id_of: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CoverageReport {
    pub kept: usize,
    pub total_types: usize,
    pub achieved: f64,
    pub requested: f64,
}

impl TypeVocab {
    pub fn from_tokens<S: Into<String>>(entries: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut tokens: Vec<String> = TYPE_RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(Into::into));
        let id_of = index_tokens(&tokens)?;
        Ok(TypeVocab { tokens, id_of })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens = parse_lines(text, &TYPE_RESERVED)?;
        let id_of = index_tokens(&tokens)?;
        Ok(TypeVocab { tokens, id_of })
    }

    pub fn to_text(&self) -> String {
        to_lines(&self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a supertag; filtered-out tags map to [`T_UNK`].
    pub fn id(&self, tag: &str) -> u32 {
        self.id_of.get(tag).copied().unwrap_or(T_UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Keeps the smallest frequency-ranked prefix of types covering `coverage`
/// of all occurrences.
pub fn build_type_vocab(stats: &CorpusStats, coverage: f64) -> Result<(TypeVocab, CoverageReport)> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!("coverage {coverage} outside (0,1]")));
    }
    if stats.tag_frequency.is_empty() {
        return Err(Error::Empty("type frequency table"));
    }
    let mut ranked: Vec<(&String, u64)> = stats.tag_frequency.iter().map(|(k, &v)| (k, v)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let total: u64 = ranked.iter().map(|r| r.1).sum();
    let needed = coverage * total as f64 - 1e-9 * total as f64;
    let mut cum = 0u64;
    let mut kept = 0;
    for (_, n) in &ranked {
        cum += n;
        kept += 1;
        if cum as f64 >= needed {
            break;
        }
    }
    let vocab = TypeVocab::from_tokens(ranked[..kept].iter().map(|r| r.0.clone()))?;
    let report = CoverageReport {
        kept,
        total_types: ranked.len(),
        achieved: cum as f64 / total as f64,
        requested: coverage,
    };
    Ok((vocab, report))
}

/// Sentinel word index of boundary markers and padding.
pub const NO_WORD: i32 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSentence {
    pub token_ids: Vec<u32>,
    pub word_index: Vec<i32>,
    pub is_first_subword: Vec<bool>,
    /// One type id per word.
    pub tag_ids: Vec<u32>,
}

impl TokenizedSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn word_count(&self) -> usize {
        self.tag_ids.len()
    }

    /// Token positions covered by each word.
    pub fn word_spans(&self) -> Vec<core::ops::Range<usize>> {
        let mut spans: Vec<core::ops::Range<usize>> = Vec::with_capacity(self.word_count());
        for (pos, &w) in self.word_index.iter().enumerate() {
            if w < 0 {
                continue;
            }
            match spans.get_mut(w as usize) {
                Some(span) => span.end = pos + 1,
                None => spans.push(pos..pos + 1),
            }
        }
        spans
    }
}

pub fn encode(vocab: &SubwordVocab, types: &TypeVocab, sentence: &Sentence) -> TokenizedSentence {
    let mut token_ids = alloc::vec![CLS];
    let mut word_index = alloc::vec![NO_WORD];
    let mut is_first = alloc::vec![false];
    for (i, w) in sentence.words().iter().enumerate() {
        for (j, id) in vocab.tokenize_word(w).into_iter().enumerate() {
            token_ids.push(id);
            word_index.push(i as i32);
            is_first.push(j == 0);
        }
    }
    token_ids.push(SEP);
    word_index.push(NO_WORD);
    is_first.push(false);
    TokenizedSentence {
        token_ids,
        word_index,
        is_first_subword: is_first,
        tag_ids: sentence.tags().iter().map(|t| types.id(t)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn greedy_longest_match() {
        let v = SubwordVocab::from_tokens(["huis", "##je", "de"]).unwrap();
        assert_eq!(v.tokenize_word("huisje"), vec![v.id("huis").unwrap(), v.id("##je").unwrap()]);
        assert_eq!(v.tokenize_word("xyz"), vec![UNK]);
        assert_eq!(v.tokenize_word("huisx"), vec![UNK]);
        let v = SubwordVocab::from_tokens(["a", "ab", "##c"]).unwrap();
        assert_eq!(v.tokenize_word("abc"), vec![v.id("ab").unwrap(), v.id("##c").unwrap()]);
    }

    #[test]
    fn overlong_word_is_unk() {
        let v = SubwordVocab::from_tokens(["a", "##a"]).unwrap();
        assert_eq!(v.tokenize_word(&"a".repeat(64)).len(), 64);
        assert_eq!(v.tokenize_word(&"a".repeat(65)), vec![UNK]);
    }

    #[test]
    fn merge_trace_on_tiny_corpus() {
        let corpus: Vec<&str> = core::iter::repeat("aaab").take(10).collect();
        let v = build_subword_vocab(corpus.iter().copied(), 12).unwrap();
        assert_eq!(v.len(), 12);
        for t in ["a", "##a", "b", "##b", "##aa", "##aab", "aaab"] {
            assert!(v.id(t).is_some(), "missing {t}");
        }
        assert!(build_subword_vocab(corpus.iter().copied(), 9).is_err());
        assert!(build_subword_vocab(core::iter::empty(), 100).is_err());
    }

    #[test]
    fn builder_is_deterministic() {
        let words = ["kat", "katten", "hond", "honden", "de", "het", "kat"];
        let a = build_subword_vocab(words.iter().copied(), 40).unwrap();
        let b = build_subword_vocab(words.iter().copied(), 40).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(SubwordVocab::from_text(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn vocab_file_requires_reserved_lines() {
        assert!(SubwordVocab::from_text("[PAD]\n[UNK]\nfoo\n").is_err());
        assert!(TypeVocab::from_text("[PAD]\n[UNK]\nnp\n").is_ok());
    }

    fn stats_of(counts: &[(&str, u64)]) -> CorpusStats {
        let mut s = CorpusStats::default();
        for (k, v) in counts {
            s.tag_frequency.insert(k.to_string(), *v);
            s.word_count += v;
        }
        s
    }

    #[test]
    fn type_vocab_coverage() {
        let s = stats_of(&[("A", 6), ("B", 3), ("C", 1)]);
        let (v, r) = build_type_vocab(&s, 0.9).unwrap();
        assert_eq!(v.tokens()[2..], ["A".to_string(), "B".to_string()]);
        assert_eq!(r.kept, 2);
        assert!((r.achieved - 0.9).abs() < 1e-12);
        assert_eq!(v.id("C"), T_UNK);
        let (v, _) = build_type_vocab(&s, 1.0).unwrap();
        assert_eq!(v.len(), 5);
        assert!(build_type_vocab(&CorpusStats::default(), 0.9).is_err());
        assert!(build_type_vocab(&s, 0.0).is_err());
    }

    #[test]
    fn type_vocab_ties_are_lexicographic() {
        let s = stats_of(&[("b", 2), ("a", 2), ("c", 2)]);
        let (v, _) = build_type_vocab(&s, 0.5).unwrap();
        assert_eq!(v.tokens()[2..], ["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn zipf_coverage_matches_cumulative_sum() {
        let names: Vec<String> = (0..50).map(|i| format!("t{i:02}")).collect();
        let counts: Vec<(&str, u64)> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), (10_000.0 / (i as f64 + 1.0)) as u64))
            .collect();
        let s = stats_of(&counts);
        // independent brute force: walk the counts, already in rank order
        let total: u64 = counts.iter().map(|c| c.1).sum();
        let mut cum = 0;
        let mut expected = 0;
        for (_, c) in &counts {
            cum += c;
            expected += 1;
            if cum * 100 >= 95 * total {
                break;
            }
        }
        let (_, r) = build_type_vocab(&s, 0.95).unwrap();
        assert_eq!(r.kept, expected);
    }

    #[test]
    fn encode_alignment() {
        let v = SubwordVocab::from_tokens(["de", "huis", "##je"]).unwrap();
        let t = TypeVocab::from_tokens(["DET"]).unwrap();
        let s = Sentence::from_pairs([("de", "DET"), ("huisje", "N")]).unwrap();
        let enc = encode(&v, &t, &s);
        assert_eq!(enc.token_ids.len(), 5);
        assert_eq!(enc.is_first_subword, vec![false, true, true, false, false]);
        assert_eq!(enc.word_index, vec![-1, 0, 1, 1, -1]);
        assert_eq!(enc.tag_ids, vec![2, T_UNK]);
        assert_eq!(enc.word_spans(), vec![1..2, 2..4]);

        let one = encode(&v, &t, &Sentence::from_pairs([("de", "DET")]).unwrap());
        assert_eq!(one.is_first_subword, vec![false, true, false]);
    }

    proptest! {
        #[test]
        fn detokenization_roundtrip(word in "[a-e]{1,12}") {
            let corpus = ["abc", "bcd", "cde", "aabbcc", "eda"];
            let v = build_subword_vocab(corpus.iter().copied(), 30).unwrap();
            let ids = v.tokenize_word(&word);
            prop_assume!(ids != vec![UNK]);
            let rebuilt: String = ids.iter().map(|&i| v.token(i).unwrap().trim_start_matches(CONTINUATION)).collect();
            prop_assert_eq!(rebuilt, word);
        }

        #[test]
        fn alignment_counts(words in proptest::collection::vec("[a-f]{1,8}", 1..10)) {
            let v = build_subword_vocab(["abc", "def", "fab"].iter().copied(), 25).unwrap();
            let t = TypeVocab::from_tokens(["X"]).unwrap();
            let s = Sentence::from_pairs(words.iter().map(|w| (w.as_str(), "X"))).unwrap();
            let enc = encode(&v, &t, &s);
            let firsts = enc.is_first_subword.iter().filter(|&&f| f).count();
            prop_assert_eq!(firsts, s.len());
            prop_assert_eq!(enc.tag_ids.len(), s.len());
            let idx: Vec<i32> = enc.word_index.iter().copied().filter(|&w| w >= 0).collect();
            prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(!enc.is_first_subword[0] && !enc.is_first_subword[enc.len() - 1]);
        }

        #[test]
        fn coverage_is_minimal(counts in proptest::collection::vec(1u64..50, 1..20), cov in 0.05f64..1.0) {
            let names: Vec<String> = (0..counts.len()).map(|i| format!("t{i}")).collect();
            let s = stats_of(&names.iter().map(String::as_str).zip(counts.iter().copied()).collect::<Vec<_>>());
            let (_, r) = build_type_vocab(&s, cov).unwrap();
            prop_assert!(r.achieved >= cov - 1e-9);
            let mut sorted = counts.clone();
            sorted.sort_unstable_by(|a, b| b.cmp(a));
            let total: u64 = sorted.iter().sum();
            let without_last: u64 = sorted[..r.kept - 1].iter().sum();
            prop_assert!((without_last as f64) < cov * total as f64);
        }
    }
}
