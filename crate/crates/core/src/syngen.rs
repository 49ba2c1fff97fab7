//! Deterministic synthetic categorial-grammar corpora.
//!
//! A grammar is a lexicon of functional types over the atoms `s`, `np`, `n`
//! and `pp`, together with the application rules those types license
//! (`X/Y Y => X` and `Y Y\X => X`). Sentences are sampled top-down from `s`
//! by a probabilistic expansion of categories with Zipf-distributed option
//! weights, so every sampled tag sequence has a derivation by construction;
//! [`derives`] re-checks that bottom-up.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::Sentence;
use crate::rng;
use crate::{Error, Result};

pub const START: &str = "s";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Atom(String),
    /// `result/argument`: takes its argument on the right.
    Right(Box<Category>, Box<Category>),
    /// `argument\result`: takes its argument on the left.
    Left(Box<Category>, Box<Category>),
}

impl Category {
    pub fn atom(s: &str) -> Self {
        Category::Atom(s.into())
    }

    pub fn depth(&self) -> usize {
        match self {
            Category::Atom(_) => 0,
            Category::Right(a, b) | Category::Left(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Parses the bracketed slash notation, e.g. `(np\s)/np`.
    pub fn parse(text: &str) -> Result<Self> {
        let chars: Vec<char> = text.chars().collect();
        let mut pos = 0;
        let c = parse_expr(&chars, &mut pos)?;
        if pos != chars.len() {
            return Err(Error::Invalid(format!("trailing input in category {text:?}")));
        }
        Ok(c)
    }

    /// Result after stripping every argument, and the number of arguments.
    pub fn head(&self) -> (&str, usize) {
        match self {
            Category::Atom(a) => (a, 0),
            Category::Right(res, _) | Category::Left(_, res) => {
                let (h, n) = res.head();
                (h, n + 1)
            }
        }
    }

    fn atoms(&self, out: &mut BTreeSet<String>) {
        match self {
            Category::Atom(a) => {
                out.insert(a.clone());
            }
            Category::Right(a, b) | Category::Left(a, b) => {
                a.atoms(out);
                b.atoms(out);
            }
        }
    }
}

fn parse_term(chars: &[char], pos: &mut usize) -> Result<Category> {
    if chars.get(*pos) == Some(&'(') {
        *pos += 1;
        let inner = parse_expr(chars, pos)?;
        if chars.get(*pos) != Some(&')') {
            return Err(Error::Invalid("unbalanced parenthesis in category".into()));
        }
        *pos += 1;
        return Ok(inner);
    }
    let start = *pos;
    while *pos < chars.len() && chars[*pos].is_ascii_alphanumeric() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Invalid("expected atomic category".into()));
    }
    Ok(Category::Atom(chars[start..*pos].iter().collect()))
}

// Binary connectives associate to the left: a/b/c == (a/b)/c.
fn parse_expr(chars: &[char], pos: &mut usize) -> Result<Category> {
    let mut left = parse_term(chars, pos)?;
    while let Some(&op) = chars.get(*pos) {
        if op != '/' && op != '\\' {
            break;
        }
        *pos += 1;
        let right = parse_term(chars, pos)?;
        left = if op == '/' {
            Category::Right(Box::new(left), Box::new(right))
        } else {
            Category::Left(Box::new(left), Box::new(right))
        };
    }
    Ok(left)
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let wrap = |c: &Category, f: &mut fmt::Formatter<'_>| match c {
            Category::Atom(a) => write!(f, "{a}"),
            _ => write!(f, "({c})"),
        };
        match self {
            Category::Atom(a) => write!(f, "{a}"),
            Category::Right(res, arg) => {
                wrap(res, f)?;
                write!(f, "/")?;
                wrap(arg, f)
            }
            Category::Left(arg, res) => {
                wrap(arg, f)?;
                write!(f, "\\")?;
                wrap(res, f)
            }
        }
    }
}

/// Lexical types in introduction order. Each bundle is added whole, and only
/// once every atom it mentions is produced by an earlier bundle.
const CATALOG: &[&[&str]] = &[
    &["np"],
    &["np\\s"],
    &["(np\\s)/np"],
    &["n", "np/n"],
    &["n/n"],
    &["(np\\s)\\(np\\s)"],
    &["s/s"],
    &["((np\\s)/np)/np"],
    &["(n\\n)/np"],
    &["(np\\s)/s"],
    &["((np\\s)\\(np\\s))/np"],
    &["(n\\n)/(np\\s)"],
    &["(np\\s)/(np\\s)"],
    &["pp/np", "(np\\s)/pp"],
    &["s\\s"],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrammarParams {
    pub vocab_size: usize,
    pub type_count: usize,
    pub ambiguity_rate: f64,
    /// Maximum nesting depth of lexical types.
    pub max_depth: usize,
}

impl Default for GrammarParams {
    fn default() -> Self {
        GrammarParams {
            vocab_size: 50,
            type_count: 12,
            ambiguity_rate: 0.3,
            max_depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LexEntry {
    pub word: String,
    /// Lexical types of the word with their emission weights.
    pub types: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Expansion {
    /// Emit one word whose lexical type is the category itself.
    Lexical,
    /// `category => functor argument` (functor first) or `argument functor`.
    Apply { functor: String, argument: String, functor_first: bool },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightedExpansion {
    pub expansion: Expansion,
    pub weight: f64,
    /// Fewest words any derivation through this option yields.
    pub min_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ToyGrammar {
    pub seed: u64,
    pub atoms: Vec<String>,
    pub types: Vec<String>,
    pub lexicon: Vec<LexEntry>,
    /// Expansion options per derivable category.
    pub expansions: BTreeMap<String, Vec<WeightedExpansion>>,
    /// Beyond this derivation depth only the shortest option is taken.
    pub recursion_limit: usize,
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (0..n).map(|r| 1.0 / (r + 1) as f64).collect()
}

const SYL_ONSET: &[&str] = &["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "w", "st", "sch", "br", "kl"];
const SYL_VOWEL: &[&str] = &["a", "e", "i", "o", "u", "aa", "ee", "oo", "ij", "ui", "ou"];
const SYL_CODA: &[&str] = &["", "", "n", "r", "s", "t", "k", "l", "m"];

fn make_word(rng: &mut rng::Rng) -> String {
    let syllables = rng.gen_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(SYL_ONSET.choose(rng).expect("non-empty"));
        w.push_str(SYL_VOWEL.choose(rng).expect("non-empty"));
        w.push_str(SYL_CODA.choose(rng).expect("non-empty"));
    }
    w
}

/// Derivable functor categories: every lexical type and each partial
/// application of it.
fn functor_chain(c: &Category, out: &mut BTreeSet<Category>) {
    out.insert(c.clone());
    match c {
        Category::Right(res, _) | Category::Left(_, res) => functor_chain(res, out),
        Category::Atom(_) => {}
    }
}

type Table = BTreeMap<Category, Vec<(Expansion, usize)>>;

/// Expansion options of every derivable category with the minimal yield of
/// each option. Fails if some category cannot terminate.
fn expansion_table(types: &[Category]) -> Result<Table> {
    let mut derivable = BTreeSet::new();
    for t in types {
        functor_chain(t, &mut derivable);
    }
    let lexical: BTreeSet<&Category> = types.iter().collect();
    let mut raw: BTreeMap<Category, Vec<Expansion>> = BTreeMap::new();
    for c in &derivable {
        if lexical.contains(c) {
            raw.entry(c.clone()).or_default().push(Expansion::Lexical);
        }
        match c {
            Category::Right(res, arg) => raw.entry((**res).clone()).or_default().push(Expansion::Apply {
                functor: c.to_string(),
                argument: arg.to_string(),
                functor_first: true,
            }),
            Category::Left(arg, res) => raw.entry((**res).clone()).or_default().push(Expansion::Apply {
                functor: c.to_string(),
                argument: arg.to_string(),
                functor_first: false,
            }),
            Category::Atom(_) => {}
        }
    }

    let mut min_len: BTreeMap<String, usize> = BTreeMap::new();
    let option_len = |e: &Expansion, m: &BTreeMap<String, usize>| match e {
        Expansion::Lexical => Some(1),
        Expansion::Apply { functor, argument, .. } => Some(m.get(functor)? + m.get(argument)?),
    };
    loop {
        let mut changed = false;
        for (c, opts) in &raw {
            let best = opts.iter().filter_map(|e| option_len(e, &min_len)).min();
            let key = c.to_string();
            if let Some(b) = best {
                if min_len.get(&key).is_none_or(|&cur| b < cur) {
                    min_len.insert(key, b);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    raw.into_iter()
        .map(|(c, opts)| {
            let opts = opts
                .into_iter()
                .map(|e| {
                    let l = option_len(&e, &min_len).ok_or_else(|| Error::Config(format!("{c} cannot terminate")))?;
                    Ok((e, l))
                })
                .collect::<Result<_>>()?;
            Ok((c, opts))
        })
        .collect()
}

pub fn make_grammar(seed: u64, params: &GrammarParams) -> Result<ToyGrammar> {
    if params.type_count < 3 {
        return Err(Error::Config("type_count must be at least 3".into()));
    }
    if !(0.0..1.0).contains(&params.ambiguity_rate) {
        return Err(Error::Config("ambiguity_rate outside [0,1)".into()));
    }
    if params.vocab_size < params.type_count {
        return Err(Error::Config(format!(
            "vocab_size {} cannot give each of {} types a word",
            params.vocab_size, params.type_count
        )));
    }

    // greedy bundle selection under the depth bound; a bundle is taken only
    // if every category it mentions can still be derived
    let mut types: Vec<Category> = Vec::new();
    for bundle in CATALOG {
        let cats: Vec<Category> = bundle.iter().map(|t| Category::parse(t).expect("catalog parses")).collect();
        if cats.iter().any(|c| c.depth() > params.max_depth) || types.len() + cats.len() > params.type_count {
            continue;
        }
        let mut trial = types.clone();
        trial.extend(cats);
        if expansion_table(&trial).is_ok() {
            types = trial;
        }
        if types.len() == params.type_count {
            break;
        }
    }
    if types.len() != params.type_count {
        return Err(Error::Config(format!(
            "only {} types expressible under max_depth {}, {} requested",
            types.len(),
            params.max_depth,
            params.type_count
        )));
    }
    let mut produced = BTreeSet::new();
    types.iter().for_each(|t| t.atoms(&mut produced));

    let table = expansion_table(&types)?;
    if !table.contains_key(&Category::atom(START)) {
        return Err(Error::Config("start category is not derivable".into()));
    }

    let mut rng = rng::substream(seed, "grammar", 0, 0);
    let mut expansions = BTreeMap::new();
    for (c, mut opts) in table {
        // shortest options first; seeded order among equals
        opts.shuffle(&mut rng);
        opts.sort_by_key(|o| o.1);
        let weights = zipf_weights(opts.len());
        expansions.insert(
            c.to_string(),
            opts.into_iter()
                .zip(weights)
                .map(|((expansion, min_len), weight)| WeightedExpansion { expansion, weight, min_len })
                .collect(),
        );
    }

    // lexicon: every type gets a word, the rest are spread at random
    let type_names: Vec<String> = types.iter().map(ToString::to_string).collect();
    let mut words: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    while words.len() < params.vocab_size {
        let w = make_word(&mut rng);
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    let mut primary: Vec<usize> = (0..params.type_count).collect();
    while primary.len() < params.vocab_size {
        primary.push(rng.gen_range(0..params.type_count));
    }
    primary.shuffle(&mut rng);
    let mut lexicon: Vec<LexEntry> = words
        .into_iter()
        .zip(&primary)
        .map(|(word, &t)| LexEntry { word, types: vec![(type_names[t].clone(), 0.0)] })
        .collect();
    for entry in &mut lexicon {
        if rng.gen::<f64>() < params.ambiguity_rate {
            let first = &entry.types[0].0;
            let others: Vec<&String> = type_names.iter().filter(|t| *t != first).collect();
            let extra = (*others.choose(&mut rng).expect("at least 3 types")).clone();
            entry.types.push((extra, 0.0));
        }
    }
    // emission weights: Zipf over each type's words in seeded order
    for t in &type_names {
        let mut holders: Vec<(usize, usize)> = lexicon
            .iter()
            .enumerate()
            .flat_map(|(wi, e)| e.types.iter().enumerate().filter(|(_, (n, _))| n == t).map(move |(ti, _)| (wi, ti)))
            .collect();
        holders.shuffle(&mut rng);
        for ((wi, ti), w) in holders.into_iter().zip(zipf_weights(usize::MAX.min(lexicon.len() * 2))) {
            lexicon[wi].types[ti].1 = w;
        }
    }

    let mut atoms: Vec<String> = produced.into_iter().collect();
    atoms.sort();
    let grammar = ToyGrammar {
        seed,
        atoms,
        types: type_names,
        lexicon,
        expansions,
        recursion_limit: 24,
    };
    if grammar.expected_tag_counts().is_none() {
        return Err(Error::Config("sampling process does not terminate in expectation".into()));
    }
    Ok(grammar)
}

/// Lookup tables for sampling.
struct Index<'g> {
    options: BTreeMap<&'g str, &'g [WeightedExpansion]>,
    emitters: BTreeMap<&'g str, Vec<(&'g str, f64)>>,
}

impl<'g> Index<'g> {
    fn new(g: &'g ToyGrammar) -> Self {
        let options = g.expansions.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
        let mut emitters: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for e in &g.lexicon {
            for (t, w) in &e.types {
                emitters.entry(t.as_str()).or_default().push((e.word.as_str(), *w));
            }
        }
        Index { options, emitters }
    }
}

fn weighted_pick<'a, T>(items: &'a [T], weight: impl Fn(&T) -> f64, rng: &mut rng::Rng) -> &'a T {
    let total: f64 = items.iter().map(&weight).sum();
    let mut u = rng.gen::<f64>() * total;
    for it in items {
        u -= weight(it);
        if u < 0.0 {
            return it;
        }
    }
    items.last().expect("non-empty")
}

impl ToyGrammar {
    fn expand<'g>(
        &'g self,
        index: &Index<'g>,
        category: &'g str,
        depth: usize,
        rng: &mut rng::Rng,
        out: &mut Vec<(&'g str, &'g str)>,
    ) {
        let opts = index.options[category];
        let choice = if depth >= self.recursion_limit {
            opts.iter().min_by_key(|o| o.min_len).expect("non-empty")
        } else {
            weighted_pick(opts, |o| o.weight, rng)
        };
        match &choice.expansion {
            Expansion::Lexical => {
                let words = &index.emitters[category];
                let (w, _) = weighted_pick(words, |w| w.1, rng);
                out.push((w, category));
            }
            Expansion::Apply { functor, argument, functor_first } => {
                let (a, b) = if *functor_first { (functor, argument) } else { (argument, functor) };
                self.expand(index, a, depth + 1, rng, out);
                self.expand(index, b, depth + 1, rng, out);
            }
        }
    }

    /// Samples `n` sentences with word counts inside `length_range`
    /// (inclusive). Sentence `i` depends only on `(seed, i)`.
    pub fn sample(&self, n: usize, seed: u64, length_range: (usize, usize)) -> Result<Vec<Sentence>> {
        let index = Index::new(self);
        let (lo, hi) = length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("invalid length range {lo}..={hi}")));
        }
        let mut out = Vec::with_capacity(n);
        let mut buf = Vec::new();
        for i in 0..n {
            let mut rng = rng::substream(seed, "sample", i as u64, 0);
            let mut attempts = 0;
            loop {
                buf.clear();
                self.expand(&index, START, 0, &mut rng, &mut buf);
                if (lo..=hi).contains(&buf.len()) {
                    break;
                }
                attempts += 1;
                if attempts >= 100_000 {
                    return Err(Error::Config(format!("length range {lo}..={hi} is practically unreachable")));
                }
            }
            out.push(Sentence::from_pairs(buf.iter().copied())?);
        }
        Ok(out)
    }

    /// Expected number of occurrences of each lexical type per sentence
    /// under the unbounded sampling process, or `None` if it diverges.
    pub fn expected_tag_counts(&self) -> Option<BTreeMap<String, f64>> {
        let cats: Vec<&String> = self.expansions.keys().collect();
        let pos: BTreeMap<&str, usize> = cats.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let tpos: BTreeMap<&str, usize> = self.types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let nt = self.types.len();
        let mut e = vec![vec![0.0; nt]; cats.len()];
        for _ in 0..10_000 {
            let mut next = vec![vec![0.0; nt]; cats.len()];
            for (ci, c) in cats.iter().enumerate() {
                let opts = &self.expansions[*c];
                let z: f64 = opts.iter().map(|o| o.weight).sum();
                for o in opts {
                    let p = o.weight / z;
                    match &o.expansion {
                        Expansion::Lexical => next[ci][tpos[c.as_str()]] += p,
                        Expansion::Apply { functor, argument, .. } => {
                            for k in 0..nt {
                                next[ci][k] += p * (e[pos[functor.as_str()]][k] + e[pos[argument.as_str()]][k]);
                            }
                        }
                    }
                }
            }
            let delta: f64 = next.iter().flatten().zip(e.iter().flatten()).map(|(a, b)| (a - b).abs()).sum();
            e = next;
            if e.iter().flatten().any(|v| *v > 1e6) {
                return None;
            }
            if delta < 1e-13 {
                break;
            }
        }
        let s = &e[*pos.get(START)?];
        Some(self.types.iter().cloned().zip(s.iter().copied()).collect())
    }

    /// Types a word can carry.
    pub fn types_of(&self, word: &str) -> Option<&[(String, f64)]> {
        self.lexicon.iter().find(|e| e.word == word).map(|e| e.types.as_slice())
    }
}

/// CKY recognizer: does the tag sequence reduce to `s` by application?
pub fn derives(tags: &[String]) -> Result<bool> {
    let n = tags.len();
    if n == 0 {
        return Ok(false);
    }
    let cats: Vec<Category> = tags.iter().map(|t| Category::parse(t)).collect::<Result<_>>()?;
    let mut chart: Vec<Vec<BTreeSet<Category>>> = vec![vec![BTreeSet::new(); n + 1]; n + 1];
    for (i, c) in cats.into_iter().enumerate() {
        chart[i][i + 1].insert(c);
    }
    for width in 2..=n {
        for i in 0..=n - width {
            let j = i + width;
            let mut cell = BTreeSet::new();
            for k in i + 1..j {
                for l in &chart[i][k] {
                    for r in &chart[k][j] {
                        if let Category::Right(res, arg) = l {
                            if **arg == *r {
                                cell.insert((**res).clone());
                            }
                        }
                        if let Category::Left(arg, res) = r {
                            if **arg == *l {
                                cell.insert((**res).clone());
                            }
                        }
                    }
                }
            }
            chart[i][j] = cell;
        }
    }
    Ok(chart[0][n].contains(&Category::atom(START)))
}

/// Coarse part-of-speech-like label: result atom plus argument count.
pub fn coarse_label(tag: &str) -> Result<String> {
    let c = Category::parse(tag)?;
    let (head, arity) = c.head();
    Ok(format!("{}{}", head.to_uppercase(), arity))
}
