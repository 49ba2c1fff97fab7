//! Token-classification metrics.

use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Word-level exact-match accuracy over a dataset of label sequences.
pub fn accuracy<T: PartialEq>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<f64> {
    check_lengths(pred, gold)?;
    let total: usize = gold.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Empty("accuracy over no labels"));
    }
    let hits: usize = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count())
        .sum();
    Ok(hits as f64 / total as f64)
}

fn check_lengths<T>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Shape { op: "metric", left: alloc::vec![pred.len()], right: alloc::vec![gold.len()] });
    }
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::Shape { op: "metric", left: alloc::vec![p.len()], right: alloc::vec![g.len()] });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Iob<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn parse_iob(label: &str) -> Result<Iob<'_>> {
    if label == "O" {
        return Ok(Iob::Outside);
    }
    let (prefix, kind) = match label.split_once('-') {
        Some(p) => p,
        None => return Err(Error::MalformedLabel(label.into())),
    };
    if kind.is_empty() {
        return Err(Error::MalformedLabel(label.into()));
    }
    match prefix {
        "B" => Ok(Iob::Begin(kind)),
        "I" => Ok(Iob::Inside(kind)),
        _ => Err(Error::MalformedLabel(label.into())),
    }
}

/// A labeled span covering words `start..end`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Span {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Extracts spans with the lenient CoNLL reading: `I-X` that does not
/// continue an `X` span opens a new one.
pub fn spans<S: AsRef<str>>(labels: &[S]) -> Result<Vec<Span>> {
    let mut out = Vec::new();
    let mut open: Option<(&str, usize)> = None;
    for (i, l) in labels.iter().enumerate() {
        let tag = parse_iob(l.as_ref())?;
        let continues = matches!((tag, open), (Iob::Inside(k), Some((o, _))) if k == o);
        if continues {
            continue;
        }
        if let Some((kind, start)) = open.take() {
            out.push(Span { kind: kind.into(), start, end: i });
        }
        if let Iob::Begin(k) | Iob::Inside(k) = tag {
            open = Some((k, i));
        }
    }
    if let Some((kind, start)) = open {
        out.push(Span { kind: kind.into(), start, end: labels.len() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanScores {
    pub fn from_counts(true_positives: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |n: usize, d: usize| match d {
            0 if predicted == gold => 1.0,
            0 => 0.0,
            _ => n as f64 / d as f64,
        };
        let precision = ratio(true_positives, predicted);
        let recall = ratio(true_positives, gold);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        SpanScores { precision, recall, f1, true_positives, predicted, gold }
    }
}

/// Micro-averaged exact span precision, recall and F1, as fractions.
/// A dataset with no spans on either side scores 1.
pub fn span_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<SpanScores> {
    check_lengths(pred, gold)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let ps = spans(p)?;
        let gs = spans(g)?;
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        np += ps.len();
        ng += gs.len();
    }
    Ok(SpanScores::from_counts(tp, np, ng))
}

/// Checks that every label is well-formed IOB.
pub fn validate_iob<S: AsRef<str>>(labels: &[S]) -> Result<()> {
    labels.iter().try_for_each(|l| parse_iob(l.as_ref()).map(|_| ()))
}
