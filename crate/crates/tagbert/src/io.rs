//! Corpus, vocabulary and task-data file formats.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use tagbert_core::corpus::Sentence;

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Jsonl,
    Tsv,
}

/// A rejected record: the 1-based line where it starts and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub sentences: Vec<Sentence>,
    pub rejected: Vec<Diagnostic>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    words: Vec<String>,
    tags: Vec<String>,
}

/// Reads sentences in input order; malformed records are skipped and
/// reported. Read errors and invalid UTF-8 abort.
pub fn ingest(reader: impl BufRead, format: Format) -> Result<Ingested> {
    match format {
        Format::Jsonl => ingest_jsonl(reader),
        Format::Tsv => ingest_columns(reader, '\t'),
    }
}

fn ingest_jsonl(reader: impl BufRead) -> Result<Ingested> {
    let mut out = Ingested::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str::<JsonRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| Sentence::new(r.words, r.tags).map_err(|e| e.to_string()));
        match record {
            Ok(s) => out.sentences.push(s),
            Err(message) => out.rejected.push(Diagnostic { line: i + 1, message }),
        }
    }
    Ok(out)
}

/// Two-column `word SEP label` lines with blank lines between sentences.
fn ingest_columns(reader: impl BufRead, sep: char) -> Result<Ingested> {
    let mut out = Ingested::default();
    let mut words = Vec::new();
    let mut tags = Vec::new();
    let mut start = 0;
    let mut bad: Option<String> = None;
    let flush = |words: &mut Vec<String>, tags: &mut Vec<String>, start: usize, bad: &mut Option<String>, out: &mut Ingested| {
        if let Some(message) = bad.take() {
            out.rejected.push(Diagnostic { line: start, message });
        } else if !words.is_empty() {
            match Sentence::new(std::mem::take(words), std::mem::take(tags)) {
                Ok(s) => out.sentences.push(s),
                Err(e) => out.rejected.push(Diagnostic { line: start, message: e.to_string() }),
            }
        }
        words.clear();
        tags.clear();
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            flush(&mut words, &mut tags, start, &mut bad, &mut out);
            continue;
        }
        if words.is_empty() && bad.is_none() {
            start = i + 1;
        }
        match line.split_once(sep) {
            Some((w, t)) if !w.is_empty() && !t.is_empty() && !t.contains(sep) => {
                words.push(w.to_string());
                tags.push(t.to_string());
            }
            _ => {
                bad.get_or_insert_with(|| format!("line {} is not two {:?}-separated columns", i + 1, sep));
            }
        }
    }
    flush(&mut words, &mut tags, start, &mut bad, &mut out);
    Ok(out)
}

/// CoNLL-style task data: `word TAB label`, blank line between sentences.
pub fn read_conll(reader: impl BufRead) -> Result<Ingested> {
    ingest_columns(reader, '\t')
}

pub fn emit(mut writer: impl Write, sentences: &[Sentence], format: Format) -> Result<()> {
    for s in sentences {
        match format {
            Format::Jsonl => {
                let rec = JsonRecord { words: s.words().to_vec(), tags: s.tags().to_vec() };
                serde_json::to_writer(&mut writer, &rec)?;
                writeln!(writer)?;
            }
            Format::Tsv => {
                for (w, t) in s.words().iter().zip(s.tags()) {
                    writeln!(writer, "{w}\t{t}")?;
                }
                writeln!(writer)?;
            }
        }
    }
    writer.flush()?;
    Ok(())
}

/// One normalized key per line; blank lines are ignored.
pub fn read_exclusion(reader: impl BufRead) -> Result<BTreeSet<String>> {
    let mut keys = BTreeSet::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            keys.insert(line);
        }
    }
    Ok(keys)
}

pub fn write_exclusion<'a>(mut writer: impl Write, keys: impl IntoIterator<Item = &'a String>) -> Result<()> {
    for k in keys {
        writeln!(writer, "{k}")?;
    }
    writer.flush()?;
    Ok(())
}
