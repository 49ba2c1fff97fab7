//! Append-only JSON-lines metric streams.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::Result;

pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JsonLines { out: BufWriter::new(f) })
    }

    /// Writes one record; non-finite floats become `null`.
    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Keeps the first `lines` complete lines of a JSON-lines file, used when
/// resuming so the stream continues exactly where the checkpoint left off.
pub fn truncate_lines(path: &Path, lines: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let kept: String = text.split_inclusive('\n').take(lines).collect();
    std::fs::write(path, kept)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = JsonLines::append(&p).unwrap();
        for i in 0..3 {
            w.write(&serde_json::json!({ "step": i, "loss": f64::NAN })).unwrap();
        }
        w.flush().unwrap();
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"loss":null,"step":0}"#);
        truncate_lines(&p, 2).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    }
}
