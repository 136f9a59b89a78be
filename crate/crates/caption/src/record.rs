//! Caption records and their JSON Lines store.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CaptionError, Result};
use crate::knowledge::ExpertKnowledgeEntry;
use crate::template::{build_prompt, prompt_hash, CotTemplate};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CaptionRecord {
    pub image_id: String,
    pub species_label: String,
    pub caption: String,
    pub prompt_hash: String,
    pub model_id: String,
    /// UTC seconds.
    pub timestamp: u64,
}

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(CaptionError::Invalid(format!("{}: empty caption", self.image_id)));
        }
        if self.prompt_hash.len() != 64 || !self.prompt_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(CaptionError::Invalid(format!("{}: prompt hash is not a SHA-256 hex digest", self.image_id)));
        }
        Ok(())
    }

    /// Re-renders the prompt and compares digests. See
    /// [`CaptionMode::image_context`](crate::batch::CaptionMode::image_context).
    pub fn verify_prompt(&self, entry: &ExpertKnowledgeEntry, template: &CotTemplate, image_context: &str) -> Result<bool> {
        Ok(prompt_hash(&build_prompt(entry, template, image_context)?) == self.prompt_hash)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

fn line_error(path: &Path, line: usize, message: impl Into<String>) -> CaptionError {
    CaptionError::Line {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_line(line: &str, origin: &Path, number: usize) -> Result<Option<CaptionRecord>> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.trim().is_empty() {
        return Ok(None);
    }
    let rec: CaptionRecord = serde_json::from_str(line).map_err(|e| line_error(origin, number, e.to_string()))?;
    rec.validate().map_err(|e| line_error(origin, number, e.to_string()))?;
    Ok(Some(rec))
}

/// Parses JSON Lines text; blank lines are skipped. `origin` names the
/// source in errors.
pub fn parse_jsonl(text: &str, origin: &Path) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        out.extend(parse_line(line, origin, i + 1)?);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CaptionRecord>> {
    let bytes = std::fs::read(path)?;
    let mut out = Vec::new();
    for (i, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line = std::str::from_utf8(raw).map_err(|e| line_error(path, i + 1, format!("invalid UTF-8: {e}")))?;
        out.extend(parse_line(line, path, i + 1)?);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[CaptionRecord]) -> String {
    records.iter().map(|r| r.to_json_line() + "\n").collect()
}

pub fn write_jsonl(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    for r in records {
        r.validate()?;
    }
    std::fs::write(path, to_jsonl(records))?;
    Ok(())
}

/// Appending single writer.
pub struct CaptionWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl CaptionWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            file: std::fs::File::create(path)?,
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            file: std::fs::OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn write(&mut self, record: &CaptionRecord) -> Result<()> {
        record.validate()?;
        writeln!(self.file, "{}", record.to_json_line())?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(i: usize) -> CaptionRecord {
        CaptionRecord {
            image_id: format!("img_{i}.png"),
            species_label: "aphid".into(),
            caption: format!("A green aphid, view {i} \u{2014} \"quoted\""),
            prompt_hash: prompt_hash(&i.to_string()),
            model_id: "stub".into(),
            timestamp: 1_700_000_000 + i as u64,
        }
    }

    #[test]
    fn field_names() {
        let v: serde_json::Value = serde_json::from_str(&record(0).to_json_line()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        assert_eq!(keys.len(), 6);
        for k in ["imageId", "speciesLabel", "caption", "promptHash", "modelId", "timestamp"] {
            assert!(keys.contains(&k), "{k}");
        }
    }

    #[test]
    fn round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let recs: Vec<_> = (0..3).map(record).collect();
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), recs);
        std::fs::write(&p, "").unwrap();
        assert!(read_jsonl(&p).unwrap().is_empty());
    }

    #[test]
    fn corrupted_line_is_cited() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut lines: Vec<String> = (0..10).map(|i| record(i).to_json_line()).collect();
        lines[6] = lines[6][..20].to_string();
        std::fs::write(&p, lines.join("\n")).unwrap();
        match read_jsonl(&p).unwrap_err() {
            CaptionError::Line { line, .. } => assert_eq!(line, 7),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn rejects_empty_caption_and_extra_fields() {
        let mut r = record(1);
        r.caption = " ".into();
        assert!(parse_jsonl(&r.to_json_line(), Path::new("x")).is_err());
        let extra = record(1).to_json_line().replacen('{', "{\"x\":1,", 1);
        assert!(parse_jsonl(&extra, Path::new("x")).is_err());
    }

    #[test]
    fn writer_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut w = CaptionWriter::create(&p).unwrap();
        w.write(&record(0)).unwrap();
        drop(w);
        CaptionWriter::append(&p).unwrap().write(&record(1)).unwrap();
        assert_eq!(read_jsonl(&p).unwrap(), vec![record(0), record(1)]);
    }
}
