//! Figure/caption records and the line-delimited JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// One figure/caption pair with optional knowledge annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lemmas: Option<Vec<String>>,
    /// Zero or more concept ids per token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<Vec<Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Precomputed visual feature that can replace the vision branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_feature: Option<Vec<f32>>,
}

impl CorpusRecord {
    /// Checks the per-record invariants: non-empty tokens and annotation
    /// lists aligned one-to-one with them.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Validation(format!("record {}: empty token list", self.id)));
        }
        if let Some(lemmas) = &self.lemmas {
            if lemmas.len() != self.tokens.len() {
                return Err(Error::Validation(format!(
                    "record {}: {} tokens but {} lemmas",
                    self.id,
                    self.tokens.len(),
                    lemmas.len()
                )));
            }
        }
        if let Some(concepts) = &self.concepts {
            if concepts.len() != self.tokens.len() {
                return Err(Error::Validation(format!(
                    "record {}: {} tokens but {} concept lists",
                    self.id,
                    self.tokens.len(),
                    concepts.len()
                )));
            }
        }
        if let Some(f) = &self.visual_feature {
            if f.is_empty() || f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "record {}: visual feature must be a non-empty finite vector",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Lowercases `text` and splits it into maximal runs of alphanumeric
/// characters; whitespace and punctuation separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Loads a manifest with one JSON record per line. Blank lines are skipped;
/// relative image paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let records = parse_manifest(&text, path, base)?;
    if records.is_empty() {
        log::warn!("manifest {} contains no records", path.display());
    }
    Ok(records)
}

pub(crate) fn parse_manifest(text: &str, path: &Path, base: &Path) -> Result<Vec<CorpusRecord>> {
    let mut records: Vec<CorpusRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut record: CorpusRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        record.validate()?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::Validation(format!("duplicate record id {}", record.id)));
        }
        if record.image_path.is_relative() {
            record.image_path = base.join(&record.image_path);
        }
        records.push(record);
    }
    validate_feature_dims(&records)?;
    Ok(records)
}

fn validate_feature_dims(records: &[CorpusRecord]) -> Result<()> {
    let mut dim = None;
    for r in records {
        if let Some(f) = &r.visual_feature {
            match dim {
                None => dim = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(Error::Validation(format!(
                        "record {}: visual feature has {} values, expected {d}",
                        r.id,
                        f.len()
                    )))
                }
                _ => {}
            }
        }
    }
    Ok(())
}

/// Writes records as a manifest, one JSON object per line.
pub fn write_manifest(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<CorpusRecord>> {
        parse_manifest(text, Path::new("m.jsonl"), Path::new("/data"))
    }

    #[test]
    fn two_well_formed_lines() {
        let text = r#"{"id":"a","image_path":"a.png","tokens":["x","y"]}
{"id":"b","image_path":"/abs/b.png","tokens":["z"],"label":"bio"}
"#;
        let records = parse(text).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].image_path, PathBuf::from("/data/a.png"));
        assert_eq!(records[1].image_path, PathBuf::from("/abs/b.png"));
        assert_eq!(records[1].label.as_deref(), Some("bio"));
    }

    #[test]
    fn misaligned_lemmas_name_the_record() {
        let text = r#"{"id":"r7","image_path":"a.png","tokens":["a","b","c","d","e"],"lemmas":["a","b","c","d"]}"#;
        match parse(text) {
            Err(Error::Validation(msg)) => assert!(msg.contains("r7"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"image_path\":\"a.png\",\"tokens\":[\"x\"]}\n\n{not json\n";
        match parse(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = r#"{"id":"a","image_path":"a.png","tokens":["x"]}
{"id":"a","image_path":"b.png","tokens":["y"]}"#;
        assert!(matches!(parse(text), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![CorpusRecord {
            id: "a".into(),
            image_path: dir.path().join("a.png"),
            tokens: vec!["made".into()],
            lemmas: Some(vec!["make".into()]),
            concepts: Some(vec![vec!["c1".into(), "c2".into()]]),
            label: None,
            visual_feature: Some(vec![0.5, 0.25]),
        }];
        write_manifest(&path, &records).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), records);
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("A Red-circle, (left)."), ["a", "red", "circle", "left"]);
        assert!(tokenize("  ...  ").is_empty());
    }
}
