use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassSet, DialogueInstance, SoftLabel, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_id: Option<String>,
    history: Vec<Utterance>,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label_distribution: Option<Vec<f64>>,
}

/// Reads one dataset segment, validating every line against `classes`.
pub fn load_jsonl_dataset(path: &Path, classes: &ClassSet) -> Result<Vec<DialogueInstance>> {
    let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    parse_jsonl(BufReader::new(file), path, classes)
}

pub fn parse_jsonl(reader: impl BufRead, path: &Path, classes: &ClassSet) -> Result<Vec<DialogueInstance>> {
    let mut instances = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(format!("malformed JSON: {e}")))?;
        let label = record
            .label_distribution
            .map(|probs| SoftLabel::new(probs, classes.len()))
            .transpose()
            .map_err(|e| parse_err(e.to_string()))?;
        let instance = DialogueInstance {
            id: record.id,
            source_id: record.source_id,
            history: record.history,
            target: record.target,
            label,
        };
        instance.validate().map_err(|e| parse_err(e.to_string()))?;
        instances.push(instance);
    }
    Ok(instances)
}

pub fn write_jsonl(path: &Path, instances: &[DialogueInstance]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    for instance in instances {
        let record = Record {
            id: instance.id.clone(),
            source_id: instance.source_id.clone(),
            history: instance.history.clone(),
            target: instance.target.clone(),
            label_distribution: instance.label.as_ref().map(|l| l.probs().to_vec()),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Declares the class set once for a directory of segment files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    /// Segment name to file name, relative to the manifest's directory.
    #[serde(default)]
    pub segments: BTreeMap<String, String>,
}

impl Manifest {
    pub fn class_set(&self) -> Result<ClassSet> {
        ClassSet::new(self.classes.iter().cloned())
    }

    pub fn segment_path(&self, manifest_path: &Path, segment: &str) -> Option<PathBuf> {
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.segments.get(segment).map(|file| dir.join(file))
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.class_set()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> ClassSet {
        ClassSet::new(["B", "PB", "NB"]).unwrap()
    }

    fn parse(text: &str) -> Result<Vec<DialogueInstance>> {
        parse_jsonl(text.as_bytes(), Path::new("mem.jsonl"), &classes())
    }

    const LINE_A: &str = r#"{"id":"a","history":[{"speaker":"U","text":"hi there"}],"target":"hello","label_distribution":[0.6,0.3,0.1]}"#;
    const LINE_B: &str = r#"{"id":"b","history":[{"speaker":"S","text":"how are you"}],"target":"fine"}"#;

    #[test]
    fn two_lines_two_instances() {
        let got = parse(&format!("{LINE_A}\n{LINE_B}\n")).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].label.as_ref().unwrap().probs(), &[0.6, 0.3, 0.1]);
        assert!(got[1].label.is_none());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse(&format!("{LINE_A}\n{{not json\n")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_labels_rejected() {
        let over =
            r#"{"id":"a","history":[{"speaker":"U","text":"x"}],"target":"y","label_distribution":[0.6,0.3,0.3]}"#;
        let err = parse(over).unwrap_err().to_string();
        assert!(err.contains("label sum 1.2 exceeds tolerance"), "{err}");
        let short = r#"{"id":"a","history":[{"speaker":"U","text":"x"}],"target":"y","label_distribution":[0.5,0.5]}"#;
        assert!(parse(short).is_err());
    }

    #[test]
    fn empty_history_or_target_rejected() {
        assert!(parse(r#"{"id":"a","history":[],"target":"y"}"#).is_err());
        assert!(parse(r#"{"id":"a","history":[{"speaker":"U","text":"x"}],"target":""}"#).is_err());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.jsonl");
        let mut original = parse(&format!("{LINE_A}\n{LINE_B}\n")).unwrap();
        original[1].source_id = Some("a".into());
        write_jsonl(&path, &original).unwrap();
        let back = load_jsonl_dataset(&path, &classes()).unwrap();
        assert_eq!(back, original);
    }

    #[test]
    fn manifest_resolves_segments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut manifest = Manifest {
            classes: vec!["B".into(), "PB".into(), "NB".into()],
            segments: BTreeMap::new(),
        };
        manifest.segments.insert("dev".into(), "dev.jsonl".into());
        write_manifest(&path, &manifest).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.segment_path(&path, "dev").unwrap(), dir.path().join("dev.jsonl"));
        assert!(back.segment_path(&path, "test").is_none());
    }
}
