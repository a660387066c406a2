//! Documents, corpora, JSONL serialization and deduplication.

mod split;
mod synth;

pub use split::{load_splits, make_zero_shot_splits, save_splits, SplitError, ZeroShotSplit};
pub use synth::{generate_synthetic, SynthConfig, RVL_CDIP_CLASSES};

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use md5::{Digest, Md5};
use serde_json::{json, Value};
use thiserror::Error;

/// Axis-aligned token box in page units: `(x0, y0)` top-left, `(x1, y1)` bottom-right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_well_formed(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && 0.0 <= self.x0
            && self.x0 <= self.x1
            && 0.0 <= self.y0
            && self.y0 <= self.y1
    }

    pub fn centroid(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<String>,
    pub bboxes: Vec<BBox>,
    pub page_width: f64,
    pub page_height: f64,
    pub label: Option<String>,
}

impl Document {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.tokens.len() != self.bboxes.len() {
            return Err(CorpusError::BboxCount {
                id: self.id.clone(),
                tokens: self.tokens.len(),
                bboxes: self.bboxes.len(),
            });
        }
        if !(self.page_width > 0.0 && self.page_height > 0.0) {
            return Err(CorpusError::InvalidDocument {
                id: self.id.clone(),
                reason: format!("page size {}x{} must be positive", self.page_width, self.page_height),
            });
        }
        if let Some(i) = self.tokens.iter().position(|t| t.is_empty() || t.contains(SEPARATOR)) {
            return Err(CorpusError::InvalidDocument {
                id: self.id.clone(),
                reason: format!("token {i} is empty or contains the 0x1F separator"),
            });
        }
        if let Some(i) = self.bboxes.iter().position(|b| !b.is_well_formed()) {
            return Err(CorpusError::InvalidDocument {
                id: self.id.clone(),
                reason: format!("bbox {i} violates 0 <= x0 <= x1, 0 <= y0 <= y1"),
            });
        }
        Ok(())
    }

    fn to_json(&self) -> Value {
        json!({
            "id": self.id,
            "tokens": self.tokens,
            "bboxes": self.bboxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect::<Vec<_>>(),
            "width": self.page_width,
            "height": self.page_height,
            "label": self.label,
        })
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: field `{field}`: {reason}")]
    Malformed {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("bbox count mismatch, id={id}: {tokens} tokens, {bboxes} bboxes")]
    BboxCount { id: String, tokens: usize, bboxes: usize },
    #[error("invalid document id={id}: {reason}")]
    InvalidDocument { id: String, reason: String },
    #[error("document id={id} has label {label:?} not in the corpus class list")]
    UnknownLabel { id: String, label: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    /// Sorted, distinct class names.
    pub class_names: Vec<String>,
}

impl Corpus {
    /// Wraps documents, deriving `class_names` as the sorted distinct labels.
    pub fn new(documents: Vec<Document>) -> Self {
        let class_names = documents
            .iter()
            .filter_map(|d| d.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self { documents, class_names }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Id → document lookup table.
    pub fn index(&self) -> std::collections::HashMap<&str, &Document> {
        self.documents.iter().map(|d| (d.id.as_str(), d)).collect()
    }

    /// Copy of the corpus with every label removed.
    pub fn unlabeled(&self) -> Corpus {
        let documents = self
            .documents
            .iter()
            .map(|d| Document {
                label: None,
                ..d.clone()
            })
            .collect();
        Corpus {
            documents,
            class_names: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for d in &self.documents {
            d.validate()?;
            if let Some(l) = &d.label {
                if self.class_names.binary_search(l).is_err() {
                    return Err(CorpusError::UnknownLabel {
                        id: d.id.clone(),
                        label: l.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path)?);
        for d in &self.documents {
            writeln!(w, "{}", d.to_json())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Corpus, CorpusError> {
        let reader = BufReader::new(File::open(path)?);
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            docs.push(parse_record(&line, i + 1)?);
        }
        Ok(Corpus::new(docs))
    }
}

fn parse_record(line: &str, lineno: usize) -> Result<Document, CorpusError> {
    let bad = |field: &'static str, reason: String| CorpusError::Malformed {
        line: lineno,
        field,
        reason,
    };
    let v: Value = serde_json::from_str(line).map_err(|e| bad("<record>", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| bad("<record>", "expected a JSON object".into()))?;
    let field = |name: &'static str| obj.get(name).ok_or_else(|| bad(name, "missing".into()));

    let id = field("id")?
        .as_str()
        .ok_or_else(|| bad("id", "expected string".into()))?
        .to_string();
    let tokens = field("tokens")?
        .as_array()
        .ok_or_else(|| bad("tokens", "expected array of strings".into()))?
        .iter()
        .map(|t| t.as_str().map(str::to_string))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("tokens", "expected array of strings".into()))?;
    let bboxes = field("bboxes")?
        .as_array()
        .ok_or_else(|| bad("bboxes", "expected array of [x0,y0,x1,y1]".into()))?
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let nums = b
                .as_array()
                .filter(|a| a.len() == 4)
                .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                .ok_or_else(|| bad("bboxes", format!("entry {i} is not four numbers")))?;
            Ok(BBox::new(nums[0], nums[1], nums[2], nums[3]))
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    let num = |name: &'static str| -> Result<f64, CorpusError> {
        field(name)?.as_f64().ok_or_else(|| bad(name, "expected number".into()))
    };
    let page_width = num("width")?;
    let page_height = num("height")?;
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(bad("label", "expected string or null".into())),
    };
    let doc = Document {
        id,
        tokens,
        bboxes,
        page_width,
        page_height,
        label,
    };
    doc.validate()?;
    Ok(doc)
}

const SEPARATOR: char = '\u{1f}';

/// MD5 over the token sequence joined by the 0x1F separator byte.
pub fn content_hash(doc: &Document) -> [u8; 16] {
    let mut h = Md5::new();
    for (i, t) in doc.tokens.iter().enumerate() {
        if i > 0 {
            h.update([SEPARATOR as u8]);
        }
        h.update(t.as_bytes());
    }
    h.finalize().into()
}

/// Drops documents whose token content repeats an earlier document's.
/// Ids and bboxes are ignored; first occurrences keep their order.
pub fn dedup(corpus: &Corpus) -> Corpus {
    let mut seen = HashSet::new();
    let documents: Vec<Document> = corpus
        .documents
        .iter()
        .filter(|d| seen.insert(content_hash(d)))
        .cloned()
        .collect();
    Corpus {
        documents,
        class_names: corpus.class_names.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn doc(id: &str, tokens: &[&str]) -> Document {
        Document {
            id: id.into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            bboxes: (0..tokens.len())
                .map(|i| BBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0))
                .collect(),
            page_width: 100.0,
            page_height: 100.0,
            label: None,
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_two_valid_lines() {
        let f = write_lines(&[
            r#"{"id":"a","tokens":["x"],"bboxes":[[0,0,1,1]],"width":10,"height":10,"label":"memo"}"#,
            r#"{"id":"b","tokens":[],"bboxes":[],"width":10,"height":10,"label":null}"#,
        ]);
        let c = Corpus::load_jsonl(f.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.documents[0].label.as_deref(), Some("memo"));
        assert_eq!(c.class_names, vec!["memo".to_string()]);
    }

    #[test]
    fn bbox_count_mismatch_names_document() {
        let f = write_lines(&[
            r#"{"id":"d7","tokens":["a","b","c"],"bboxes":[[0,0,1,1],[0,0,1,1]],"width":10,"height":10,"label":null}"#,
        ]);
        let err = Corpus::load_jsonl(f.path()).unwrap_err().to_string();
        assert!(err.contains("bbox count mismatch, id=d7"), "{err}");
    }

    #[test]
    fn malformed_line_names_line_and_field() {
        let f = write_lines(&[
            r#"{"id":"a","tokens":["x"],"bboxes":[[0,0,1,1]],"width":10,"height":10,"label":null}"#,
            r#"{"id":"b","tokens":["x"],"bboxes":[[0,0,1,1]],"width":"wide","height":10,"label":null}"#,
        ]);
        let err = Corpus::load_jsonl(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("width"), "{err}");

        let f = write_lines(&[r#"{"id":"a","bboxes":[],"width":1,"height":1}"#]);
        let err = Corpus::load_jsonl(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("tokens"), "{err}");
    }

    #[test]
    fn inverted_box_is_rejected() {
        let mut d = doc("z", &["a"]);
        d.bboxes[0] = BBox::new(5.0, 0.0, 4.0, 1.0);
        assert!(d.validate().is_err());
    }

    #[test]
    fn dedup_keeps_first_of_identical_tokens() {
        let mut b = doc("b", &["x", "y"]);
        b.bboxes[0].x0 = 0.5;
        let c = Corpus::new(vec![doc("a", &["x", "y"]), b]);
        let d = dedup(&c);
        assert_eq!(d.documents.len(), 1);
        assert_eq!(d.documents[0].id, "a");
    }

    #[test]
    fn dedup_aba() {
        let c = Corpus::new(vec![doc("1", &["a"]), doc("2", &["b"]), doc("3", &["a"])]);
        let ids: Vec<_> = dedup(&c).documents.into_iter().map(|d| d.id).collect();
        assert_eq!(ids, ["1", "2"]);
    }

    #[test]
    fn separator_prevents_join_collisions() {
        assert_ne!(
            content_hash(&doc("a", &["ab", "c"])),
            content_hash(&doc("b", &["a", "bc"]))
        );
    }

    #[test]
    fn empty_and_separator_tokens_are_rejected() {
        assert!(doc("e", &["a", ""]).validate().is_err());
        assert!(doc("s", &["a\u{1f}b"]).validate().is_err());
    }

    #[test]
    fn no_duplicates_is_identity() {
        let c = Corpus::new(vec![doc("1", &["a"]), doc("2", &["b"])]);
        assert_eq!(dedup(&c), c);
    }
}
