//! Zero-shot class splits: disjoint train / validation / test class sets.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Corpus;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("split arity: {0}")]
    Arity(String),
    #[error("split invariant violated: {0}")]
    Invariant(String),
    #[error("split file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotSplit {
    pub name: String,
    pub train_classes: Vec<String>,
    pub val_classes: Vec<String>,
    pub test_classes: Vec<String>,
    #[serde(rename = "train_ids")]
    pub train_docs: Vec<String>,
    #[serde(rename = "val_ids")]
    pub val_docs: Vec<String>,
    #[serde(rename = "test_ids")]
    pub test_docs: Vec<String>,
}

impl ZeroShotSplit {
    /// Checks pairwise class disjointness and, given a corpus, that every
    /// listed document carries a label from its partition.
    pub fn validate(&self, corpus: Option<&Corpus>) -> Result<(), SplitError> {
        let parts = [
            ("train", &self.train_classes),
            ("val", &self.val_classes),
            ("test", &self.test_classes),
        ];
        for (i, (na, a)) in parts.iter().enumerate() {
            for (nb, b) in &parts[i + 1..] {
                if let Some(c) = a.iter().find(|c| b.contains(c)) {
                    return Err(SplitError::Invariant(format!(
                        "split {}: class {c:?} in both {na} and {nb}",
                        self.name
                    )));
                }
            }
        }
        if let Some(corpus) = corpus {
            let index = corpus.index();
            for (part, classes, ids) in [
                ("train", &self.train_classes, &self.train_docs),
                ("val", &self.val_classes, &self.val_docs),
                ("test", &self.test_classes, &self.test_docs),
            ] {
                for id in ids {
                    let doc = index.get(id.as_str()).ok_or_else(|| {
                        SplitError::Invariant(format!("split {}: unknown {part} doc {id}", self.name))
                    })?;
                    if !doc.label.as_ref().is_some_and(|l| classes.contains(l)) {
                        return Err(SplitError::Invariant(format!(
                            "split {}: {part} doc {id} has label {:?} outside the {part} classes",
                            self.name, doc.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds `n_splits` splits by rotating `class_names` in steps of `n_test`.
///
/// Each split reads the rotated order as `n_train` training classes, then
/// `n_val` validation classes, then `n_test` test classes. Even rotations come
/// first, then odd ones; for 16 classes in four 8/4/4 splits this reproduces
/// the standard RVL-CDIP zero-shot splits I–IV. Documents join the partition
/// holding their label; unlabeled documents and documents of classes outside
/// every partition are dropped.
pub fn make_zero_shot_splits(
    class_names: &[String],
    n_splits: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    corpus: &Corpus,
) -> Result<Vec<ZeroShotSplit>, SplitError> {
    let n = class_names.len();
    if n_train + n_val + n_test != n {
        return Err(SplitError::Arity(format!(
            "{n_train} + {n_val} + {n_test} != {n} classes"
        )));
    }
    if n_splits == 0 || n_test == 0 || n_splits * n_test > n {
        return Err(SplitError::Arity(format!(
            "{n_splits} splits x {n_test} test classes cannot be disjoint over {n} classes"
        )));
    }
    if class_names.iter().collect::<HashSet<_>>().len() != n {
        return Err(SplitError::Arity("class names must be distinct".into()));
    }
    let rotations = (0..n_splits).step_by(2).chain((1..n_splits).step_by(2));
    let mut splits = Vec::with_capacity(n_splits);
    for (k, r) in rotations.enumerate() {
        let order: Vec<&String> = (0..n).map(|i| &class_names[(i + r * n_test) % n]).collect();
        let take = |range: std::ops::Range<usize>| order[range].iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let train_classes = take(0..n_train);
        let val_classes = take(n_train..n_train + n_val);
        let test_classes = take(n_train + n_val..n);
        let ids_for = |classes: &[String]| {
            corpus
                .documents
                .iter()
                .filter(|d| d.label.as_ref().is_some_and(|l| classes.contains(l)))
                .map(|d| d.id.clone())
                .collect::<Vec<_>>()
        };
        splits.push(ZeroShotSplit {
            name: roman(k + 1),
            train_docs: ids_for(&train_classes),
            val_docs: ids_for(&val_classes),
            test_docs: ids_for(&test_classes),
            train_classes,
            val_classes,
            test_classes,
        });
    }
    Ok(splits)
}

fn roman(mut n: usize) -> String {
    const TABLE: [(usize, &str); 13] = [
        (1000, "M"),
        (900, "CM"),
        (500, "D"),
        (400, "CD"),
        (100, "C"),
        (90, "XC"),
        (50, "L"),
        (40, "XL"),
        (10, "X"),
        (9, "IX"),
        (5, "V"),
        (4, "IV"),
        (1, "I"),
    ];
    let mut s = String::new();
    for (v, sym) in TABLE {
        while n >= v {
            s.push_str(sym);
            n -= v;
        }
    }
    s
}

/// Writes one JSON object per split, one per line.
pub fn save_splits(splits: &[ZeroShotSplit], path: &Path) -> Result<(), SplitError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in splits {
        let line = serde_json::to_string(s).map_err(|e| SplitError::Invariant(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<Vec<ZeroShotSplit>, SplitError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ZeroShotSplit = serde_json::from_str(&line).map_err(|e| SplitError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::RVL_CDIP_CLASSES;
    use super::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rvl_cdip_rotation_matches_reference_table() {
        let classes = names(&RVL_CDIP_CLASSES);
        let splits = make_zero_shot_splits(&classes, 4, 8, 4, 4, &Corpus::default()).unwrap();
        let expect_test = [
            ["presentation", "questionnaire", "resume", "memo"],
            [
                "advertisement",
                "scientific report",
                "scientific publication",
                "specification",
            ],
            ["letter", "form", "email", "handwritten"],
            ["file folder", "news article", "budget", "invoice"],
        ];
        let expect_val = [
            ["file folder", "news article", "budget", "invoice"],
            ["letter", "form", "email", "handwritten"],
            ["presentation", "questionnaire", "resume", "memo"],
            [
                "advertisement",
                "scientific report",
                "scientific publication",
                "specification",
            ],
        ];
        for (k, s) in splits.iter().enumerate() {
            assert_eq!(s.test_classes, names(&expect_test[k]), "split {}", s.name);
            assert_eq!(s.val_classes, names(&expect_val[k]), "split {}", s.name);
        }
        assert_eq!(
            splits.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
            ["I", "II", "III", "IV"]
        );
        assert_eq!(
            splits[1].train_classes,
            names(&[
                "file folder",
                "news article",
                "budget",
                "invoice",
                "presentation",
                "questionnaire",
                "resume",
                "memo"
            ])
        );
    }

    #[test]
    fn minimal_single_split() {
        let classes = names(&["a", "b", "c", "d"]);
        let s = make_zero_shot_splits(&classes, 1, 2, 1, 1, &Corpus::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].train_classes, names(&["a", "b"]));
        assert_eq!(s[0].val_classes, names(&["c"]));
        assert_eq!(s[0].test_classes, names(&["d"]));
    }

    #[test]
    fn arity_errors() {
        let classes = names(&["a", "b", "c", "d"]);
        assert!(make_zero_shot_splits(&classes, 1, 2, 1, 2, &Corpus::default()).is_err());
        assert!(make_zero_shot_splits(&classes, 5, 2, 1, 1, &Corpus::default()).is_err());
    }

    #[test]
    fn overlap_is_reported() {
        let s = ZeroShotSplit {
            name: "x".into(),
            train_classes: names(&["a", "b"]),
            val_classes: names(&["b"]),
            test_classes: names(&["c"]),
            train_docs: vec![],
            val_docs: vec![],
            test_docs: vec![],
        };
        let err = s.validate(None).unwrap_err().to_string();
        assert!(err.contains("split invariant violated"), "{err}");
    }

    #[test]
    fn roman_numerals() {
        assert_eq!(roman(4), "IV");
        assert_eq!(roman(9), "IX");
        assert_eq!(roman(14), "XIV");
    }
}
