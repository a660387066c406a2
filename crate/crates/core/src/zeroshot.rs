//! Matching inference and macro-F1 evaluation under the unsupervised and
//! supervised zero-shot protocols.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document, ZeroShotSplit};
use crate::encoders::{EncoderError, ModelParams, Pooling};
use crate::numerics::{dot, NumericsError, Tensor};
use crate::tokenizer::{encode, encode_label_text, Vocab};
use crate::training::{finetune, FinetuneOutcome, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ZeroShotError {
    #[error("label set is empty")]
    EmptyLabels,
    #[error("no documents to evaluate")]
    NoDocuments,
    #[error("document `{doc}` has label {label:?}, not among the evaluated classes")]
    UnknownLabel { doc: String, label: Option<String> },
    #[error("checkpoint pairing mismatch: documents from lineage `{doc}`, labels from `{label}`")]
    Pairing { doc: String, label: String },
    #[error("document id `{0}` not found in corpus")]
    MissingDocument(String),
    #[error("document vector has {doc} dims, label vectors have {label}")]
    DimMismatch { doc: usize, label: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Class names with their label-encoder vectors, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub names: Vec<String>,
    pub vectors: Tensor,
    pub pooling: Pooling,
    pub lineage: Option<String>,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Projection is used only when both encoders have trained projections.
pub fn pooling_for(doc_params: &ModelParams, label_params: &ModelParams) -> Pooling {
    if doc_params.projection_trained && label_params.projection_trained {
        Pooling::Projected
    } else {
        Pooling::Raw
    }
}

pub fn build_label_set(
    class_names: &[String],
    label_params: &ModelParams,
    vocab: &Vocab,
    pooling: Pooling,
) -> Result<LabelSet, ZeroShotError> {
    if class_names.is_empty() {
        return Err(ZeroShotError::EmptyLabels);
    }
    let max_len = label_params.config.max_len;
    let rows = class_names
        .iter()
        .map(|name| label_params.encode(&encode_label_text(name, vocab, max_len), pooling))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LabelSet {
        names: class_names.to_vec(),
        vectors: Tensor::from_rows(&rows)?,
        pooling,
        lineage: label_params.lineage.clone(),
    })
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Class index whose label vector has the largest dot product with `doc_vec`.
pub fn predict_vector(doc_vec: &[f64], labels: &LabelSet) -> Result<usize, ZeroShotError> {
    if labels.is_empty() {
        return Err(ZeroShotError::EmptyLabels);
    }
    if doc_vec.len() != labels.vectors.cols() {
        return Err(ZeroShotError::DimMismatch {
            doc: doc_vec.len(),
            label: labels.vectors.cols(),
        });
    }
    let scores: Vec<f64> = (0..labels.len()).map(|c| dot(labels.vectors.row(c), doc_vec)).collect();
    Ok(argmax(&scores))
}

fn check_pairing(doc_params: &ModelParams, labels: &LabelSet) -> Result<(), ZeroShotError> {
    if let (Some(d), Some(l)) = (&doc_params.lineage, &labels.lineage) {
        if d != l {
            return Err(ZeroShotError::Pairing {
                doc: d.clone(),
                label: l.clone(),
            });
        }
    }
    Ok(())
}

pub fn predict(
    doc: &Document,
    labels: &LabelSet,
    doc_params: &ModelParams,
    vocab: &Vocab,
) -> Result<String, ZeroShotError> {
    check_pairing(doc_params, labels)?;
    let v = doc_params.encode(&encode(doc, vocab, doc_params.config.max_len), labels.pooling)?;
    Ok(labels.names[predict_vector(&v, labels)?].clone())
}

/// Predicted class indices for many documents, encoded on up to `threads`
/// workers; output order follows `docs`.
pub fn predict_batch(
    docs: &[&Document],
    labels: &LabelSet,
    doc_params: &ModelParams,
    vocab: &Vocab,
    threads: usize,
) -> Result<Vec<usize>, ZeroShotError> {
    check_pairing(doc_params, labels)?;
    let run = |chunk: &[&Document]| -> Result<Vec<usize>, ZeroShotError> {
        chunk
            .iter()
            .map(|d| {
                let v = doc_params.encode(&encode(d, vocab, doc_params.config.max_len), labels.pooling)?;
                predict_vector(&v, labels)
            })
            .collect()
    };
    let threads = threads.max(1).min(docs.len().max(1));
    if threads == 1 {
        return run(docs);
    }
    let chunk = docs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<usize>, ZeroShotError>> = std::thread::scope(|s| {
        let handles: Vec<_> = docs.chunks(chunk).map(|c| s.spawn(move || run(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(docs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroF1Report {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MacroF1Report {
    /// Tallies `(gold, predicted)` index pairs over `class_names`.
    pub fn from_pairs(class_names: &[String], gold: &[usize], predicted: &[usize]) -> Self {
        let c = class_names.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for (&g, &p) in gold.iter().zip(predicted) {
            confusion[g][p] += 1;
        }
        Self::from_confusion(class_names, confusion)
    }

    pub fn from_confusion(class_names: &[String], confusion: Vec<Vec<u64>>) -> Self {
        let c = class_names.len();
        let mut per_class = Vec::with_capacity(c);
        let mut correct = 0;
        let mut total = 0;
        for k in 0..c {
            let tp = confusion[k][k];
            let support: u64 = confusion[k].iter().sum();
            let predicted: u64 = (0..c).map(|g| confusion[g][k]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            correct += tp;
            total += support;
            per_class.push(ClassMetrics {
                name: class_names[k].clone(),
                precision,
                recall,
                f1,
                support,
            });
        }
        let macro_f1 = if c == 0 {
            0.0
        } else {
            per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64
        };
        Self {
            per_class,
            macro_f1,
            accuracy: ratio(correct, total),
            confusion,
        }
    }
}

/// Macro-F1 of `docs` against `labels`; every document label must be in the set.
pub fn evaluate(
    docs: &[&Document],
    labels: &LabelSet,
    doc_params: &ModelParams,
    vocab: &Vocab,
    threads: usize,
) -> Result<MacroF1Report, ZeroShotError> {
    if docs.is_empty() {
        return Err(ZeroShotError::NoDocuments);
    }
    let gold = docs
        .iter()
        .map(|d| {
            d.label
                .as_deref()
                .and_then(|l| labels.index_of(l))
                .ok_or_else(|| ZeroShotError::UnknownLabel {
                    doc: d.id.clone(),
                    label: d.label.clone(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let predicted = predict_batch(docs, labels, doc_params, vocab, threads)?;
    Ok(MacroF1Report::from_pairs(&labels.names, &gold, &predicted))
}

/// Looks up split document ids in the corpus.
pub fn resolve_docs<'c>(corpus: &'c Corpus, ids: &[String]) -> Result<Vec<&'c Document>, ZeroShotError> {
    let index = corpus.index();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| ZeroShotError::MissingDocument(id.clone()))
        })
        .collect()
}

/// Evaluates one partition (`val` or `test`) of a split.
pub fn evaluate_part(
    split: &ZeroShotSplit,
    part: Part,
    corpus: &Corpus,
    doc_params: &ModelParams,
    label_params: &ModelParams,
    vocab: &Vocab,
    threads: usize,
) -> Result<MacroF1Report, ZeroShotError> {
    let (classes, ids) = match part {
        Part::Val => (&split.val_classes, &split.val_docs),
        Part::Test => (&split.test_classes, &split.test_docs),
    };
    let labels = build_label_set(classes, label_params, vocab, pooling_for(doc_params, label_params))?;
    let docs = resolve_docs(corpus, ids)?;
    evaluate(&docs, &labels, doc_params, vocab, threads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Val,
    Test,
}

/// Direct inference with pretrained encoders; `(validation, test)` reports.
/// Untrained projections are bypassed.
pub fn run_unsupervised_protocol(
    split: &ZeroShotSplit,
    corpus: &Corpus,
    doc_params: &ModelParams,
    label_params: &ModelParams,
    vocab: &Vocab,
    threads: usize,
) -> Result<(MacroF1Report, MacroF1Report), ZeroShotError> {
    let val = evaluate_part(split, Part::Val, corpus, doc_params, label_params, vocab, threads)?;
    let test = evaluate_part(split, Part::Test, corpus, doc_params, label_params, vocab, threads)?;
    Ok((val, test))
}

pub struct SupervisedOutcome {
    pub val: MacroF1Report,
    pub test: MacroF1Report,
    pub finetuned: FinetuneOutcome,
}

/// Fine-tunes on the train classes, keeps the best validation model, and
/// reports validation and test macro-F1 for it.
pub fn run_supervised_protocol(
    split: &ZeroShotSplit,
    corpus: &Corpus,
    doc_params: ModelParams,
    label_params: ModelParams,
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<SupervisedOutcome, ZeroShotError> {
    let finetuned = finetune(split, corpus, vocab, doc_params, label_params, config)?;
    let (val, test) =
        run_unsupervised_protocol(split, corpus, &finetuned.doc, &finetuned.label, vocab, config.threads)?;
    Ok(SupervisedOutcome { val, test, finetuned })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn set(rows: &[Vec<f64>]) -> LabelSet {
        LabelSet {
            names: names(rows.len()),
            vectors: Tensor::from_rows(rows).unwrap(),
            pooling: Pooling::Raw,
            lineage: None,
        }
    }

    #[test]
    fn orthonormal_basis_prediction() {
        let basis: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(i == j)).collect()).collect();
        let labels = set(&basis);
        assert_eq!(predict_vector(&[0.0, 0.0, 1.0, 0.0], &labels).unwrap(), 2);
        let scaled = LabelSet {
            vectors: labels.vectors.scale(3.5),
            ..labels.clone()
        };
        assert_eq!(predict_vector(&[0.0, 0.0, 1.0, 0.0], &scaled).unwrap(), 2);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let labels = set(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.5], vec![1.0, 0.0]]);
        assert_eq!(predict_vector(&[2.0, 1.0], &labels).unwrap(), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn hand_computed_macro_f1() {
        // Gold A,A,B; predicted A,A... class B: TP=1 FN=1; class A: TP=1 FP=1.
        let r = MacroF1Report::from_pairs(&names(2), &[0, 1, 1], &[0, 0, 1]);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_and_empty_class() {
        let r = MacroF1Report::from_pairs(&names(2), &[0, 1, 1], &[0, 1, 1]);
        assert_eq!(r.macro_f1, 1.0);
        let r = MacroF1Report::from_pairs(&names(3), &[0, 1], &[0, 1]);
        assert_eq!(r.per_class[2].f1, 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_rows_sum_to_support() {
        let gold = [0, 0, 1, 2, 2, 2];
        let pred = [1, 0, 1, 0, 2, 2];
        let r = MacroF1Report::from_pairs(&names(3), &gold, &pred);
        for (k, m) in r.per_class.iter().enumerate() {
            assert_eq!(r.confusion[k].iter().sum::<u64>(), m.support);
        }
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch_is_error() {
        let labels = set(&[vec![1.0, 0.0]]);
        assert!(matches!(
            predict_vector(&[1.0], &labels),
            Err(ZeroShotError::DimMismatch { .. })
        ));
    }
}
