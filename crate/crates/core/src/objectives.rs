//! Training losses: the symmetric in-batch contrastive loss and its gradient,
//! masked-LM masking and loss, and the cross-entropy matching baseline.

use rand::Rng;
use thiserror::Error;

use crate::numerics::{dot, log_sum_exp, softmax_in_place, NumericsError, Tensor};
use crate::tokenizer::{Vocab, CLS, MASK, PAD, SEP, SPECIALS};

pub const P_MASK: f64 = 0.15;
pub const P_REPLACE: f64 = 0.80;
/// Target value at positions that were not selected for prediction.
pub const IGNORE: i64 = -1;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("matching matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("gold index {index} out of range for {classes} classes")]
    GoldIndex { index: usize, classes: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `M[i][j] = label_i · doc_j`.
pub fn match_matrix(label_vecs: &Tensor, doc_vecs: &Tensor) -> Result<Tensor, ObjectiveError> {
    if label_vecs.shape() != doc_vecs.shape() {
        return Err(NumericsError::Shape {
            op: "match_matrix",
            lhs: label_vecs.shape().to_vec(),
            rhs: doc_vecs.shape().to_vec(),
        }
        .into());
    }
    Ok(label_vecs.matmul_t(doc_vecs)?)
}

fn check_square(m: &Tensor) -> Result<usize, ObjectiveError> {
    if m.rows() != m.cols() {
        return Err(ObjectiveError::NotSquare {
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    Ok(m.rows())
}

/// Mean of the row-wise and column-wise losses, each summed over the batch:
/// `Σ_i [−M_ii + LSE_j M_ij]`.
pub fn contrastive_loss(m: &Tensor) -> Result<f64, ObjectiveError> {
    let n = check_square(m)?;
    let t = m.transpose();
    let mut row = 0.0;
    let mut col = 0.0;
    for i in 0..n {
        let diag = m.get(i, i);
        row += log_sum_exp(m.row(i)) - diag;
        col += log_sum_exp(t.row(i)) - diag;
    }
    Ok(0.5 * (row + col))
}

/// `∂L/∂M = ½ (row-softmax + column-softmax) − I`.
pub fn contrastive_grad(m: &Tensor) -> Result<Tensor, ObjectiveError> {
    let n = check_square(m)?;
    let rows = m.softmax_rows();
    let cols = m.transpose().softmax_rows().transpose();
    let mut g = rows.add(&cols)?.scale(0.5);
    for i in 0..n {
        g.set(i, i, g.get(i, i) - 1.0);
    }
    Ok(g)
}

/// Inputs after dynamic masking, with per-position prediction targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<u32>,
    /// Original id at selected positions, [`IGNORE`] elsewhere.
    pub targets: Vec<i64>,
    pub selected: Vec<bool>,
}

impl MaskedBatch {
    pub fn num_selected(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_positions(&self) -> Vec<usize> {
        (0..self.selected.len()).filter(|&i| self.selected[i]).collect()
    }
}

/// Selects each non-special position with probability `p_mask`. A selected
/// token becomes `[MASK]` with probability `p_replace`, a uniformly drawn
/// ordinary token with half the remainder, and stays unchanged otherwise.
pub fn mlm_mask<R: Rng + ?Sized>(ids: &[u32], rng: &mut R, p_mask: f64, p_replace: f64, vocab: &Vocab) -> MaskedBatch {
    let n_special = SPECIALS.len() as u32;
    let vocab_len = vocab.len() as u32;
    let mut input_ids = ids.to_vec();
    let mut targets = vec![IGNORE; ids.len()];
    let mut selected = vec![false; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if id == PAD || id == CLS || id == SEP {
            continue;
        }
        if rng.gen::<f64>() >= p_mask {
            continue;
        }
        selected[i] = true;
        targets[i] = id as i64;
        let r: f64 = rng.gen();
        if r < p_replace {
            input_ids[i] = MASK;
        } else if r < p_replace + (1.0 - p_replace) / 2.0 && vocab_len > n_special {
            input_ids[i] = rng.gen_range(n_special..vocab_len);
        }
    }
    MaskedBatch {
        input_ids,
        targets,
        selected,
    }
}

/// Mean cross-entropy over selected positions; 0 when none are selected.
pub fn mlm_loss(logits: &Tensor, batch: &MaskedBatch) -> Result<f64, ObjectiveError> {
    if logits.rows() != batch.targets.len() {
        return Err(NumericsError::Shape {
            op: "mlm_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![batch.targets.len()],
        }
        .into());
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &t) in batch.targets.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        let row = logits.row(r);
        let t = t as usize;
        if t >= row.len() {
            return Err(NumericsError::Index {
                op: "mlm_loss",
                index: t,
                bound: row.len(),
            }
            .into());
        }
        total += log_sum_exp(row) - row[t];
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Scores of one document against every label row.
pub fn label_scores(doc_vec: &[f64], all_label_vecs: &Tensor) -> Result<Vec<f64>, ObjectiveError> {
    if doc_vec.len() != all_label_vecs.cols() {
        return Err(NumericsError::Shape {
            op: "label_scores",
            lhs: all_label_vecs.shape().to_vec(),
            rhs: vec![doc_vec.len()],
        }
        .into());
    }
    Ok((0..all_label_vecs.rows())
        .map(|c| dot(all_label_vecs.row(c), doc_vec))
        .collect())
}

/// `−s_gold + LSE_c s_c` with `s_c = label_c · doc`.
pub fn ce_matching_loss(doc_vec: &[f64], all_label_vecs: &Tensor, gold_index: usize) -> Result<f64, ObjectiveError> {
    Ok(ce_matching_loss_and_grad(doc_vec, all_label_vecs, gold_index)?.0)
}

/// Loss together with its gradient with respect to the score vector.
pub fn ce_matching_loss_and_grad(
    doc_vec: &[f64],
    all_label_vecs: &Tensor,
    gold_index: usize,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let classes = all_label_vecs.rows();
    if gold_index >= classes {
        return Err(ObjectiveError::GoldIndex {
            index: gold_index,
            classes,
        });
    }
    let scores = label_scores(doc_vec, all_label_vecs)?;
    let loss = log_sum_exp(&scores) - scores[gold_index];
    let mut grad = scores;
    softmax_in_place(&mut grad);
    grad[gold_index] -= 1.0;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn match_matrix_examples() {
        let m = match_matrix(&t(&[&[1.0, 0.0], &[0.0, 1.0]]), &t(&[&[2.0, 0.0], &[0.0, 3.0]])).unwrap();
        assert_eq!(m, t(&[&[2.0, 0.0], &[0.0, 3.0]]));
        assert!(match_matrix(&t(&[&[1.0, 0.0]]), &t(&[&[1.0, 0.0, 0.0]])).is_err());
    }

    #[test]
    fn contrastive_loss_examples() {
        assert!((contrastive_loss(&Tensor::identity(2)).unwrap() - 0.626_523_8).abs() < 1e-6);
        assert_eq!(contrastive_loss(&t(&[&[3.7]])).unwrap(), 0.0);
        let z = contrastive_loss(&Tensor::zeros(4, 4)).unwrap();
        assert!((z - 4.0 * 4f64.ln()).abs() < 1e-9);
        assert!(matches!(
            contrastive_loss(&Tensor::zeros(2, 3)),
            Err(ObjectiveError::NotSquare { .. })
        ));
    }

    #[test]
    fn contrastive_grad_examples() {
        let g = contrastive_grad(&Tensor::zeros(2, 2)).unwrap();
        assert_eq!(g, t(&[&[-0.5, 0.5], &[0.5, -0.5]]));
        let m = t(&[&[0.3, -1.2, 2.0], &[0.1, 0.0, -0.4], &[1.5, 0.7, 0.2]]);
        assert!(contrastive_grad(&m).unwrap().sum().abs() < 1e-12);
    }

    #[test]
    fn mlm_mask_extremes() {
        let vocab = Vocab::specials_only().with_extra(["a", "b", "c"]);
        let ids = [CLS, 5, 6, 7, SEP, PAD];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let none = mlm_mask(&ids, &mut rng, 0.0, P_REPLACE, &vocab);
        assert_eq!(none.input_ids, ids);
        assert!(none.targets.iter().all(|&t| t == IGNORE));
        let all = mlm_mask(&ids, &mut rng, 1.0, 1.0, &vocab);
        assert_eq!(all.input_ids, [CLS, MASK, MASK, MASK, SEP, PAD]);
        assert_eq!(all.targets, [IGNORE, 5, 6, 7, IGNORE, IGNORE]);
    }

    #[test]
    fn mlm_loss_examples() {
        let one = MaskedBatch {
            input_ids: vec![MASK],
            targets: vec![1],
            selected: vec![true],
        };
        assert!((mlm_loss(&Tensor::zeros(1, 2), &one).unwrap() - 2f64.ln()).abs() < 1e-12);
        let two = MaskedBatch {
            input_ids: vec![MASK, 7, MASK],
            targets: vec![0, IGNORE, 3],
            selected: vec![true, false, true],
        };
        assert!((mlm_loss(&Tensor::zeros(3, 4), &two).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sharp = t(&[&[-50.0, 50.0]]);
        assert!(mlm_loss(&sharp, &one).unwrap() < 1e-40);
        let empty = MaskedBatch {
            input_ids: vec![5],
            targets: vec![IGNORE],
            selected: vec![false],
        };
        assert_eq!(mlm_loss(&Tensor::zeros(1, 4), &empty).unwrap(), 0.0);
    }

    #[test]
    fn ce_matching_examples() {
        let labels = t(&[&[1.0], &[0.0]]);
        assert!((ce_matching_loss(&[1.0], &labels, 0).unwrap() - 0.313_261_687_5).abs() < 1e-9);
        assert_eq!(ce_matching_loss(&[2.0, 1.0], &t(&[&[0.4, 9.0]]), 0).unwrap(), 0.0);
        assert!(matches!(
            ce_matching_loss(&[1.0], &labels, 2),
            Err(ObjectiveError::GoldIndex { .. })
        ));
    }
}
