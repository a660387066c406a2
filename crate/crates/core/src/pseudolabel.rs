//! Pseudo-label sampling for contrastive pretraining: a random contiguous
//! block of a document's tokens stands in for its label.

use rand::Rng;
use thiserror::Error;

use crate::corpus::Document;

pub const DEFAULT_P: f64 = 1.0 / 20.0;

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error("geometric parameter {0} outside (0, 1]")]
    BadP(f64),
    #[error("document `{0}` has no tokens")]
    EmptyDocument(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub start: usize,
    pub length: usize,
    pub tokens: Vec<String>,
}

/// Shifted geometric draw on {1, 2, ...} by inverse CDF.
pub fn sample_length<R: Rng + ?Sized>(rng: &mut R, p: f64) -> Result<usize, PseudoLabelError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(PseudoLabelError::BadP(p));
    }
    // Uniform on (0, 1].
    let u = 1.0 - rng.gen::<f64>();
    if p == 1.0 {
        return Ok(1);
    }
    let k = (u.ln() / (1.0 - p).ln()).floor();
    Ok(1 + k as usize)
}

/// Draws a length, clamps it to the document, and picks a uniform start.
pub fn sample_pseudo_label<R: Rng + ?Sized>(
    doc: &Document,
    rng: &mut R,
    p: f64,
) -> Result<PseudoLabel, PseudoLabelError> {
    let n = doc.tokens.len();
    if n == 0 {
        return Err(PseudoLabelError::EmptyDocument(doc.id.clone()));
    }
    let length = sample_length(rng, p)?.min(n);
    let start = rng.gen_range(0..=n - length);
    Ok(PseudoLabel {
        start,
        length,
        tokens: doc.tokens[start..start + length].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn doc(n: usize) -> Document {
        Document {
            id: "d".into(),
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            bboxes: vec![BBox::new(0.0, 0.0, 1.0, 1.0); n],
            page_width: 10.0,
            page_height: 10.0,
            label: None,
        }
    }

    #[test]
    fn degenerate_p_always_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| sample_length(&mut rng, 1.0).unwrap() == 1));
    }

    #[test]
    fn rejects_bad_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(sample_length(&mut rng, p).is_err());
        }
    }

    #[test]
    fn single_token_document() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pl = sample_pseudo_label(&doc(1), &mut rng, DEFAULT_P).unwrap();
        assert_eq!((pl.start, pl.length), (0, 1));
        assert_eq!(pl.tokens, ["t0"]);
    }

    #[test]
    fn long_draw_is_clamped() {
        // p tiny makes every draw far exceed 5 tokens.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pl = sample_pseudo_label(&doc(5), &mut rng, 1e-9).unwrap();
        assert_eq!((pl.start, pl.length), (0, 5));
    }

    #[test]
    fn empty_document_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_pseudo_label(&doc(0), &mut rng, DEFAULT_P),
            Err(PseudoLabelError::EmptyDocument(_))
        ));
    }
}
