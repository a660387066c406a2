//! Word-level vocabulary, document encoding and centroid quantization.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::corpus::{BBox, Corpus, Document};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Upper end of the quantized coordinate grid; tables have `COORD_BINS` rows.
pub const COORD_MAX: u16 = 1000;
pub const COORD_BINS: usize = COORD_MAX as usize + 1;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocab file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("max_size {0} must exceed the 5 special tokens")]
    TooSmall(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect()).expect("specials are distinct")
    }

    /// Vocabulary from an id-ordered token list that starts with the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if i < SPECIALS.len() && t != SPECIALS[i] {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    reason: format!("expected special {} at id {i}", SPECIALS[i]),
                });
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Malformed {
                    line: i + 1,
                    reason: format!("duplicate token {t:?}"),
                });
            }
        }
        if tokens.len() < SPECIALS.len() {
            return Err(VocabError::Malformed {
                line: tokens.len() + 1,
                reason: "missing special tokens".into(),
            });
        }
        Ok(Self { tokens, ids })
    }

    /// Most frequent tokens with count ≥ `min_freq`, ties broken
    /// lexicographically, up to `max_size` entries including specials.
    pub fn build(corpus: &Corpus, max_size: usize, min_freq: usize) -> Result<Self, VocabError> {
        if max_size <= SPECIALS.len() {
            return Err(VocabError::TooSmall(max_size));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in &corpus.documents {
            for t in &d.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - SPECIALS.len())
                .map(|(t, _)| t.to_string()),
        );
        Self::from_tokens(tokens)
    }

    /// Extends the vocabulary with any missing tokens, in the given order.
    pub fn with_extra<'a>(mut self, extra: impl IntoIterator<Item = &'a str>) -> Self {
        for t in extra {
            if !self.ids.contains_key(t) {
                self.ids.insert(t.to_string(), self.tokens.len() as u32);
                self.tokens.push(t.to_string());
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number (from 0) is the id.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        if let Some(i) = self.tokens.iter().position(|t| t.contains('\n') || t.contains('\r')) {
            return Err(VocabError::Malformed {
                line: i + 1,
                reason: "token contains a line break".into(),
            });
        }
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Model-ready document: ids framed by `[CLS]`/`[SEP]` plus quantized centroids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedDoc {
    pub ids: Vec<u32>,
    pub xq: Vec<u16>,
    pub yq: Vec<u16>,
}

impl TokenizedDoc {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Same ids with every coordinate zeroed.
    pub fn without_layout(&self) -> TokenizedDoc {
        TokenizedDoc {
            ids: self.ids.clone(),
            xq: vec![0; self.ids.len()],
            yq: vec![0; self.ids.len()],
        }
    }
}

/// Box centroid mapped onto the `[0, 1000]²` grid with floor and clamp.
pub fn quantize_centroid(bbox: &BBox, page_w: f64, page_h: f64) -> (u16, u16) {
    let (cx, cy) = bbox.centroid();
    let q = |c: f64, extent: f64| -> u16 {
        let v = (c / extent * f64::from(COORD_MAX)).floor();
        if v.is_nan() {
            0
        } else {
            v.clamp(0.0, f64::from(COORD_MAX)) as u16
        }
    };
    (q(cx, page_w), q(cy, page_h))
}

/// Head-truncates to `max_len − 2` tokens and frames with `[CLS]` … `[SEP]`.
///
/// # Panics
/// If `max_len < 3`.
pub fn encode(doc: &Document, vocab: &Vocab, max_len: usize) -> TokenizedDoc {
    assert!(max_len >= 3, "max_len must be at least 3");
    let keep = doc.tokens.len().min(max_len - 2);
    let mut out = TokenizedDoc {
        ids: Vec::with_capacity(keep + 2),
        xq: Vec::with_capacity(keep + 2),
        yq: Vec::with_capacity(keep + 2),
    };
    out.ids.push(CLS);
    out.xq.push(0);
    out.yq.push(0);
    for (t, b) in doc.tokens.iter().zip(&doc.bboxes).take(keep) {
        let (x, y) = quantize_centroid(b, doc.page_width, doc.page_height);
        out.ids.push(vocab.id(t));
        out.xq.push(x);
        out.yq.push(y);
    }
    out.ids.push(SEP);
    out.xq.push(0);
    out.yq.push(0);
    out
}

/// Encodes whitespace-separated text with all coordinates at zero.
pub fn encode_label_text(text: &str, vocab: &Vocab, max_len: usize) -> TokenizedDoc {
    encode_tokens(text.split_whitespace(), vocab, max_len)
}

/// Encodes a token sequence with all coordinates at zero.
pub fn encode_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>, vocab: &Vocab, max_len: usize) -> TokenizedDoc {
    assert!(max_len >= 3, "max_len must be at least 3");
    let mut ids = vec![CLS];
    ids.extend(tokens.into_iter().take(max_len - 2).map(|t| vocab.id(t)));
    ids.push(SEP);
    let n = ids.len();
    TokenizedDoc {
        ids,
        xq: vec![0; n],
        yq: vec![0; n],
    }
}
