//! Synthetic semi-structured documents with controllable layout signal.
//!
//! Every class owns a page template (column count, title alignment, table
//! grid, margins, line pitch) and a pool of topic words. A document is a
//! title line holding its class name plus body lines flowed through a
//! template. Text lines are emitted in shuffled order, as extraction tools
//! often do for multi-region pages, so reading order carries no class signal.
//!
//! `layout_signal_strength` (s) moves class evidence from token identity to
//! geometry:
//! - the document uses its own class template with probability `s`, otherwise
//!   a template drawn uniformly from all classes;
//! - every other class name appears in the body with probability `s`, so the
//!   presence of a class name stops identifying the class as `s → 1`;
//! - body tokens come from the class topic pool at rate `(1 − s)·TOPIC_RATE`,
//!   otherwise from a shared filler distribution.
//!
//! At `s = 1` every document holds each class name exactly once and only
//! filler words, so unigram distributions match across classes and the class
//! is recoverable only from where the names sit. At `s = 0` templates are
//! class-independent and the class is recoverable only from tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BBox, Corpus, Document};

/// The sixteen RVL-CDIP document classes in their conventional order.
pub const RVL_CDIP_CLASSES: [&str; 16] = [
    "letter",
    "form",
    "email",
    "handwritten",
    "advertisement",
    "scientific report",
    "scientific publication",
    "specification",
    "file folder",
    "news article",
    "budget",
    "invoice",
    "presentation",
    "questionnaire",
    "resume",
    "memo",
];

const FILLER: [&str; 40] = [
    "the",
    "of",
    "and",
    "to",
    "in",
    "for",
    "on",
    "with",
    "by",
    "at",
    "from",
    "date",
    "page",
    "total",
    "number",
    "name",
    "address",
    "phone",
    "no",
    "ref",
    "see",
    "item",
    "amount",
    "section",
    "note",
    "per",
    "re",
    "office",
    "department",
    "report",
    "company",
    "year",
    "street",
    "city",
    "code",
    "time",
    "file",
    "copy",
    "please",
    "attached",
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "be", "da", "fe", "go", "hu", "ji", "pe", "zo",
];

const TOPIC_WORDS_PER_CLASS: usize = 12;
const TOPIC_RATE: f64 = 0.6;
const PAGE_W: f64 = 612.0;
const PAGE_H: f64 = 792.0;
const CHAR_W: f64 = 5.5;
const LINE_H: f64 = 10.0;
const TITLE_CHAR_W: f64 = 11.0;
const TITLE_H: f64 = 20.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub docs_per_class: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Fraction of class evidence carried by geometry rather than token identity.
    pub layout_signal_strength: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 16,
            docs_per_class: 200,
            min_tokens: 40,
            max_tokens: 60,
            layout_signal_strength: 0.7,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_classes < 4 {
            return Err(format!("n_classes must be >= 4, got {}", self.n_classes));
        }
        if self.docs_per_class == 0 {
            return Err("docs_per_class must be positive".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(format!(
                "token range {}..={} must be positive and ordered",
                self.min_tokens, self.max_tokens
            ));
        }
        if !(0.0..=1.0).contains(&self.layout_signal_strength) {
            return Err(format!(
                "layout_signal_strength must be in [0, 1], got {}",
                self.layout_signal_strength
            ));
        }
        Ok(())
    }
}

/// Class names used by the generator: RVL-CDIP names first, then `category N`.
pub fn synthetic_class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            RVL_CDIP_CLASSES
                .get(i)
                .map_or_else(|| format!("category {}", i + 1), |s| s.to_string())
        })
        .collect()
}

fn topic_word(class: usize, k: usize) -> String {
    let n = class * TOPIC_WORDS_PER_CLASS + k;
    let mut w = String::new();
    w.push_str(SYLLABLES[n % 16]);
    w.push_str(SYLLABLES[(n / 16) % 16]);
    w.push_str(SYLLABLES[(n / 256 + 7) % 16]);
    w
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Align {
    Left,
    Center,
    Right,
}

#[derive(Clone, Debug)]
struct Template {
    columns: usize,
    title_align: Align,
    grid: bool,
    margin: f64,
    top: f64,
    pitch: f64,
    title_y: f64,
}

impl Template {
    fn for_class(c: usize, rng: &mut ChaCha8Rng) -> Self {
        let title_align = match (c / 3) % 3 {
            0 => Align::Left,
            1 => Align::Center,
            _ => Align::Right,
        };
        Self {
            columns: 1 + c % 3,
            title_align,
            grid: (c / 9) % 2 == 1,
            margin: rng.gen_range(40.0..90.0),
            top: rng.gen_range(110.0..200.0),
            pitch: rng.gen_range(14.0..30.0),
            title_y: rng.gen_range(30.0..80.0),
        }
    }

    /// Lays out the title and body lines, returning one box per token.
    fn place(&self, title: &[String], lines: &[Vec<String>], rng: &mut ChaCha8Rng) -> (Vec<BBox>, Vec<BBox>) {
        let title_w: f64 = title.iter().map(|t| t.len() as f64 * TITLE_CHAR_W).sum::<f64>()
            + TITLE_CHAR_W * (title.len().saturating_sub(1)) as f64;
        let mut x = match self.title_align {
            Align::Left => self.margin,
            Align::Center => (PAGE_W - title_w) / 2.0,
            Align::Right => PAGE_W - self.margin - title_w,
        }
        .max(0.0);
        let title_boxes = title
            .iter()
            .map(|t| {
                let w = t.len() as f64 * TITLE_CHAR_W;
                let b = BBox::new(x, self.title_y, x + w, self.title_y + TITLE_H);
                x += w + TITLE_CHAR_W;
                b
            })
            .collect();

        let usable = PAGE_W - 2.0 * self.margin;
        let col_w = usable / self.columns as f64;
        let rows_per_col = ((PAGE_H - 40.0 - self.top) / self.pitch).floor().max(1.0) as usize;
        let mut body = Vec::new();
        for (i, line) in lines.iter().enumerate() {
            let col = (i / rows_per_col) % self.columns;
            let row = i % rows_per_col;
            let y = self.top + row as f64 * self.pitch;
            let x0 = self.margin + col as f64 * col_w;
            let mut x = x0 + if self.grid { 0.0 } else { rng.gen_range(0.0..12.0) };
            let cell = col_w / line.len().max(1) as f64;
            for (j, t) in line.iter().enumerate() {
                let w = t.len() as f64 * CHAR_W;
                if self.grid {
                    x = x0 + j as f64 * cell;
                }
                let x0 = x.min(PAGE_W - 1.0);
                body.push(BBox::new(x0, y, (x + w).min(PAGE_W), y + LINE_H));
                x += w + CHAR_W;
            }
        }
        (title_boxes, body)
    }
}

/// Generates a labeled corpus; a pure function of `config`.
///
/// # Panics
/// If `config` fails [`SynthConfig::validate`].
pub fn generate_synthetic(config: &SynthConfig) -> Corpus {
    if let Err(e) = config.validate() {
        panic!("invalid SynthConfig: {e}");
    }
    let s = config.layout_signal_strength;
    let names = synthetic_class_names(config.n_classes);
    let name_tokens: Vec<Vec<String>> = names
        .iter()
        .map(|n| n.split_whitespace().map(str::to_string).collect())
        .collect();
    let mut template_rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0x7e3a_11c5);
    let templates: Vec<Template> = (0..config.n_classes)
        .map(|c| Template::for_class(c, &mut template_rng))
        .collect();
    let filler_weights: Vec<f64> = (0..FILLER.len()).map(|r| 1.0 / (r as f64 + 2.0)).collect();
    let filler_total: f64 = filler_weights.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut documents = Vec::with_capacity(config.n_classes * config.docs_per_class);
    for c in 0..config.n_classes {
        for k in 0..config.docs_per_class {
            let template = if rng.gen_bool(s) {
                &templates[c]
            } else {
                &templates[rng.gen_range(0..config.n_classes)]
            };
            let n_tokens = rng.gen_range(config.min_tokens..=config.max_tokens);
            let title = name_tokens[c].clone();

            let mut body: Vec<String> = Vec::new();
            for (other, toks) in name_tokens.iter().enumerate() {
                if other != c && rng.gen_bool(s) {
                    body.extend(toks.iter().cloned());
                }
            }
            let n_free = n_tokens.saturating_sub(title.len() + body.len()).max(4);
            let topic_p = (1.0 - s) * TOPIC_RATE;
            for _ in 0..n_free {
                if rng.gen_bool(topic_p) {
                    body.push(topic_word(c, rng.gen_range(0..TOPIC_WORDS_PER_CLASS)));
                } else {
                    let mut u = rng.gen::<f64>() * filler_total;
                    let mut pick = FILLER.len() - 1;
                    for (i, w) in filler_weights.iter().enumerate() {
                        if u < *w {
                            pick = i;
                            break;
                        }
                        u -= w;
                    }
                    body.push(FILLER[pick].to_string());
                }
            }
            body.shuffle(&mut rng);

            let mut lines: Vec<Vec<String>> = Vec::new();
            let mut rest = body.as_slice();
            while !rest.is_empty() {
                let take = rng.gen_range(2..=6).min(rest.len());
                lines.push(rest[..take].to_vec());
                rest = &rest[take..];
            }
            let (title_boxes, body_boxes) = template.place(&title, &lines, &mut rng);

            let mut segments: Vec<(Vec<String>, Vec<BBox>)> = Vec::with_capacity(lines.len() + 1);
            segments.push((title, title_boxes));
            let mut off = 0;
            for line in lines {
                let n = line.len();
                segments.push((line, body_boxes[off..off + n].to_vec()));
                off += n;
            }
            segments.shuffle(&mut rng);

            let (tokens, bboxes): (Vec<_>, Vec<_>) =
                segments.into_iter().flat_map(|(t, b)| t.into_iter().zip(b)).unzip();
            documents.push(Document {
                id: format!("syn-{c:02}-{k:05}"),
                tokens,
                bboxes,
                page_width: PAGE_W,
                page_height: PAGE_H,
                label: Some(names[c].clone()),
            });
        }
    }
    Corpus::new(documents)
}
