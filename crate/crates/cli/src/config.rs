//! Declarative run file. Every key is optional; command-line flags win over
//! file values, which win over built-in presets.

use std::path::{Path, PathBuf};

use anyhow::Context;
use layoutmatch::encoders::EncoderConfig;
use layoutmatch::training::TrainConfig;
use serde::Deserialize;

use crate::Invalid;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub splits: Option<PathBuf>,
    pub split_name: Option<String>,
    pub doc_ckpt: Option<PathBuf>,
    pub label_ckpt: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderOverrides,
    #[serde(default)]
    pub train: TrainOverrides,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderOverrides {
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_len: Option<usize>,
    pub proj_dim: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    pub peak_lr: Option<f64>,
    pub warmup_fraction: Option<f64>,
    pub eval_every: Option<usize>,
    pub weight_decay: Option<f64>,
    pub pseudo_label_p: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())).into())
    }
}

impl EncoderOverrides {
    pub fn apply(&self, c: &mut EncoderConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(n_layers, d_model, n_heads, d_ff, max_len, proj_dim, dropout);
    }
}

impl TrainOverrides {
    pub fn apply(&self, c: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        set!(
            batch_size,
            steps,
            peak_lr,
            warmup_fraction,
            eval_every,
            weight_decay,
            pseudo_label_p
        );
        if self.epochs.is_some() {
            c.epochs = self.epochs;
        }
    }
}
