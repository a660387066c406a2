//! End-to-end desk-scale experiment: synthetic corpora, zero-shot splits,
//! masked-LM and contrastive pretraining, then the unsupervised and
//! supervised zero-shot tables.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, make_zero_shot_splits, Corpus, SynthConfig, ZeroShotSplit};
use crate::encoders::{init_params, EncoderConfig, ModelParams};
use crate::tokenizer::Vocab;
use crate::training::{pretrain_contrastive, pretrain_mlm, Objective, TrainConfig, TrainError, TrainReport};
use crate::zeroshot::{run_supervised_protocol, run_unsupervised_protocol, ZeroShotError};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Labeled evaluation corpus.
    pub synth: SynthConfig,
    /// Unlabeled pretraining corpus; same generator, its own seed.
    pub pretrain_synth: SynthConfig,
    pub n_splits: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub vocab_max: usize,
    /// `vocab_size` and `use_layout` are filled in per encoder.
    pub encoder: EncoderConfig,
    pub init_seed: u64,
    pub mlm_text: TrainConfig,
    pub mlm_layout: TrainConfig,
    pub cpt: TrainConfig,
    /// Objective is overridden per row.
    pub finetune: TrainConfig,
    pub finetune_seeds: Vec<u64>,
    pub threads: usize,
}

impl ExperimentConfig {
    /// Configuration used by the acceptance suite.
    pub fn desk() -> Self {
        let synth = SynthConfig {
            n_classes: 16,
            docs_per_class: 200,
            layout_signal_strength: 0.7,
            rng_seed: 11,
            ..SynthConfig::default()
        };
        let pretrain_synth = SynthConfig {
            docs_per_class: 100,
            rng_seed: 12,
            ..synth.clone()
        };
        let mut mlm_text = TrainConfig::desk(Objective::Mlm);
        mlm_text.steps = 300;
        mlm_text.seed = 1;
        let mut mlm_layout = mlm_text.clone();
        mlm_layout.seed = 2;
        let mut cpt = TrainConfig::desk(Objective::Cpt);
        cpt.seed = 3;
        let mut finetune = TrainConfig::desk(Objective::FinetuneContrastive);
        finetune.epochs = None;
        finetune.steps = 60;
        finetune.eval_every = 20;
        Self {
            synth,
            pretrain_synth,
            n_splits: 4,
            n_train: 8,
            n_val: 4,
            n_test: 4,
            vocab_max: 2000,
            encoder: EncoderConfig::desk(0, true),
            init_seed: 5,
            mlm_text,
            mlm_layout,
            cpt,
            finetune,
            finetune_seeds: vec![101, 102, 103],
            threads: 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
    #[error("setup: {0}")]
    Setup(String),
}

pub struct Prepared {
    pub corpus: Corpus,
    pub pretrain_corpus: Corpus,
    pub splits: Vec<ZeroShotSplit>,
    pub vocab: Vocab,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let corpus = generate_synthetic(&cfg.synth);
    let pretrain_corpus = generate_synthetic(&cfg.pretrain_synth).unlabeled();
    let splits = make_zero_shot_splits(
        &corpus.class_names,
        cfg.n_splits,
        cfg.n_train,
        cfg.n_val,
        cfg.n_test,
        &corpus,
    )
    .map_err(|e| ExperimentError::Setup(e.to_string()))?;
    let mut all = corpus.documents.clone();
    all.extend(pretrain_corpus.documents.iter().cloned());
    let vocab = Vocab::build(&Corpus::new(all), cfg.vocab_max, 1)
        .map_err(|e| ExperimentError::Setup(e.to_string()))?
        .with_extra(corpus.class_names.iter().flat_map(|n| n.split_whitespace()));
    Ok(Prepared {
        corpus,
        pretrain_corpus,
        splits,
        vocab,
    })
}

pub struct Pretrained {
    /// Layout-free MLM model: the label encoder, and the layout-blind document encoder.
    pub text: ModelParams,
    /// Layout-aware MLM model, warm-started from `text`.
    pub layout: ModelParams,
    pub cpt_doc: ModelParams,
    pub cpt_label: ModelParams,
    pub reports: Vec<(String, TrainReport)>,
}

fn encoder_config(cfg: &ExperimentConfig, vocab: &Vocab, use_layout: bool) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        use_layout,
        ..cfg.encoder.clone()
    }
}

pub fn pretrain(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Pretrained, ExperimentError> {
    let text0 = init_params(&encoder_config(cfg, &prep.vocab, false), cfg.init_seed).map_err(TrainError::from)?;
    info!("mlm (text): {} steps", cfg.mlm_text.steps);
    let (text, r_text) = pretrain_mlm(&prep.pretrain_corpus, &prep.vocab, text0, &cfg.mlm_text)?;
    let mut layout0 =
        init_params(&encoder_config(cfg, &prep.vocab, true), cfg.init_seed + 1).map_err(TrainError::from)?;
    layout0.warm_start_from(&text);
    info!("mlm (layout): {} steps", cfg.mlm_layout.steps);
    let (layout, r_layout) = pretrain_mlm(&prep.pretrain_corpus, &prep.vocab, layout0, &cfg.mlm_layout)?;
    info!("cpt: {} steps", cfg.cpt.steps);
    let (cpt_doc, cpt_label, r_cpt) = pretrain_contrastive(
        &prep.pretrain_corpus,
        &prep.vocab,
        layout.clone(),
        text.clone(),
        &cfg.cpt,
    )?;
    Ok(Pretrained {
        text,
        layout,
        cpt_doc,
        cpt_label,
        reports: vec![
            ("mlm-text".into(), r_text),
            ("mlm-layout".into(), r_layout),
            ("cpt".into(), r_cpt),
        ],
    })
}

/// Per-split test macro-F1 for one model row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    pub per_split: Vec<f64>,
}

impl TableRow {
    pub fn average(&self) -> f64 {
        if self.per_split.is_empty() {
            0.0
        } else {
            self.per_split.iter().sum::<f64>() / self.per_split.len() as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub split_names: Vec<String>,
    pub rows: Vec<TableRow>,
}

impl Table {
    pub fn row(&self, name: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Markdown with one column per split plus the average, F1 in percent.
    pub fn to_markdown(&self) -> String {
        let mut s = format!("**{}** (test macro-F1, %)\n\n| Model |", self.title);
        for n in &self.split_names {
            let _ = write!(s, " {n} |");
        }
        s.push_str(" Avg |\n|---|");
        for _ in 0..=self.split_names.len() {
            s.push_str("---:|");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.name);
            for v in &r.per_split {
                let _ = write!(s, " {:.2} |", 100.0 * v);
            }
            let _ = writeln!(s, " {:.2} |", 100.0 * r.average());
        }
        s
    }
}

pub const ROW_LAYOUT_BLIND: &str = "layout-blind";
pub const ROW_LAYOUT: &str = "layout";
pub const ROW_LAYOUT_CPT: &str = "layout + CPT";
pub const ROW_FT_CONTRASTIVE: &str = "layout + FT contrastive";
pub const ROW_FT_CE: &str = "layout + FT CE";
pub const ROW_CPT_FT_CONTRASTIVE: &str = "layout + CPT + FT contrastive";
pub const ROW_CPT_FT_CE: &str = "layout + CPT + FT CE";

fn split_names(prep: &Prepared) -> Vec<String> {
    prep.splits.iter().map(|s| s.name.clone()).collect()
}

/// Direct inference without fine-tuning.
pub fn unsupervised_table(cfg: &ExperimentConfig, prep: &Prepared, pre: &Pretrained) -> Result<Table, ExperimentError> {
    let pairs: [(&str, &ModelParams, &ModelParams); 3] = [
        (ROW_LAYOUT_BLIND, &pre.text, &pre.text),
        (ROW_LAYOUT, &pre.layout, &pre.text),
        (ROW_LAYOUT_CPT, &pre.cpt_doc, &pre.cpt_label),
    ];
    let mut rows = Vec::new();
    for (name, doc, label) in pairs {
        let mut per_split = Vec::new();
        for split in &prep.splits {
            let (_, test) = run_unsupervised_protocol(split, &prep.corpus, doc, label, &prep.vocab, cfg.threads)?;
            per_split.push(test.macro_f1);
        }
        info!("{name}: {per_split:?}");
        rows.push(TableRow {
            name: name.into(),
            per_split,
        });
    }
    Ok(Table {
        title: "Unsupervised zero-shot".into(),
        split_names: split_names(prep),
        rows,
    })
}

/// Fine-tuning on training classes, averaged over `finetune_seeds`.
pub fn supervised_table(cfg: &ExperimentConfig, prep: &Prepared, pre: &Pretrained) -> Result<Table, ExperimentError> {
    let variants: [(&str, &ModelParams, &ModelParams, Objective); 4] = [
        (
            ROW_FT_CONTRASTIVE,
            &pre.layout,
            &pre.text,
            Objective::FinetuneContrastive,
        ),
        (ROW_FT_CE, &pre.layout, &pre.text, Objective::FinetuneCe),
        (
            ROW_CPT_FT_CONTRASTIVE,
            &pre.cpt_doc,
            &pre.cpt_label,
            Objective::FinetuneContrastive,
        ),
        (ROW_CPT_FT_CE, &pre.cpt_doc, &pre.cpt_label, Objective::FinetuneCe),
    ];
    let mut rows = Vec::new();
    for (name, doc, label, objective) in variants {
        let mut per_split = Vec::new();
        for split in &prep.splits {
            let mut total = 0.0;
            for &seed in &cfg.finetune_seeds {
                let tc = TrainConfig {
                    objective,
                    seed,
                    threads: cfg.threads,
                    ..cfg.finetune.clone()
                };
                let out = run_supervised_protocol(split, &prep.corpus, doc.clone(), label.clone(), &prep.vocab, &tc)?;
                total += out.test.macro_f1;
            }
            per_split.push(total / cfg.finetune_seeds.len() as f64);
        }
        info!("{name}: {per_split:?}");
        rows.push(TableRow {
            name: name.into(),
            per_split,
        });
    }
    Ok(Table {
        title: "Supervised zero-shot".into(),
        split_names: split_names(prep),
        rows,
    })
}
