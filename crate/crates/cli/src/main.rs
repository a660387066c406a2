use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use layoutmatch::corpus::{
    generate_synthetic, load_splits, make_zero_shot_splits, save_splits, Corpus, CorpusError, SplitError, SynthConfig,
    ZeroShotSplit,
};
use layoutmatch::encoders::{init_params, EncoderConfig, EncoderError, ModelParams};
use layoutmatch::numerics::{file_digest, Checkpoint, Dtype};
use layoutmatch::tokenizer::{Vocab, VocabError};
use layoutmatch::training::{
    finetune, pretrain_contrastive, pretrain_mlm, Objective, TrainConfig, TrainError, TrainReport,
};
use layoutmatch::zeroshot::{build_label_set, evaluate_part, pooling_for, predict_batch, Part};
use log::info;
use serde_json::json;

mod config;

use config::RunConfig;

/// Configuration or validation failure; exits with status 2.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

const SEED_ENV: &str = "LAYOUTMATCH_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "layoutmatch",
    version,
    about = "Zero-shot document classification by layout-aware matching"
)]
struct Cli {
    /// Worker threads for inference (training is single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Force single-threaded execution for bitwise-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,

    /// TOML run file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Random seed. Falls back to the run file, then LAYOUTMATCH_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Partition a corpus's classes into zero-shot splits.
    MakeSplits(MakeSplitsArgs),
    /// Build a vocabulary file from one or more corpora.
    BuildVocab(BuildVocabArgs),
    /// Masked-LM pretraining of one encoder.
    PretrainMlm(PretrainMlmArgs),
    /// Contrastive pretraining of both encoders on pseudo-labels.
    PretrainCpt(PretrainCptArgs),
    /// Fine-tune both encoders on a split's training classes.
    Finetune(FinetuneArgs),
    /// Macro-F1 report for a split's validation or test partition.
    Evaluate(EvaluateArgs),
    /// Predict a class for every document of a corpus.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    /// Number of classes.
    #[arg(long, default_value_t = 16)]
    classes: usize,
    /// Documents per class.
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Layout signal strength in [0, 1].
    #[arg(long, default_value_t = 0.7)]
    signal: f64,
    /// Minimum tokens per document.
    #[arg(long, default_value_t = 40)]
    min_tokens: usize,
    /// Maximum tokens per document.
    #[arg(long, default_value_t = 60)]
    max_tokens: usize,
    /// Drop labels (pretraining corpus).
    #[arg(long)]
    unlabeled: bool,
    /// Output JSONL file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeSplitsArgs {
    /// Labeled corpus (JSONL).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Number of splits.
    #[arg(long, default_value_t = 4)]
    splits: usize,
    /// Training classes per split.
    #[arg(long, default_value_t = 8)]
    train: usize,
    /// Validation classes per split.
    #[arg(long, default_value_t = 4)]
    val: usize,
    /// Test classes per split.
    #[arg(long, default_value_t = 4)]
    test: usize,
    /// Output split file (one JSON object per line).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Corpus files (repeatable); class names are always included.
    #[arg(long = "corpus", num_args = 1)]
    corpora: Vec<PathBuf>,
    /// Maximum size including special tokens.
    #[arg(long, default_value_t = 30_000)]
    max_size: usize,
    /// Minimum token count.
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    /// Output vocabulary file (one token per line).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Epochs over the training documents (overrides --steps).
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Warmup fraction of the schedule.
    #[arg(long)]
    warmup: Option<f64>,
    /// Steps between validation passes and checkpoints.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop after this many steps, leaving a resumable checkpoint.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Resume from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Use full-size presets instead of desk-scale ones.
    #[arg(long)]
    full_scale: bool,
    /// Save weights as 32-bit reals.
    #[arg(long)]
    f32: bool,
}

#[derive(Args, Debug)]
struct PretrainMlmArgs {
    /// Pretraining corpus (JSONL; labels ignored).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Train a layout-free encoder (label encoder or layout-blind baseline).
    #[arg(long)]
    text_only: bool,
    /// Warm-start from this encoder checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainCptArgs {
    /// Pretraining corpus (JSONL; labels ignored).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary file (default: the one stored in --doc-ckpt).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Layout-aware document encoder checkpoint.
    #[arg(long)]
    doc_ckpt: Option<PathBuf>,
    /// Layout-free label encoder checkpoint.
    #[arg(long)]
    label_ckpt: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FinetuneObjective {
    Contrastive,
    Ce,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Labeled corpus (JSONL).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Split file.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Split to use (default: the first in the file).
    #[arg(long)]
    split_name: Option<String>,
    /// Vocabulary file (default: the one stored in --doc-ckpt).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Document encoder checkpoint.
    #[arg(long)]
    doc_ckpt: Option<PathBuf>,
    /// Label encoder checkpoint.
    #[arg(long)]
    label_ckpt: Option<PathBuf>,
    /// Training objective.
    #[arg(long, value_enum, default_value_t = FinetuneObjective::Contrastive)]
    objective: FinetuneObjective,
    #[command(flatten)]
    train: TrainFlags,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PartArg {
    Val,
    Test,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Split file.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Split to use (default: the first in the file).
    #[arg(long)]
    split_name: Option<String>,
    /// Partition to evaluate.
    #[arg(long, value_enum, default_value_t = PartArg::Test)]
    part: PartArg,
    /// Document encoder checkpoint.
    #[arg(long)]
    doc_ckpt: Option<PathBuf>,
    /// Label encoder checkpoint.
    #[arg(long)]
    label_ckpt: Option<PathBuf>,
    /// Labeled corpus (JSONL).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary file (default: the one stored in --doc-ckpt).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Documents to classify (JSONL).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Candidate class names, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<String>,
    /// Document encoder checkpoint.
    #[arg(long)]
    doc_ckpt: Option<PathBuf>,
    /// Label encoder checkpoint.
    #[arg(long)]
    label_ckpt: Option<PathBuf>,
    /// Vocabulary file (default: the one stored in --doc-ckpt).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Output JSONL with one prediction per document.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Ctx {
    run: RunConfig,
    seed: u64,
    threads: usize,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let run = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let seed = match cli.seed.or(run.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Invalid(format!("{SEED_ENV}: `{v}` is not an unsigned integer")))?,
                Err(_) => 0,
            },
        };
        if cli.threads == 0 {
            return Err(Invalid("--threads must be at least 1".into()).into());
        }
        let threads = if cli.deterministic { 1 } else { cli.threads };
        Ok(Self { run, seed, threads })
    }
}

fn required(flag: Option<&PathBuf>, file: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(file).cloned().ok_or_else(|| {
        Invalid(format!(
            "missing `{name}`: pass --{} or set it in the run file",
            name.replace('_', "-")
        ))
        .into()
    })
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    let c = Corpus::load_jsonl(path).with_context(|| format!("loading corpus {}", path.display()))?;
    info!("loaded {} documents from {}", c.len(), path.display());
    Ok(c)
}

fn load_model(path: &Path) -> Result<(ModelParams, Checkpoint)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let m = ModelParams::from_checkpoint(&ck).with_context(|| format!("reading encoder from {}", path.display()))?;
    Ok((m, ck))
}

fn vocab_from(flag: Option<&PathBuf>, run: &RunConfig, ck: Option<&Checkpoint>) -> Result<Vocab> {
    if let Some(p) = flag.or(run.vocab.as_ref()) {
        return Vocab::load(p).with_context(|| format!("loading vocabulary {}", p.display()));
    }
    let tokens = ck
        .and_then(|c| c.meta.extra.get("vocab"))
        .and_then(|v| serde_json::from_value::<Vec<String>>(v.clone()).ok())
        .ok_or_else(|| Invalid("missing `vocab`: pass --vocab or use checkpoints written by this tool".into()))?;
    Ok(Vocab::from_tokens(tokens)?)
}

fn save_model(model: &ModelParams, vocab: &Vocab, kind: &str, step: usize, path: &Path, dtype: Dtype) -> Result<()> {
    ensure_parent(path)?;
    let mut ck = model.to_checkpoint(kind, step as u64);
    ck.meta.extra.insert("vocab".into(), json!(vocab.tokens()));
    ck.save(path, dtype)
        .with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn pick_split(path: &Path, name: Option<&String>) -> Result<ZeroShotSplit> {
    let splits = load_splits(path).with_context(|| format!("loading splits {}", path.display()))?;
    let split = match name {
        Some(n) => splits
            .into_iter()
            .find(|s| &s.name == n)
            .ok_or_else(|| Invalid(format!("split_name: no split named `{n}` in {}", path.display())))?,
        None => splits
            .into_iter()
            .next()
            .ok_or_else(|| Invalid(format!("split: {} holds no splits", path.display())))?,
    };
    Ok(split)
}

fn train_config(ctx: &Ctx, objective: Objective, flags: &TrainFlags, out: &Path) -> Result<TrainConfig> {
    let mut c = if flags.full_scale {
        TrainConfig::full_scale(objective)
    } else {
        TrainConfig::desk(objective)
    };
    ctx.run.train.apply(&mut c);
    if let Some(v) = flags.steps {
        c.steps = v;
        c.epochs = None;
    }
    if flags.epochs.is_some() {
        c.epochs = flags.epochs;
    }
    if let Some(v) = flags.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = flags.lr {
        c.peak_lr = v;
    }
    if let Some(v) = flags.warmup {
        c.warmup_fraction = v;
    }
    if let Some(v) = flags.eval_every {
        c.eval_every = v;
    }
    c.stop_after = flags.stop_after;
    c.resume = flags.resume;
    c.seed = ctx.seed;
    c.threads = ctx.threads;
    c.checkpoint_dir = Some(out.to_path_buf());
    c.validate()?;
    Ok(c)
}

fn dtype(flags: &TrainFlags) -> Dtype {
    if flags.f32 {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

fn write_report(out: &Path, report: &TrainReport, config: &TrainConfig) -> Result<()> {
    info!(
        "trained {} of {} steps in {:.1}s",
        report.final_step, report.total_steps, report.wall_clock_secs
    );
    write_json(&out.join("report.json"), &json!({ "config": config, "report": report }))
}

fn gen_corpus(ctx: &Ctx, a: &GenCorpusArgs) -> Result<()> {
    let out = required(a.out.as_ref(), ctx.run.out.as_ref(), "out")?;
    let cfg = SynthConfig {
        n_classes: a.classes,
        docs_per_class: a.per_class,
        min_tokens: a.min_tokens,
        max_tokens: a.max_tokens,
        layout_signal_strength: a.signal,
        rng_seed: ctx.seed,
    };
    cfg.validate().map_err(Invalid)?;
    let mut corpus = generate_synthetic(&cfg);
    if a.unlabeled {
        corpus = corpus.unlabeled();
    }
    ensure_parent(&out)?;
    corpus
        .write_jsonl(&out)
        .with_context(|| format!("writing {}", out.display()))?;
    info!("wrote {} documents to {}", corpus.len(), out.display());
    Ok(())
}

fn make_splits(ctx: &Ctx, a: &MakeSplitsArgs) -> Result<()> {
    let out = required(a.out.as_ref(), ctx.run.out.as_ref(), "out")?;
    let corpus = load_corpus(&required(a.corpus.as_ref(), ctx.run.corpus.as_ref(), "corpus")?)?;
    let splits = make_zero_shot_splits(&corpus.class_names, a.splits, a.train, a.val, a.test, &corpus)?;
    ensure_parent(&out)?;
    save_splits(&splits, &out)?;
    info!("wrote {} splits to {}", splits.len(), out.display());
    Ok(())
}

fn build_vocab(ctx: &Ctx, a: &BuildVocabArgs) -> Result<()> {
    let out = required(a.out.as_ref(), ctx.run.out.as_ref(), "out")?;
    let mut paths = a.corpora.clone();
    if paths.is_empty() {
        paths.push(required(None, ctx.run.corpus.as_ref(), "corpus")?);
    }
    let mut docs = Vec::new();
    let mut names = Vec::new();
    for p in &paths {
        let c = load_corpus(p)?;
        names.extend(c.class_names.iter().cloned());
        docs.extend(c.documents);
    }
    let vocab = Vocab::build(&Corpus::new(docs), a.max_size, a.min_freq)?
        .with_extra(names.iter().flat_map(|n| n.split_whitespace()));
    ensure_parent(&out)?;
    vocab.save(&out)?;
    info!("wrote {} tokens to {}", vocab.len(), out.display());
    Ok(())
}

fn pretrain_mlm_cmd(ctx: &Ctx, a: &PretrainMlmArgs) -> Result<()> {
    let out = required(a.out.as_ref(), ctx.run.out.as_ref(), "out")?;
    let corpus = load_corpus(&required(a.corpus.as_ref(), ctx.run.corpus.as_ref(), "corpus")?)?;
    let init = a.init.as_ref().map(|p| load_model(p)).transpose()?;
    let vocab = vocab_from(a.vocab.as_ref(), &ctx.run, init.as_ref().map(|(_, ck)| ck))?;
    let use_layout = !a.text_only;
    let mut enc = match &init {
        Some((m, _)) => EncoderConfig {
            use_layout,
            ..m.config.clone()
        },
        None if a.train.full_scale => EncoderConfig::full_scale(vocab.len(), use_layout),
        None => EncoderConfig::desk(vocab.len(), use_layout),
    };
    ctx.run.encoder.apply(&mut enc);
    enc.vocab_size = vocab.len();
    let mut params = init_params(&enc, ctx.seed)?;
    if let Some((m, _)) = &init {
        let n = params.warm_start_from(m);
        info!("warm start: copied {n} tensors");
    }
    let cfg = train_config(ctx, Objective::Mlm, &a.train, &out)?;
    let (model, report) = pretrain_mlm(&corpus, &vocab, params, &cfg)?;
    save_model(
        &model,
        &vocab,
        "encoder",
        report.final_step,
        &out.join("model.ckpt"),
        dtype(&a.train),
    )?;
    write_report(&out, &report, &cfg)
}

fn pretrain_cpt_cmd(ctx: &Ctx, a: &PretrainCptArgs) -> Result<()> {
    let out = required(a.out.as_ref(), ctx.run.out.as_ref(), "out")?;
    let corpus = load_corpus(&required(a.corpus.as_ref(), ctx.run.corpus.as_ref(), "corpus")?)?;
    let (doc, doc_ck) = load_model(&required(a.doc_ckpt.as_ref(), ctx.run.doc_ckpt.as_ref(), "doc_ckpt")?)?;
    let (label, _) = load_model(&required(
        a.label_ckpt.as_ref(),
        ctx.run.label_ckpt.as_ref(),
        "label_ckpt",
    )?)?;
    let vocab = vocab_from(a.vocab.as_ref(), &ctx.run, Some(&doc_ck))?;
    let cfg = train_config(ctx, Objective::Cpt, &a.train, &out)?;
    let (doc, label, report) = pretrain_contrastive(&corpus, &vocab, doc, label, &cfg)?;
    save_model(
        &doc,
        &vocab,
        "doc-encoder",
        report.final_step,
        &out.join("doc.ckpt"),
        dtype(&a.train),
    )?;
    save_model(
        &label,
        &vocab,
        "label-encoder",
        report.final_step,
        &out.join("label.ckpt"),
        dtype(&a.train),
    )?;
    write_report(&out, &report, &cfg)
}

fn finetune_cmd(ctx: &Ctx, a: &FinetuneArgs) -> Result<()> {
    let out = required(a.out.as_ref(), ctx.run.out.as_ref(), "out")?;
    let split_file = required(a.split.as_ref(), ctx.run.splits.as_ref(), "split")?;
    let split = pick_split(&split_file, a.split_name.as_ref().or(ctx.run.split_name.as_ref()))?;
    let corpus = load_corpus(&required(a.corpus.as_ref(), ctx.run.corpus.as_ref(), "corpus")?)?;
    split.validate(Some(&corpus))?;
    let (doc, doc_ck) = load_model(&required(a.doc_ckpt.as_ref(), ctx.run.doc_ckpt.as_ref(), "doc_ckpt")?)?;
    let (label, _) = load_model(&required(
        a.label_ckpt.as_ref(),
        ctx.run.label_ckpt.as_ref(),
        "label_ckpt",
    )?)?;
    let vocab = vocab_from(a.vocab.as_ref(), &ctx.run, Some(&doc_ck))?;
    let objective = match a.objective {
        FinetuneObjective::Contrastive => Objective::FinetuneContrastive,
        FinetuneObjective::Ce => Objective::FinetuneCe,
    };
    let cfg = train_config(ctx, objective, &a.train, &out)?;
    let outcome = finetune(&split, &corpus, &vocab, doc, label, &cfg)?;
    let step = outcome.report.best_step.unwrap_or(outcome.report.final_step);
    save_model(
        &outcome.doc,
        &vocab,
        "doc-encoder",
        step,
        &out.join("doc.ckpt"),
        dtype(&a.train),
    )?;
    save_model(
        &outcome.label,
        &vocab,
        "label-encoder",
        step,
        &out.join("label.ckpt"),
        dtype(&a.train),
    )?;
    write_report(&out, &outcome.report, &cfg)
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let out = required(a.out.as_ref(), ctx.run.out.as_ref(), "out")?;
    let split_file = required(a.split.as_ref(), ctx.run.splits.as_ref(), "split")?;
    let split = pick_split(&split_file, a.split_name.as_ref().or(ctx.run.split_name.as_ref()))?;
    let corpus = load_corpus(&required(a.corpus.as_ref(), ctx.run.corpus.as_ref(), "corpus")?)?;
    split.validate(Some(&corpus))?;
    let doc_path = required(a.doc_ckpt.as_ref(), ctx.run.doc_ckpt.as_ref(), "doc_ckpt")?;
    let label_path = required(a.label_ckpt.as_ref(), ctx.run.label_ckpt.as_ref(), "label_ckpt")?;
    let (doc, doc_ck) = load_model(&doc_path)?;
    let (label, _) = load_model(&label_path)?;
    let vocab = vocab_from(a.vocab.as_ref(), &ctx.run, Some(&doc_ck))?;
    let part = match a.part {
        PartArg::Val => Part::Val,
        PartArg::Test => Part::Test,
    };
    let report = evaluate_part(&split, part, &corpus, &doc, &label, &vocab, ctx.threads)?;
    info!("split {} {:?}: macro-F1 {:.4}", split.name, part, report.macro_f1);
    let value = json!({
        "split": split.name,
        "part": part,
        "macro_f1": report.macro_f1,
        "accuracy": report.accuracy,
        "per_class": report.per_class,
        "confusion": report.confusion,
        "meta": {
            "doc_ckpt_sha256": file_digest(&doc_path)?,
            "label_ckpt_sha256": file_digest(&label_path)?,
            "pooling": format!("{:?}", pooling_for(&doc, &label)),
            "seed": ctx.seed,
        },
    });
    write_json(&out, &value)
}

fn infer_cmd(ctx: &Ctx, a: &InferArgs) -> Result<()> {
    let out = required(a.out.as_ref(), ctx.run.out.as_ref(), "out")?;
    let corpus = load_corpus(&required(a.corpus.as_ref(), ctx.run.corpus.as_ref(), "corpus")?)?;
    let (doc, doc_ck) = load_model(&required(a.doc_ckpt.as_ref(), ctx.run.doc_ckpt.as_ref(), "doc_ckpt")?)?;
    let (label, _) = load_model(&required(
        a.label_ckpt.as_ref(),
        ctx.run.label_ckpt.as_ref(),
        "label_ckpt",
    )?)?;
    let vocab = vocab_from(a.vocab.as_ref(), &ctx.run, Some(&doc_ck))?;
    let classes: Vec<String> = a
        .classes
        .iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    if classes.is_empty() {
        bail!(Invalid("classes: at least one class name is required".into()));
    }
    let labels = build_label_set(&classes, &label, &vocab, pooling_for(&doc, &label))?;
    let docs: Vec<_> = corpus.documents.iter().collect();
    let predicted = predict_batch(&docs, &labels, &doc, &vocab, ctx.threads)?;
    ensure_parent(&out)?;
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    for (d, p) in docs.iter().zip(predicted) {
        serde_json::to_writer(&mut w, &json!({ "id": d.id, "predicted": labels.names[p] }))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    info!("wrote {} predictions to {}", docs.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&ctx, a),
        Command::MakeSplits(a) => make_splits(&ctx, a),
        Command::BuildVocab(a) => build_vocab(&ctx, a),
        Command::PretrainMlm(a) => pretrain_mlm_cmd(&ctx, a),
        Command::PretrainCpt(a) => pretrain_cpt_cmd(&ctx, a),
        Command::Finetune(a) => finetune_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Infer(a) => infer_cmd(&ctx, a),
    }
}

/// Whether an error stems from bad configuration or input rather than a
/// runtime failure.
fn is_invalid(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || matches!(e.downcast_ref::<SplitError>(), Some(s) if !matches!(s, SplitError::Io(_)))
            || matches!(e.downcast_ref::<CorpusError>(), Some(c) if !matches!(c, CorpusError::Io(_)))
            || matches!(e.downcast_ref::<VocabError>(), Some(v) if !matches!(v, VocabError::Io(_)))
            || matches!(e.downcast_ref::<EncoderError>(), Some(EncoderError::Config(_)))
            || matches!(
                e.downcast_ref::<TrainError>(),
                Some(TrainError::Config(_) | TrainError::Split(_) | TrainError::Leakage(_))
            )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_invalid(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
