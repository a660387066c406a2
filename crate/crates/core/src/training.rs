//! Masked-LM pretraining, contrastive pretraining on pseudo-labels, and
//! supervised fine-tuning, sharing one step loop with linear warmup/decay,
//! checkpointing, resume and validation-based model selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{Corpus, Document, SplitError, ZeroShotSplit};
use crate::encoders::{EncoderError, ModelParams, Pooling};
use crate::numerics::{
    adam_step, config_hash, AdamConfig, AdamState, Checkpoint, CheckpointMeta, Dtype, Graph, NodeId, NumericsError,
    ParamGrads, Tensor,
};
use crate::objectives::{
    ce_matching_loss_and_grad, contrastive_grad, contrastive_loss, match_matrix, mlm_mask, ObjectiveError, P_MASK,
    P_REPLACE,
};
use crate::pseudolabel::{sample_pseudo_label, PseudoLabelError, DEFAULT_P};
use crate::tokenizer::{encode, encode_label_text, encode_tokens, TokenizedDoc, Vocab};
use crate::zeroshot::{evaluate_part, Part, ZeroShotError};

pub const STATE_FILE: &str = "state.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("no training documents")]
    EmptyCorpus,
    #[error("zero-shot leakage: class `{0}` reached a gradient step but is not a training class")]
    Leakage(String),
    #[error("non-finite loss at step {0}")]
    NonFinite(usize),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error("validation: {0}")]
    Eval(Box<ZeroShotError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ZeroShotError> for TrainError {
    fn from(e: ZeroShotError) -> Self {
        TrainError::Eval(Box::new(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Mlm,
    Cpt,
    FinetuneContrastive,
    FinetuneCe,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Cpt => "cpt",
            Objective::FinetuneContrastive => "finetune-contrastive",
            Objective::FinetuneCe => "finetune-ce",
        }
    }
}

fn default_warmup() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_pseudo_p() -> f64 {
    DEFAULT_P
}
fn default_threads() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    /// Optimizer steps; ignored when `epochs` is set.
    pub steps: usize,
    #[serde(default)]
    pub epochs: Option<usize>,
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    pub seed: u64,
    pub eval_every: usize,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_pseudo_p")]
    pub pseudo_label_p: f64,
    /// Halt after this many steps (of the full schedule) and checkpoint.
    #[serde(default)]
    pub stop_after: Option<usize>,
    /// Continue from `checkpoint_dir/state.ckpt` when it exists.
    #[serde(default)]
    pub resume: bool,
    /// Workers for validation inference; training itself is single-threaded.
    #[serde(default = "default_threads")]
    pub threads: usize,
}

impl TrainConfig {
    /// Small CPU presets.
    pub fn desk(objective: Objective) -> Self {
        let (batch_size, steps, epochs, peak_lr, eval_every) = match objective {
            Objective::Mlm => (16, 500, None, 1e-3, 100),
            Objective::Cpt => (32, 1000, None, 1e-3, 250),
            Objective::FinetuneContrastive | Objective::FinetuneCe => (16, 0, Some(10), 1e-4, 100),
        };
        Self {
            objective,
            batch_size,
            steps,
            epochs,
            peak_lr,
            warmup_fraction: default_warmup(),
            seed: 0,
            eval_every,
            checkpoint_dir: None,
            weight_decay: default_weight_decay(),
            pseudo_label_p: DEFAULT_P,
            stop_after: None,
            resume: false,
            threads: 1,
        }
    }

    /// Full-size presets.
    pub fn full_scale(objective: Objective) -> Self {
        let (batch_size, steps, epochs, peak_lr) = match objective {
            Objective::Mlm => (2048, 100_000, None, 1e-4),
            Objective::Cpt => (256, 50_000, None, 1e-4),
            Objective::FinetuneContrastive | Objective::FinetuneCe => (40, 0, Some(30), 3e-5),
        };
        Self {
            batch_size,
            steps,
            epochs,
            peak_lr,
            eval_every: 1000,
            ..Self::desk(objective)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.batch_size < 2 && matches!(self.objective, Objective::Cpt | Objective::FinetuneContrastive) {
            return bad(format!(
                "batch_size {} < 2: the contrastive loss is identically zero for one pair",
                self.batch_size
            ));
        }
        match self.epochs {
            Some(0) => return bad("epochs must be positive".into()),
            None if self.steps == 0 => return bad("steps must be positive".into()),
            _ => {}
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.pseudo_label_p > 0.0 && self.pseudo_label_p <= 1.0) {
            return bad(format!("pseudo_label_p {} outside (0, 1]", self.pseudo_label_p));
        }
        if self.resume && self.checkpoint_dir.is_none() {
            return bad("resume requires checkpoint_dir".into());
        }
        Ok(())
    }

    pub fn total_steps(&self, n_docs: usize) -> usize {
        match self.epochs {
            Some(e) => (e * n_docs).div_ceil(self.batch_size).max(1),
            None => self.steps,
        }
    }

    /// Fields that define the optimization trajectory.
    fn identity(&self) -> Value {
        let mut c = self.clone();
        c.stop_after = None;
        c.resume = false;
        c.threads = 1;
        c.checkpoint_dir = None;
        serde_json::to_value(c).expect("config serializes")
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, peak_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let (s, t) = (step as f64, total_steps as f64);
    let warm = warmup_fraction * t;
    if s < warm {
        peak_lr * s / warm
    } else {
        peak_lr * (t - s) / (t - warm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricRecord {
    Step { step: usize, loss: f64, lr: f64 },
    Eval { step: usize, val_macro_f1: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub total_steps: usize,
    /// `(step, loss)` for every step run in this call.
    pub loss_trace: Vec<(usize, f64)>,
    /// `(step, validation macro-F1)`.
    pub val_trace: Vec<(usize, f64)>,
    pub best_step: Option<usize>,
    pub best_val_macro_f1: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    /// Every class name that reached a gradient step.
    pub gradient_class_names: BTreeSet<String>,
    pub final_step: usize,
    /// Not serialized, so saved reports stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

type StepFn<'s> = dyn FnMut(usize, &mut ChaCha8Rng, &[ModelParams], &mut [ParamGrads], &mut TrainReport) -> Result<f64, TrainError>
    + 's;
type EvalFn<'s> = dyn FnMut(&[ModelParams]) -> Result<f64, TrainError> + 's;

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

fn dropout_graph<'a>(rng: &mut ChaCha8Rng) -> Graph<'a> {
    Graph::with_dropout(ChaCha8Rng::seed_from_u64(rng.gen()))
}

fn model_meta(m: &ModelParams, adam: &AdamState) -> Value {
    json!({
        "config": m.config,
        "projection_trained": m.projection_trained,
        "lineage": m.lineage,
        "adam_t": adam.t,
    })
}

fn save_models(
    path: &Path,
    kind: &str,
    step: usize,
    cfg: &TrainConfig,
    models: &[ModelParams],
    adam: Option<&[AdamState]>,
    extra: BTreeMap<String, Value>,
) -> Result<(), TrainError> {
    let mut meta = CheckpointMeta::new(kind, step as u64, cfg.identity());
    meta.extra = extra;
    let metas: Vec<Value> = models
        .iter()
        .enumerate()
        .map(|(i, m)| match adam {
            Some(a) => model_meta(m, &a[i]),
            None => model_meta(
                m,
                &AdamState {
                    m: vec![],
                    v: vec![],
                    t: 0,
                },
            ),
        })
        .collect();
    meta.extra.insert("models".into(), Value::Array(metas));
    let mut ck = Checkpoint::new(meta);
    for (i, m) in models.iter().enumerate() {
        for (slot, e) in m.store.entries().iter().enumerate() {
            ck.insert(format!("m{i}/param/{}", e.name), e.value.clone());
            if let Some(a) = adam {
                ck.insert(format!("m{i}/adam_m/{}", e.name), a[i].m[slot].clone());
                ck.insert(format!("m{i}/adam_v/{}", e.name), a[i].v[slot].clone());
            }
        }
    }
    ck.save(path, Dtype::F64)?;
    Ok(())
}

fn load_models(
    path: &Path,
    cfg: &TrainConfig,
    with_adam: bool,
) -> Result<(Checkpoint, Vec<ModelParams>, Vec<AdamState>), TrainError> {
    let ck = Checkpoint::load(path)?;
    if ck.meta.config_hash != config_hash(&cfg.identity()) {
        return Err(TrainError::Resume(format!(
            "{} was written with a different training config",
            path.display()
        )));
    }
    let metas = ck
        .meta
        .extra
        .get("models")
        .and_then(Value::as_array)
        .ok_or_else(|| TrainError::Resume("missing model metadata".into()))?;
    let mut models = Vec::new();
    let mut adams = Vec::new();
    for (i, mv) in metas.iter().enumerate() {
        let prefix = format!("m{i}/param/");
        let mut meta = CheckpointMeta::new("model", ck.meta.step, mv["config"].clone());
        meta.lineage = mv["lineage"].as_str().map(str::to_string);
        meta.extra
            .insert("projection_trained".into(), mv["projection_trained"].clone());
        let mut sub = Checkpoint::new(meta);
        for (name, t) in &ck.tensors {
            if let Some(rest) = name.strip_prefix(&prefix) {
                sub.insert(format!("param/{rest}"), t.clone());
            }
        }
        let model = ModelParams::from_checkpoint(&sub)?;
        if with_adam {
            let mut st = AdamState::new(&model.store);
            st.t = mv["adam_t"].as_u64().unwrap_or(0);
            for (slot, e) in model.store.entries().iter().enumerate() {
                let get = |kind: &str| {
                    ck.get(&format!("m{i}/{kind}/{}", e.name))
                        .cloned()
                        .ok_or_else(|| TrainError::Resume(format!("missing optimizer state for {}", e.name)))
                };
                st.m[slot] = get("adam_m")?;
                st.v[slot] = get("adam_v")?;
            }
            adams.push(st);
        }
        models.push(model);
    }
    Ok((ck, models, adams))
}

fn open_metrics(dir: &Path, truncate: bool) -> Result<BufWriter<File>, TrainError> {
    std::fs::create_dir_all(dir)?;
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!truncate)
        .truncate(truncate)
        .open(dir.join(METRICS_FILE))?;
    Ok(BufWriter::new(f))
}

fn write_metric(w: &mut Option<BufWriter<File>>, rec: &MetricRecord) -> Result<(), TrainError> {
    if let Some(w) = w {
        serde_json::to_writer(&mut *w, rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Drives `total` optimizer steps over `models`. Returns the final models,
/// or the best validation models when `eval` is given.
fn run_loop(
    cfg: &TrainConfig,
    kind: &str,
    total: usize,
    mut models: Vec<ModelParams>,
    step_fn: &mut StepFn<'_>,
    mut eval: Option<&mut EvalFn<'_>>,
) -> Result<(Vec<ModelParams>, TrainReport), TrainError> {
    let started = Instant::now();
    let adam_cfg = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut adam: Vec<AdamState> = models.iter().map(|m| AdamState::new(&m.store)).collect();
    let mut report = TrainReport {
        total_steps: total,
        ..TrainReport::default()
    };
    let mut best: Option<Vec<ModelParams>> = None;
    let mut start = 0usize;
    let dir = cfg.checkpoint_dir.as_deref();
    let state_path = dir.map(|d| d.join(STATE_FILE));
    let best_path = dir.map(|d| d.join(BEST_FILE));

    if let (true, Some(sp)) = (cfg.resume, state_path.as_deref()) {
        if sp.exists() {
            let (ck, loaded, loaded_adam) = load_models(sp, cfg, true)?;
            if loaded.len() != models.len() {
                return Err(TrainError::Resume("model count differs".into()));
            }
            models = loaded;
            adam = loaded_adam;
            start = ck.meta.step as usize;
            if let Some(v) = ck.meta.extra.get("report") {
                let prev: TrainReport =
                    serde_json::from_value(v.clone()).map_err(|e| TrainError::Resume(e.to_string()))?;
                report.best_step = prev.best_step;
                report.best_val_macro_f1 = prev.best_val_macro_f1;
                report.best_checkpoint = prev.best_checkpoint;
                report.gradient_class_names = prev.gradient_class_names;
            }
            if let (Some(_), Some(bp)) = (report.best_step, best_path.as_deref()) {
                best = Some(load_models(bp, cfg, false)?.1);
            }
        }
    }
    let mut metrics = match dir {
        Some(d) => Some(open_metrics(d, start == 0)?),
        None => None,
    };
    let end = cfg.stop_after.map_or(total, |k| k.min(total));

    for step in start..end {
        let mut rng = step_rng(cfg.seed, step);
        let mut grads: Vec<ParamGrads> = models.iter().map(|m| m.store.zero_grads()).collect();
        let loss = step_fn(step, &mut rng, &models, &mut grads, &mut report)?;
        if !loss.is_finite() || !grads.iter().all(ParamGrads::is_finite) {
            return Err(TrainError::NonFinite(step));
        }
        let lr = lr_at(step, total, cfg.peak_lr, cfg.warmup_fraction);
        for ((m, g), a) in models.iter_mut().zip(&grads).zip(&mut adam) {
            adam_step(&mut m.store, g, a, lr, &adam_cfg);
        }
        report.loss_trace.push((step, loss));
        write_metric(&mut metrics, &MetricRecord::Step { step, loss, lr })?;
        let done = step + 1;
        let boundary = done % cfg.eval_every == 0 || done == total;
        if boundary {
            if let Some(ev) = eval.as_deref_mut() {
                let f1 = ev(&models)?;
                info!("{kind} step {done}/{total}: val macro-F1 {f1:.4}");
                report.val_trace.push((done, f1));
                write_metric(
                    &mut metrics,
                    &MetricRecord::Eval {
                        step: done,
                        val_macro_f1: f1,
                    },
                )?;
                if report.best_val_macro_f1.is_none_or(|b| f1 > b) {
                    report.best_val_macro_f1 = Some(f1);
                    report.best_step = Some(done);
                    if let Some(bp) = best_path.as_deref() {
                        save_models(bp, kind, done, cfg, &models, None, BTreeMap::new())?;
                        report.best_checkpoint = Some(bp.to_path_buf());
                    }
                    best = Some(models.clone());
                }
            }
        }
        if boundary || done == end {
            let k = cfg.eval_every.min(report.loss_trace.len());
            let recent = report.loss_trace[report.loss_trace.len() - k..]
                .iter()
                .map(|x| x.1)
                .sum::<f64>()
                / k as f64;
            info!("{kind} step {done}/{total}: loss {recent:.4} (mean of last {k}), lr {lr:.3e}");
        }
        if let Some(sp) = state_path.as_deref() {
            if boundary || done == end {
                let mut extra = BTreeMap::new();
                extra.insert(
                    "report".into(),
                    serde_json::to_value(&report).map_err(std::io::Error::from)?,
                );
                save_models(sp, kind, done, cfg, &models, Some(&adam), extra)?;
            }
        }
        if let Some(w) = metrics.as_mut() {
            w.flush()?;
        }
    }
    report.final_step = end.max(start);
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    let out = match best {
        Some(b) if end == total => b,
        _ => models,
    };
    Ok((out, report))
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        let mut all: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(all.as_mut_slice(), rng);
        all
    } else {
        sample(rng, n, batch).into_vec()
    }
}

fn check_vocab(model: &ModelParams, vocab: &Vocab) -> Result<(), TrainError> {
    if model.config.vocab_size != vocab.len() {
        return Err(TrainError::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            model.config.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn lineage_tag(cfg: &TrainConfig, models: &[&ModelParams]) -> String {
    let fingerprint: Vec<Value> = models
        .iter()
        .map(|m| {
            json!([
                m.config,
                m.store
                    .entries()
                    .first()
                    .map(|e| e.value.data()[..4.min(e.value.len())].to_vec())
            ])
        })
        .collect();
    format!(
        "{}-{}",
        cfg.objective.name(),
        config_hash(&json!([cfg.identity(), fingerprint]))
    )
}

/// Masked-LM pretraining of one encoder (layout-aware or layout-free).
pub fn pretrain_mlm(
    corpus: &Corpus,
    vocab: &Vocab,
    params: ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    check_vocab(&params, vocab)?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let max_len = params.config.max_len;
    let docs: Vec<TokenizedDoc> = corpus.documents.iter().map(|d| encode(d, vocab, max_len)).collect();
    let total = cfg.total_steps(docs.len());
    let mut step_fn = |_step: usize,
                       rng: &mut ChaCha8Rng,
                       models: &[ModelParams],
                       grads: &mut [ParamGrads],
                       _: &mut TrainReport|
     -> Result<f64, TrainError> {
        let model = &models[0];
        let idx = batch_indices(rng, docs.len(), cfg.batch_size);
        let masked: Vec<_> = idx
            .iter()
            .map(|&i| {
                (
                    i,
                    mlm_mask(&docs[i].ids, rng, P_MASK, P_REPLACE, vocab),
                    rng.gen::<u64>(),
                )
            })
            .collect();
        let n_sel: usize = masked.iter().map(|(_, m, _)| m.num_selected()).sum();
        if n_sel == 0 {
            return Ok(0.0);
        }
        let mut loss = 0.0;
        for (i, m, drop_seed) in &masked {
            let positions = m.selected_positions();
            if positions.is_empty() {
                continue;
            }
            let input = TokenizedDoc {
                ids: m.input_ids.clone(),
                ..docs[*i].clone()
            };
            let mut g = Graph::with_dropout(ChaCha8Rng::seed_from_u64(*drop_seed));
            let out = model.forward(&mut g, &input, Pooling::Raw, true)?;
            let logits = model.mlm_logits(&mut g, out.hidden, &positions)?;
            let targets: Vec<Option<usize>> = positions.iter().map(|&p| Some(m.targets[p] as usize)).collect();
            let ce = g.cross_entropy(logits, &targets)?;
            let w = positions.len() as f64 / n_sel as f64;
            loss += w * g.value(ce).data()[0];
            g.backward(ce, Tensor::scalar(w), Some(&mut grads[0]))?;
        }
        Ok(loss)
    };
    let (mut out, report) = run_loop(cfg, "mlm", total, vec![params], &mut step_fn, None)?;
    Ok((out.remove(0), report))
}

/// Forward passes for a batch of encoder inputs, keeping the graphs for the
/// backward pass.
struct Encoded<'a> {
    graphs: Vec<(Graph<'a>, NodeId)>,
    vectors: Tensor,
}

fn encode_batch<'a>(
    model: &'a ModelParams,
    inputs: &[&TokenizedDoc],
    rng: &mut ChaCha8Rng,
) -> Result<Encoded<'a>, TrainError> {
    let mut graphs = Vec::with_capacity(inputs.len());
    let mut rows = Vec::with_capacity(inputs.len());
    for t in inputs {
        let mut g = dropout_graph(rng);
        let out = model.forward(&mut g, t, Pooling::Projected, false)?;
        rows.push(g.value(out.pooled).data().to_vec());
        graphs.push((g, out.pooled));
    }
    Ok(Encoded {
        graphs,
        vectors: Tensor::from_rows(&rows)?,
    })
}

impl Encoded<'_> {
    /// Backpropagates `d_vectors` row by row into `grads`.
    fn backward(&self, d_vectors: &Tensor, grads: &mut ParamGrads) -> Result<(), TrainError> {
        for (r, (g, node)) in self.graphs.iter().enumerate() {
            g.backward(*node, Tensor::row_vector(d_vectors.row(r).to_vec()), Some(grads))?;
        }
        Ok(())
    }
}

/// Symmetric contrastive step over `(label_i, doc_i)` pairs where label row
/// `i` is `label_rows[i]` of the encoded labels. Returns the loss.
fn contrastive_step(
    docs: &Encoded<'_>,
    labels: &Encoded<'_>,
    label_rows: &[usize],
    grads: &mut [ParamGrads],
) -> Result<f64, TrainError> {
    let lb_rows: Vec<Vec<f64>> = label_rows.iter().map(|&u| labels.vectors.row(u).to_vec()).collect();
    let lb = Tensor::from_rows(&lb_rows)?;
    let m = match_matrix(&lb, &docs.vectors)?;
    let loss = contrastive_loss(&m)?;
    let g = contrastive_grad(&m)?;
    let d_docs = g.t_matmul(&lb)?;
    let d_lb = g.matmul(&docs.vectors)?;
    let mut d_labels = Tensor::zeros(labels.vectors.rows(), labels.vectors.cols());
    for (i, &u) in label_rows.iter().enumerate() {
        for (dst, src) in d_labels.row_mut(u).iter_mut().zip(d_lb.row(i)) {
            *dst += src;
        }
    }
    let (doc_grads, label_grads) = grads.split_at_mut(1);
    docs.backward(&d_docs, &mut doc_grads[0])?;
    labels.backward(&d_labels, &mut label_grads[0])?;
    Ok(loss)
}

fn visible_tokens(doc: &Document, max_len: usize) -> std::borrow::Cow<'_, Document> {
    let keep = max_len.saturating_sub(2);
    if doc.tokens.len() <= keep {
        std::borrow::Cow::Borrowed(doc)
    } else {
        let mut d = doc.clone();
        d.tokens.truncate(keep);
        d.bboxes.truncate(keep);
        std::borrow::Cow::Owned(d)
    }
}

/// Contrastive pretraining on pseudo-labels. Both encoders are updated;
/// returns `(doc, label)` encoders sharing a fresh lineage tag.
pub fn pretrain_contrastive(
    corpus: &Corpus,
    vocab: &Vocab,
    doc_params: ModelParams,
    label_params: ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    check_vocab(&doc_params, vocab)?;
    check_vocab(&label_params, vocab)?;
    let docs: Vec<&Document> = corpus.documents.iter().filter(|d| !d.tokens.is_empty()).collect();
    if docs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let d_max = doc_params.config.max_len;
    let l_max = label_params.config.max_len;
    let tokenized: Vec<TokenizedDoc> = docs.iter().map(|d| encode(d, vocab, d_max)).collect();
    let total = cfg.total_steps(docs.len());
    let tag = lineage_tag(cfg, &[&doc_params, &label_params]);
    let mut models = vec![doc_params, label_params];
    for m in &mut models {
        m.projection_trained = true;
        m.lineage = Some(tag.clone());
    }
    let mut step_fn = |_step: usize,
                       rng: &mut ChaCha8Rng,
                       models: &[ModelParams],
                       grads: &mut [ParamGrads],
                       _: &mut TrainReport|
     -> Result<f64, TrainError> {
        let idx = batch_indices(rng, docs.len(), cfg.batch_size);
        let mut pseudo = Vec::with_capacity(idx.len());
        for &i in &idx {
            let visible = visible_tokens(docs[i], d_max);
            let pl = sample_pseudo_label(&visible, rng, cfg.pseudo_label_p)?;
            pseudo.push(encode_tokens(pl.tokens.iter().map(String::as_str), vocab, l_max));
        }
        let doc_inputs: Vec<&TokenizedDoc> = idx.iter().map(|&i| &tokenized[i]).collect();
        let label_inputs: Vec<&TokenizedDoc> = pseudo.iter().collect();
        let enc_docs = encode_batch(&models[0], &doc_inputs, rng)?;
        let enc_labels = encode_batch(&models[1], &label_inputs, rng)?;
        let rows: Vec<usize> = (0..idx.len()).collect();
        contrastive_step(&enc_docs, &enc_labels, &rows, grads)
    };
    let (mut out, report) = run_loop(cfg, "cpt", total, models, &mut step_fn, None)?;
    let label = out.pop().expect("two models");
    let doc = out.pop().expect("two models");
    Ok((doc, label, report))
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub doc: ModelParams,
    pub label: ModelParams,
    pub report: TrainReport,
}

/// Supervised fine-tuning on the split's training classes; keeps the
/// encoders with the best validation macro-F1.
pub fn finetune(
    split: &ZeroShotSplit,
    corpus: &Corpus,
    vocab: &Vocab,
    doc_params: ModelParams,
    label_params: ModelParams,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if !matches!(cfg.objective, Objective::FinetuneContrastive | Objective::FinetuneCe) {
        return Err(TrainError::Config(format!(
            "finetune needs a finetune objective, got {}",
            cfg.objective.name()
        )));
    }
    split.validate(Some(corpus))?;
    check_vocab(&doc_params, vocab)?;
    check_vocab(&label_params, vocab)?;
    let train: BTreeSet<&str> = split.train_classes.iter().map(String::as_str).collect();
    let index = corpus.index();
    let mut docs: Vec<&Document> = Vec::with_capacity(split.train_docs.len());
    for id in &split.train_docs {
        let d = index
            .get(id.as_str())
            .ok_or_else(|| TrainError::Config(format!("train document `{id}` not in corpus")))?;
        docs.push(d);
    }
    if docs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let gold_names: Vec<&str> = docs.iter().map(|d| d.label.as_deref().unwrap_or_default()).collect();
    let d_max = doc_params.config.max_len;
    let l_max = label_params.config.max_len;
    let tokenized: Vec<TokenizedDoc> = docs.iter().map(|d| encode(d, vocab, d_max)).collect();
    let class_inputs: Vec<TokenizedDoc> = split
        .train_classes
        .iter()
        .map(|c| encode_label_text(c, vocab, l_max))
        .collect();
    let total = cfg.total_steps(docs.len());
    let tag = lineage_tag(cfg, &[&doc_params, &label_params]);
    let mut models = vec![doc_params, label_params];
    for m in &mut models {
        m.projection_trained = true;
        m.lineage = Some(tag.clone());
    }
    let guard = |name: &str, report: &mut TrainReport| -> Result<(), TrainError> {
        if !train.contains(name) {
            return Err(TrainError::Leakage(name.to_string()));
        }
        report.gradient_class_names.insert(name.to_string());
        Ok(())
    };
    let objective = cfg.objective;
    let mut step_fn = |_step: usize,
                       rng: &mut ChaCha8Rng,
                       models: &[ModelParams],
                       grads: &mut [ParamGrads],
                       report: &mut TrainReport|
     -> Result<f64, TrainError> {
        let idx = batch_indices(rng, docs.len(), cfg.batch_size);
        let doc_inputs: Vec<&TokenizedDoc> = idx.iter().map(|&i| &tokenized[i]).collect();
        match objective {
            Objective::FinetuneContrastive => {
                let mut unique: Vec<usize> = Vec::new();
                let mut rows = Vec::with_capacity(idx.len());
                for &i in &idx {
                    guard(gold_names[i], report)?;
                    let c = split
                        .train_classes
                        .iter()
                        .position(|n| n == gold_names[i])
                        .expect("guarded");
                    let u = match unique.iter().position(|&x| x == c) {
                        Some(u) => u,
                        None => {
                            unique.push(c);
                            unique.len() - 1
                        }
                    };
                    rows.push(u);
                }
                let label_inputs: Vec<&TokenizedDoc> = unique.iter().map(|&c| &class_inputs[c]).collect();
                let enc_docs = encode_batch(&models[0], &doc_inputs, rng)?;
                let enc_labels = encode_batch(&models[1], &label_inputs, rng)?;
                contrastive_step(&enc_docs, &enc_labels, &rows, grads)
            }
            _ => {
                for name in &split.train_classes {
                    guard(name, report)?;
                }
                let gold: Vec<usize> = idx
                    .iter()
                    .map(|&i| {
                        guard(gold_names[i], report)?;
                        Ok(split
                            .train_classes
                            .iter()
                            .position(|n| n == gold_names[i])
                            .expect("guarded"))
                    })
                    .collect::<Result<_, TrainError>>()?;
                let label_inputs: Vec<&TokenizedDoc> = class_inputs.iter().collect();
                let enc_docs = encode_batch(&models[0], &doc_inputs, rng)?;
                let enc_labels = encode_batch(&models[1], &label_inputs, rng)?;
                let u = &enc_labels.vectors;
                let mut d_docs = Tensor::zeros(enc_docs.vectors.rows(), enc_docs.vectors.cols());
                let mut d_labels = Tensor::zeros(u.rows(), u.cols());
                let mut loss = 0.0;
                for (r, &g) in gold.iter().enumerate() {
                    let dv = enc_docs.vectors.row(r);
                    let (l, ds) = ce_matching_loss_and_grad(dv, u, g)?;
                    loss += l;
                    for (c, &s) in ds.iter().enumerate() {
                        for k in 0..dv.len() {
                            d_docs.row_mut(r)[k] += s * u.get(c, k);
                            d_labels.row_mut(c)[k] += s * dv[k];
                        }
                    }
                }
                let (doc_grads, label_grads) = grads.split_at_mut(1);
                enc_docs.backward(&d_docs, &mut doc_grads[0])?;
                enc_labels.backward(&d_labels, &mut label_grads[0])?;
                Ok(loss)
            }
        }
    };
    let mut eval = |models: &[ModelParams]| -> Result<f64, TrainError> {
        Ok(evaluate_part(split, Part::Val, corpus, &models[0], &models[1], vocab, cfg.threads)?.macro_f1)
    };
    let (mut out, report) = run_loop(cfg, objective.name(), total, models, &mut step_fn, Some(&mut eval))?;
    let label = out.pop().expect("two models");
    let doc = out.pop().expect("two models");
    Ok(FinetuneOutcome { doc, label, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let (t, peak) = (100, 1e-3);
        assert_eq!(lr_at(0, t, peak, 0.1), 0.0);
        assert!((lr_at(10, t, peak, 0.1) - peak).abs() < 1e-15);
        assert!((lr_at(5, t, peak, 0.1) - peak / 2.0).abs() < 1e-15);
        assert!((lr_at(55, t, peak, 0.1) - peak / 2.0).abs() < 1e-15);
        assert_eq!(lr_at(100, t, peak, 0.1), 0.0);
        assert_eq!(lr_at(0, t, peak, 0.0), peak);
    }

    #[test]
    fn config_guards() {
        let mut c = TrainConfig::desk(Objective::Cpt);
        c.batch_size = 1;
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
        let mut c = TrainConfig::desk(Objective::Mlm);
        c.peak_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk(Objective::Mlm);
        c.warmup_fraction = 1.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::full_scale(Objective::FinetuneCe).validate().is_ok());
    }

    #[test]
    fn epochs_convert_to_steps() {
        let c = TrainConfig::desk(Objective::FinetuneCe);
        assert_eq!(c.total_steps(1600), 1000);
        assert_eq!(c.total_steps(1), 1);
    }

    #[test]
    fn metric_records_round_trip() {
        let recs = [
            MetricRecord::Step {
                step: 3,
                loss: 1.5,
                lr: 1e-4,
            },
            MetricRecord::Eval {
                step: 4,
                val_macro_f1: 0.25,
            },
        ];
        for r in recs {
            let s = serde_json::to_string(&r).unwrap();
            assert_eq!(serde_json::from_str::<MetricRecord>(&s).unwrap(), r);
        }
        let s = serde_json::to_string(&recs_first()).unwrap();
        assert_eq!(s, r#"{"step":3,"loss":1.5,"lr":0.0001}"#);
    }

    fn recs_first() -> MetricRecord {
        MetricRecord::Step {
            step: 3,
            loss: 1.5,
            lr: 1e-4,
        }
    }
}
