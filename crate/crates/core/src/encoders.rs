//! Transformer encoders for documents and labels.
//!
//! Both encoders share one architecture: token + 1-D position embeddings,
//! plus x/y centroid embeddings when `use_layout` is set, followed by post-LN
//! transformer layers. The `[CLS]` hidden state, passed through an affine
//! projection, is the encoding. Document and label encoders never share
//! parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Checkpoint, CheckpointMeta, Graph, NodeId, NumericsError, ParamStore, Tensor};
use crate::tokenizer::{TokenizedDoc, COORD_BINS, COORD_MAX};

pub const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error("encoder input: {0}")]
    Input(String),
    #[error("checkpoint does not hold encoder weights: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub proj_dim: usize,
    pub use_layout: bool,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Small CPU-friendly configuration.
    pub fn desk(vocab_size: usize, use_layout: bool) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            max_len: 128,
            vocab_size,
            proj_dim: 64,
            use_layout,
            dropout: 0.1,
        }
    }

    /// Six-layer BERT-base-width model with a 768-d projection.
    pub fn full_scale(vocab_size: usize, use_layout: bool) -> Self {
        Self {
            n_layers: 6,
            d_model: 768,
            n_heads: 12,
            d_ff: 3072,
            max_len: 512,
            vocab_size,
            proj_dim: 768,
            use_layout,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("layer, width, head and feed-forward sizes must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.proj_dim == 0 {
            return bad("proj_dim must be positive".into());
        }
        if self.max_len < 3 {
            return bad(format!("max_len {} must be at least 3", self.max_len));
        }
        if self.vocab_size < crate::tokenizer::SPECIALS.len() {
            return bad(format!(
                "vocab_size {} smaller than the special tokens",
                self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerSlots {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Slots {
    tok: usize,
    pos: usize,
    xy: Option<(usize, usize)>,
    emb_ln_g: usize,
    emb_ln_b: usize,
    layers: Vec<LayerSlots>,
    proj_w: usize,
    proj_b: usize,
    mlm_bias: usize,
}

/// Registers every tensor for `config`, filled by `fill(name, rows, cols)`.
fn build_store(
    config: &EncoderConfig,
    mut fill: impl FnMut(&str, usize, usize) -> Result<Tensor, EncoderError>,
) -> Result<(ParamStore, Slots), EncoderError> {
    let (d, f) = (config.d_model, config.d_ff);
    let mut store = ParamStore::new();
    let mut add = |name: String, r: usize, c: usize, decay: bool| -> Result<usize, EncoderError> {
        let t = fill(&name, r, c)?;
        Ok(store.push(name, t, decay))
    };
    let tok = add("embeddings.token".into(), config.vocab_size, d, true)?;
    let pos = add("embeddings.position".into(), config.max_len, d, true)?;
    let xy = if config.use_layout {
        Some((
            add("embeddings.x".into(), COORD_BINS, d, true)?,
            add("embeddings.y".into(), COORD_BINS, d, true)?,
        ))
    } else {
        None
    };
    let emb_ln_g = add("embeddings.ln.gamma".into(), 1, d, false)?;
    let emb_ln_b = add("embeddings.ln.beta".into(), 1, d, false)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layer.{i}.{s}");
        layers.push(LayerSlots {
            wq: add(p("attn.wq"), d, d, true)?,
            bq: add(p("attn.bq"), 1, d, false)?,
            wk: add(p("attn.wk"), d, d, true)?,
            bk: add(p("attn.bk"), 1, d, false)?,
            wv: add(p("attn.wv"), d, d, true)?,
            bv: add(p("attn.bv"), 1, d, false)?,
            wo: add(p("attn.wo"), d, d, true)?,
            bo: add(p("attn.bo"), 1, d, false)?,
            ln1_g: add(p("ln1.gamma"), 1, d, false)?,
            ln1_b: add(p("ln1.beta"), 1, d, false)?,
            w1: add(p("ffn.w1"), d, f, true)?,
            b1: add(p("ffn.b1"), 1, f, false)?,
            w2: add(p("ffn.w2"), f, d, true)?,
            b2: add(p("ffn.b2"), 1, d, false)?,
            ln2_g: add(p("ln2.gamma"), 1, d, false)?,
            ln2_b: add(p("ln2.beta"), 1, d, false)?,
        });
    }
    let proj_w = add("projection.weight".into(), d, config.proj_dim, true)?;
    let proj_b = add("projection.bias".into(), 1, config.proj_dim, false)?;
    let mlm_bias = add("mlm.bias".into(), 1, config.vocab_size, false)?;
    Ok((
        store,
        Slots {
            tok,
            pos,
            xy,
            emb_ln_g,
            emb_ln_b,
            layers,
            proj_w,
            proj_b,
            mlm_bias,
        },
    ))
}

/// All learnable tensors of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
    slots: Slots,
    /// Set once a contrastive or fine-tuning objective has updated the projection.
    pub projection_trained: bool,
    /// Tag shared by encoders trained together.
    pub lineage: Option<String>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        // Box–Muller; reject beyond two standard deviations.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Truncated-normal weights (σ = 0.02), zero biases, unit norm gains; the x/y
/// coordinate tables then copy the 1-D position table, tiled when shorter
/// than the coordinate grid.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ModelParams, EncoderError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut store, slots) = build_store(config, |name, r, c| {
        let t = if name.ends_with("gamma") {
            Tensor::filled(r, c, 1.0)
        } else if r == 1 {
            Tensor::zeros(r, c)
        } else {
            let data = (0..r * c).map(|_| truncated_normal(&mut rng, INIT_STD)).collect();
            Tensor::new(r, c, data)?
        };
        Ok(t)
    })?;
    if let Some((xs, ys)) = slots.xy {
        let pos = store.tensor(slots.pos).clone();
        for slot in [xs, ys] {
            let table = store.tensor_mut(slot);
            for k in 0..COORD_BINS {
                table.row_mut(k).copy_from_slice(pos.row(k % config.max_len));
            }
        }
    }
    Ok(ModelParams {
        config: config.clone(),
        store,
        slots,
        projection_trained: false,
        lineage: None,
    })
}

/// Whether the encoding passes through the affine projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Projected,
    /// Raw `[CLS]` hidden state; used when the projection was never trained.
    Raw,
}

/// Nodes produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Final hidden states: `[L × d_model]`, or `[1 × d_model]` when only the
    /// `[CLS]` row was computed in the last layer.
    pub hidden: NodeId,
    /// `[1 × dim]` document or label vector.
    pub pooled: NodeId,
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn check_input(&self, tdoc: &TokenizedDoc) -> Result<(), EncoderError> {
        let n = tdoc.ids.len();
        if n == 0 || tdoc.xq.len() != n || tdoc.yq.len() != n {
            return Err(EncoderError::Input(format!(
                "ids/xq/yq lengths {}/{}/{} must be equal and non-zero",
                n,
                tdoc.xq.len(),
                tdoc.yq.len()
            )));
        }
        if n > self.config.max_len {
            return Err(EncoderError::Input(format!(
                "length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&id) = tdoc.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(EncoderError::Input(format!(
                "token id {id} outside vocab of {}",
                self.config.vocab_size
            )));
        }
        if let Some(&q) = tdoc.xq.iter().chain(&tdoc.yq).find(|&&q| q > COORD_MAX) {
            return Err(EncoderError::Input(format!("coordinate {q} outside [0, {COORD_MAX}]")));
        }
        Ok(())
    }

    /// Summed token, position and (optionally) centroid embeddings, then
    /// layer norm and dropout: `[L × d_model]`.
    pub fn embed_inputs<'a>(&'a self, g: &mut Graph<'a>, tdoc: &TokenizedDoc) -> Result<NodeId, EncoderError> {
        self.check_input(tdoc)?;
        let s = &self.slots;
        let p = |g: &mut Graph<'a>, slot: usize| g.param(slot, self.store.tensor(slot));
        let ids: Vec<usize> = tdoc.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok_table = p(g, s.tok);
        let pos_table = p(g, s.pos);
        let tok = g.gather(tok_table, &ids)?;
        let pos = g.gather(pos_table, &positions)?;
        let mut e = g.add(tok, pos)?;
        if let Some((xs, ys)) = s.xy {
            let xq: Vec<usize> = tdoc.xq.iter().map(|&q| q as usize).collect();
            let yq: Vec<usize> = tdoc.yq.iter().map(|&q| q as usize).collect();
            let xt = p(g, xs);
            let yt = p(g, ys);
            let xe = g.gather(xt, &xq)?;
            let ye = g.gather(yt, &yq)?;
            e = g.add(e, xe)?;
            e = g.add(e, ye)?;
        }
        let gam = p(g, s.emb_ln_g);
        let bet = p(g, s.emb_ln_b);
        let e = g.layer_norm(e, gam, bet, LN_EPS)?;
        Ok(g.dropout(e, self.config.dropout))
    }

    /// Full forward pass. With `all_hidden == false` the last layer computes
    /// only the `[CLS]` row, which is all pooling reads.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tdoc: &TokenizedDoc,
        pooling: Pooling,
        all_hidden: bool,
    ) -> Result<EncoderOutput, EncoderError> {
        let mut h = self.embed_inputs(g, tdoc)?;
        let n_layers = self.slots.layers.len();
        for (i, layer) in self.slots.layers.iter().enumerate() {
            let cls_only = !all_hidden && i + 1 == n_layers;
            h = self.layer(g, layer, h, cls_only)?;
        }
        let cls = if g.value(h).rows() == 1 {
            h
        } else {
            g.slice_rows(h, 0, 1)?
        };
        let pooled = match pooling {
            Pooling::Raw => cls,
            Pooling::Projected => {
                let w = g.param(self.slots.proj_w, self.store.tensor(self.slots.proj_w));
                let b = g.param(self.slots.proj_b, self.store.tensor(self.slots.proj_b));
                let z = g.matmul(cls, w)?;
                g.add_row(z, b)?
            }
        };
        Ok(EncoderOutput { hidden: h, pooled })
    }

    fn layer<'a>(
        &'a self,
        g: &mut Graph<'a>,
        l: &LayerSlots,
        h: NodeId,
        cls_only: bool,
    ) -> Result<NodeId, EncoderError> {
        let p = |g: &mut Graph<'a>, slot: usize| g.param(slot, self.store.tensor(slot));
        let affine = |g: &mut Graph<'a>, x: NodeId, w: usize, b: usize| -> Result<NodeId, EncoderError> {
            let wn = p(g, w);
            let bn = p(g, b);
            let y = g.matmul(x, wn)?;
            Ok(g.add_row(y, bn)?)
        };
        let query_in = if cls_only { g.slice_rows(h, 0, 1)? } else { h };
        let q = affine(g, query_in, l.wq, l.bq)?;
        let k = affine(g, h, l.wk, l.bk)?;
        let v = affine(g, h, l.wv, l.bv)?;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for hd in 0..self.config.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            let attn = g.dropout(attn, self.config.dropout);
            heads.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        let o = affine(g, ctx, l.wo, l.bo)?;
        let o = g.dropout(o, self.config.dropout);
        let r = g.add(query_in, o)?;
        let (g1, b1) = (p(g, l.ln1_g), p(g, l.ln1_b));
        let h1 = g.layer_norm(r, g1, b1, LN_EPS)?;
        let f = affine(g, h1, l.w1, l.b1)?;
        let f = g.gelu(f);
        let f = affine(g, f, l.w2, l.b2)?;
        let f = g.dropout(f, self.config.dropout);
        let r = g.add(h1, f)?;
        let (g2, b2) = (p(g, l.ln2_g), p(g, l.ln2_b));
        Ok(g.layer_norm(r, g2, b2, LN_EPS)?)
    }

    /// Masked-LM logits at `positions` of the final hidden states, using the
    /// token embedding table as the tied output matrix.
    pub fn mlm_logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        hidden: NodeId,
        positions: &[usize],
    ) -> Result<NodeId, EncoderError> {
        let sel = g.gather(hidden, positions)?;
        let emb = g.param(self.slots.tok, self.store.tensor(self.slots.tok));
        let bias = g.param(self.slots.mlm_bias, self.store.tensor(self.slots.mlm_bias));
        let logits = g.matmul_t(sel, emb)?;
        Ok(g.add_row(logits, bias)?)
    }

    /// Final hidden states `[L × d_model]` in evaluation mode.
    pub fn hidden_states(&self, tdoc: &TokenizedDoc) -> Result<Tensor, EncoderError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tdoc, Pooling::Projected, true)?;
        Ok(g.value(out.hidden).clone())
    }

    /// Evaluation-mode encoding as a plain vector.
    pub fn encode(&self, tdoc: &TokenizedDoc, pooling: Pooling) -> Result<Vec<f64>, EncoderError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tdoc, pooling, false)?;
        Ok(g.value(out.pooled).data().to_vec())
    }

    pub fn to_checkpoint(&self, kind: &str, step: u64) -> Checkpoint {
        let config = serde_json::to_value(&self.config).expect("config serializes");
        let mut meta = CheckpointMeta::new(kind, step, config);
        meta.lineage = self.lineage.clone();
        meta.extra.insert(
            "projection_trained".into(),
            serde_json::Value::Bool(self.projection_trained),
        );
        let mut ck = Checkpoint::new(meta);
        for e in self.store.entries() {
            ck.insert(format!("param/{}", e.name), e.value.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, EncoderError> {
        let config: EncoderConfig = serde_json::from_value(ck.meta.config.clone())
            .map_err(|e| EncoderError::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let (store, slots) = build_store(&config, |name, r, c| {
            let t = ck
                .get(&format!("param/{name}"))
                .ok_or_else(|| EncoderError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != [r, c] {
                return Err(EncoderError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected [{r}, {c}]",
                    t.shape()
                )));
            }
            Ok(t.clone())
        })?;
        let projection_trained = ck
            .meta
            .extra
            .get("projection_trained")
            .and_then(serde_json::Value::as_bool)
            .unwrap_or(false);
        Ok(Self {
            config,
            store,
            slots,
            projection_trained,
            lineage: ck.meta.lineage.clone(),
        })
    }

    /// Output dimension for a pooling mode.
    pub fn output_dim(&self, pooling: Pooling) -> usize {
        match pooling {
            Pooling::Projected => self.config.proj_dim,
            Pooling::Raw => self.config.d_model,
        }
    }

    /// Copies every tensor whose name and shape match from `other`.
    /// Returns how many tensors were copied.
    pub fn warm_start_from(&mut self, other: &ModelParams) -> usize {
        let mut copied = 0;
        for e in other.store.entries() {
            if let Some(slot) = self.store.slot_of(&e.name) {
                if self.store.tensor(slot).shape() == e.value.shape() {
                    *self.store.tensor_mut(slot) = e.value.clone();
                    copied += 1;
                }
            }
        }
        if let Some((xs, ys)) = self.slots.xy {
            if other.slots.xy.is_none() {
                let pos = self.store.tensor(self.slots.pos).clone();
                for slot in [xs, ys] {
                    let table = self.store.tensor_mut(slot);
                    for k in 0..COORD_BINS {
                        table.row_mut(k).copy_from_slice(pos.row(k % self.config.max_len));
                    }
                }
            }
        }
        copied
    }
}

/// Document encoder output (`Φ_doc`).
pub fn encode_document(tdoc: &TokenizedDoc, params: &ModelParams, pooling: Pooling) -> Result<Vec<f64>, EncoderError> {
    params.encode(tdoc, pooling)
}

/// Label encoder output (`Φ_label`); the encoder must be layout-free.
pub fn encode_label(tdoc: &TokenizedDoc, params: &ModelParams, pooling: Pooling) -> Result<Vec<f64>, EncoderError> {
    if params.config.use_layout {
        return Err(EncoderError::Config(
            "label encoder must have use_layout = false".into(),
        ));
    }
    params.encode(tdoc, pooling)
}
