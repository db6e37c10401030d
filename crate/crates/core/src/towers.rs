//! Two-tower embedding model.
//!
//! Query tower: trigram bag, word bag and country embedding, fused by
//! attention. Document tower: trigram bag, word bag, a context token
//! (affine → ReLU → batch norm → affine over price/category/age) and an image
//! token (shared affine+ReLU per image, summed, projected), fused the same
//! way. Both outputs are L2-normalized so cosine similarity is a dot product.
//!
//! Forward passes keep the intermediates needed by [`BatchForward::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{DocumentFeatures, FeatureConfig, QueryFeatures};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{what} id {id} out of range ({rows} rows)")]
    IdOutOfRange { what: &'static str, id: u32, rows: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("attention fusion needs at least one part")]
    NoParts,
    #[error("train-mode batch normalization needs at least 2 documents, got {0}")]
    BatchTooSmall(usize),
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("count mismatch: {0} queries vs {1} documents")]
    CountMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub fusion_hidden: usize,
    pub context_hidden: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            fusion_hidden: 64,
            context_hidden: 32,
            dropout_rate: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.fusion_hidden == 0 || self.context_hidden == 0 {
            return Err(ModelError::InvalidConfig("dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig("dropout_rate must lie in [0, 1)".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || self.bn_eps <= 0.0 {
            return Err(ModelError::InvalidConfig("bad batch-norm momentum/eps".into()));
        }
        Ok(())
    }
}

/// Optimizer group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    QueryTrigrams,
    QueryWords,
    Country,
    DocTrigrams,
    DocWords,
    CtxW1,
    CtxB1,
    BnGamma,
    BnBeta,
    CtxW2,
    CtxB2,
    ImgW1,
    ImgB1,
    ImgW2,
    ImgB2,
    QueryAttention,
    DocAttention,
}

impl ParamId {
    pub const ALL: [ParamId; 17] = [
        ParamId::QueryTrigrams,
        ParamId::QueryWords,
        ParamId::Country,
        ParamId::DocTrigrams,
        ParamId::DocWords,
        ParamId::CtxW1,
        ParamId::CtxB1,
        ParamId::BnGamma,
        ParamId::BnBeta,
        ParamId::CtxW2,
        ParamId::CtxB2,
        ParamId::ImgW1,
        ParamId::ImgB1,
        ParamId::ImgW2,
        ParamId::ImgB2,
        ParamId::QueryAttention,
        ParamId::DocAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::QueryTrigrams => "query.trigram_table",
            ParamId::QueryWords => "query.word_table",
            ParamId::Country => "query.country_table",
            ParamId::DocTrigrams => "doc.trigram_table",
            ParamId::DocWords => "doc.word_table",
            ParamId::CtxW1 => "doc.context.w1",
            ParamId::CtxB1 => "doc.context.b1",
            ParamId::BnGamma => "doc.context.bn.gamma",
            ParamId::BnBeta => "doc.context.bn.beta",
            ParamId::CtxW2 => "doc.context.w2",
            ParamId::CtxB2 => "doc.context.b2",
            ParamId::ImgW1 => "doc.image.w1",
            ParamId::ImgB1 => "doc.image.b1",
            ParamId::ImgW2 => "doc.image.w2",
            ParamId::ImgB2 => "doc.image.b2",
            ParamId::QueryAttention => "query.attention",
            ParamId::DocAttention => "doc.attention",
        }
    }

    /// Word/trigram tables train at the encoder rate, everything else at the
    /// "other" rate.
    pub fn group(self) -> ParamGroup {
        match self {
            ParamId::QueryTrigrams | ParamId::QueryWords | ParamId::DocTrigrams | ParamId::DocWords => {
                ParamGroup::Encoder
            }
            _ => ParamGroup::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name: name.to_owned(), shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn row(&self, r: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }
}

/// Batch-norm running statistics (not trained by the optimizer).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tensors: Vec<Tensor>,
    pub bn: BatchNormStats,
    pub embed_dim: usize,
    pub dropout_rate: f64,
}

impl ModelParams {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id as usize]
    }

    /// Rounds every value to the nearest `f32`, the storage precision of
    /// checkpoints.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for v in self.bn.running_mean.iter_mut().chain(self.bn.running_var.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
            && self.bn.running_mean.iter().all(|v| v.is_finite())
            && self.bn.running_var.iter().all(|&v| v.is_finite() && v > 0.0)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Tensor shapes in `ParamId::ALL` order. Matrices are `[out, in]`, tables
/// `[rows, embed_dim]`.
pub fn param_shapes(cfg: &ModelConfig, feat: &FeatureConfig) -> Vec<Vec<usize>> {
    let d = cfg.embed_dim;
    vec![
        vec![feat.trigram_buckets, d],
        vec![feat.word_buckets, d],
        vec![feat.country_vocab_size, d],
        vec![feat.trigram_buckets, d],
        vec![feat.word_buckets, d],
        vec![cfg.context_hidden, feat.context_dim_out],
        vec![cfg.context_hidden],
        vec![cfg.context_hidden],
        vec![cfg.context_hidden],
        vec![d, cfg.context_hidden],
        vec![d],
        vec![cfg.fusion_hidden, feat.image_dim],
        vec![cfg.fusion_hidden],
        vec![d, cfg.fusion_hidden],
        vec![d],
        vec![d],
        vec![d],
    ]
}

/// Deterministic initialization from `cfg.init_seed`.
pub fn init_params(cfg: &ModelConfig, feat: &FeatureConfig) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let shapes = param_shapes(cfg, feat);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut tensors = Vec::with_capacity(shapes.len());
    for (id, shape) in ParamId::ALL.into_iter().zip(shapes) {
        let mut t = Tensor::zeros(id.name(), shape);
        let bound = match id {
            ParamId::QueryTrigrams
            | ParamId::QueryWords
            | ParamId::Country
            | ParamId::DocTrigrams
            | ParamId::DocWords => Some(0.05),
            ParamId::BnGamma | ParamId::BnBeta => None,
            ParamId::CtxB1 => Some(1.0 / (feat.context_dim_out as f64).sqrt()),
            ParamId::CtxB2 => Some(1.0 / (cfg.context_hidden as f64).sqrt()),
            ParamId::ImgB1 => Some(1.0 / (feat.image_dim as f64).sqrt()),
            ParamId::ImgB2 => Some(1.0 / (cfg.fusion_hidden as f64).sqrt()),
            ParamId::QueryAttention | ParamId::DocAttention => Some(1.0 / (d as f64).sqrt()),
            // matrices: fan-in is the column count
            _ => Some(1.0 / (t.shape[1] as f64).sqrt()),
        };
        match bound {
            Some(b) => t.data.iter_mut().for_each(|v| *v = rng.gen_range(-b..b)),
            None if id == ParamId::BnGamma => t.data.fill(1.0),
            None => {}
        }
        tensors.push(t);
    }
    let mut params = ModelParams {
        tensors,
        bn: BatchNormStats {
            running_mean: vec![0.0; cfg.context_hidden],
            running_var: vec![1.0; cfg.context_hidden],
            momentum: cfg.bn_momentum,
            eps: cfg.bn_eps,
        },
        embed_dim: d,
        dropout_rate: cfg.dropout_rate,
    };
    params.round_to_f32();
    Ok(params)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// `W x + b` with `W` row-major `[out][in]`.
fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.shape[0]).map(|r| dot(w.row(r), x) + b.data[r]).collect()
}

/// Accumulates `W += g xᵀ`, `b += g` and returns `Wᵀ g`.
fn affine_backward(w: &Tensor, gw: &mut [f64], gb: &mut [f64], x: &[f64], g: &[f64]) -> Vec<f64> {
    let cols = w.shape[1];
    let mut gx = vec![0.0; cols];
    for (r, &gr) in g.iter().enumerate() {
        gb[r] += gr;
        if gr == 0.0 {
            continue;
        }
        axpy(gr, x, &mut gw[r * cols..(r + 1) * cols]);
        axpy(gr, w.row(r), &mut gx);
    }
    gx
}

/// Sum of table rows for `ids`, with multiplicity; empty → zero vector.
pub fn bag_embed(table: &Tensor, ids: &[u32]) -> Result<Vec<f64>, ModelError> {
    let (rows, d) = (table.shape[0], table.shape[1]);
    let mut out = vec![0.0; d];
    for &id in ids {
        if id as usize >= rows {
            return Err(ModelError::IdOutOfRange { what: "bag", id, rows });
        }
        axpy(1.0, table.row(id as usize), &mut out);
    }
    Ok(out)
}

/// Softmax over `⟨score, part_k⟩`, returning the fused vector and weights.
pub fn attention_fuse(parts: &[Vec<f64>], score: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if parts.is_empty() {
        return Err(ModelError::NoParts);
    }
    for p in parts {
        if p.len() != score.len() {
            return Err(ModelError::Dim { expected: score.len(), got: p.len() });
        }
    }
    let logits: Vec<f64> = parts.iter().map(|p| dot(score, p)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut out = vec![0.0; score.len()];
    for (w, p) in weights.iter().zip(parts) {
        axpy(*w, p, &mut out);
    }
    Ok((out, weights))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a generator seeded with `seed`.
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
struct FusedTower {
    masks: Option<Vec<Vec<f64>>>,
    parts: Vec<Vec<f64>>,
    weights: Vec<f64>,
    norm: f64,
    out: Vec<f64>,
}

fn fuse_tower(
    raw: Vec<Vec<f64>>,
    score: &[f64],
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<FusedTower, ModelError> {
    let (parts, masks) = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let masks: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| r.iter().map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect())
                .collect();
            let parts = raw
                .iter()
                .zip(&masks)
                .map(|(r, m)| r.iter().zip(m).map(|(a, b)| a * b).collect())
                .collect();
            (parts, Some(masks))
        }
        _ => (raw, None),
    };
    let (u, weights) = attention_fuse(&parts, score)?;
    let norm = dot(&u, &u).sqrt();
    if norm < 1e-12 {
        return Err(ModelError::ZeroNorm);
    }
    let out = u.iter().map(|v| v / norm).collect();
    Ok(FusedTower { masks, parts, weights, norm, out })
}

/// Returns gradients w.r.t. the raw (pre-dropout) parts; accumulates the
/// attention score-vector gradient into `g_score`.
fn fuse_tower_backward(t: &FusedTower, score: &[f64], g_out: &[f64], g_score: &mut [f64]) -> Vec<Vec<f64>> {
    // through L2 normalization
    let proj = dot(&t.out, g_out);
    let gu: Vec<f64> = g_out.iter().zip(&t.out).map(|(g, o)| (g - o * proj) / t.norm).collect();
    // through the weighted sum and softmax
    let gw: Vec<f64> = t.parts.iter().map(|p| dot(&gu, p)).collect();
    let mean_gw = dot(&t.weights, &gw);
    let mut grads = Vec::with_capacity(t.parts.len());
    for (k, part) in t.parts.iter().enumerate() {
        let glogit = t.weights[k] * (gw[k] - mean_gw);
        axpy(glogit, part, g_score);
        let mut gp: Vec<f64> = gu.iter().map(|g| g * t.weights[k]).collect();
        axpy(glogit, score, &mut gp);
        if let Some(m) = &t.masks {
            gp.iter_mut().zip(&m[k]).for_each(|(g, m)| *g *= m);
        }
        grads.push(gp);
    }
    grads
}

#[derive(Debug, Clone)]
struct ContextForward {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    normed: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    train: bool,
    tokens: Vec<Vec<f64>>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

fn context_forward(contexts: &[&[f64]], p: &ModelParams, train: bool) -> Result<ContextForward, ModelError> {
    let w1 = p.get(ParamId::CtxW1);
    for c in contexts {
        if c.len() != w1.shape[1] {
            return Err(ModelError::Dim { expected: w1.shape[1], got: c.len() });
        }
    }
    let n = contexts.len();
    if train && n < 2 {
        return Err(ModelError::BatchTooSmall(n));
    }
    let b1 = p.get(ParamId::CtxB1);
    let pre: Vec<Vec<f64>> = contexts.iter().map(|c| affine(w1, b1, c)).collect();
    let relu: Vec<Vec<f64>> = pre.iter().map(|h| h.iter().map(|v| v.max(0.0)).collect()).collect();
    let h = w1.shape[0];
    let eps = p.bn.eps;
    let (mean, var_biased, var_unbiased) = if train {
        let mut mean = vec![0.0; h];
        for r in &relu {
            axpy(1.0 / n as f64, r, &mut mean);
        }
        let mut var = vec![0.0; h];
        for r in &relu {
            for j in 0..h {
                var[j] += (r[j] - mean[j]).powi(2) / n as f64;
            }
        }
        let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
        (mean, var, unbiased)
    } else {
        (p.bn.running_mean.clone(), p.bn.running_var.clone(), Vec::new())
    };
    let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gamma = &p.get(ParamId::BnGamma).data;
    let beta = &p.get(ParamId::BnBeta).data;
    let xhat: Vec<Vec<f64>> = relu
        .iter()
        .map(|r| (0..h).map(|j| (r[j] - mean[j]) * inv_std[j]).collect())
        .collect();
    let normed: Vec<Vec<f64>> =
        xhat.iter().map(|x| (0..h).map(|j| gamma[j] * x[j] + beta[j]).collect()).collect();
    let (w2, b2) = (p.get(ParamId::CtxW2), p.get(ParamId::CtxB2));
    let tokens = normed.iter().map(|y| affine(w2, b2, y)).collect();
    Ok(ContextForward {
        inputs: contexts.iter().map(|c| c.to_vec()).collect(),
        pre,
        xhat,
        normed,
        inv_std,
        train,
        tokens,
        batch_mean: if train { mean } else { Vec::new() },
        batch_var_unbiased: var_unbiased,
    })
}

fn context_backward(c: &ContextForward, p: &ModelParams, g_tokens: &[Vec<f64>], grads: &mut Grads) {
    let n = c.tokens.len() as f64;
    let h = c.inv_std.len();
    let w2 = p.get(ParamId::CtxW2);
    let mut g_xhat = Vec::with_capacity(c.tokens.len());
    {
        let gamma = &p.get(ParamId::BnGamma).data;
        for (i, g) in g_tokens.iter().enumerate() {
            let (gw2, gb2) = grads.pair_mut(ParamId::CtxW2, ParamId::CtxB2);
            let g_normed = affine_backward(w2, gw2, gb2, &c.normed[i], g);
            let (ggamma, gbeta) = grads.pair_mut(ParamId::BnGamma, ParamId::BnBeta);
            for j in 0..h {
                ggamma[j] += g_normed[j] * c.xhat[i][j];
                gbeta[j] += g_normed[j];
            }
            g_xhat.push((0..h).map(|j| g_normed[j] * gamma[j]).collect::<Vec<f64>>());
        }
    }
    let g_relu: Vec<Vec<f64>> = if c.train {
        let mut sum_g = vec![0.0; h];
        let mut sum_gx = vec![0.0; h];
        for (gx, x) in g_xhat.iter().zip(&c.xhat) {
            for j in 0..h {
                sum_g[j] += gx[j];
                sum_gx[j] += gx[j] * x[j];
            }
        }
        g_xhat
            .iter()
            .zip(&c.xhat)
            .map(|(gx, x)| {
                (0..h).map(|j| c.inv_std[j] / n * (n * gx[j] - sum_g[j] - x[j] * sum_gx[j])).collect()
            })
            .collect()
    } else {
        g_xhat.iter().map(|gx| (0..h).map(|j| gx[j] * c.inv_std[j]).collect()).collect()
    };
    let w1 = p.get(ParamId::CtxW1);
    for (i, gr) in g_relu.iter().enumerate() {
        let g_pre: Vec<f64> = gr.iter().zip(&c.pre[i]).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
        let (gw1, gb1) = grads.pair_mut(ParamId::CtxW1, ParamId::CtxB1);
        affine_backward(w1, gw1, gb1, &c.inputs[i], &g_pre);
    }
}

/// Context tokens for a batch of raw context vectors. Train mode uses batch
/// statistics (and needs ≥ 2 rows); eval mode uses the running statistics.
pub fn encode_context(contexts: &[&[f64]], p: &ModelParams, mode: Mode) -> Result<Vec<Vec<f64>>, ModelError> {
    Ok(context_forward(contexts, p, matches!(mode, Mode::Train { .. }))?.tokens)
}

#[derive(Debug, Clone)]
struct ImageForward {
    sorted: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    sum: Vec<f64>,
    token: Vec<f64>,
}

fn bytes_key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn image_forward(images: &[Vec<f64>], p: &ModelParams) -> Result<ImageForward, ModelError> {
    let (w1, b1) = (p.get(ParamId::ImgW1), p.get(ParamId::ImgB1));
    let d = p.embed_dim;
    if images.is_empty() {
        return Ok(ImageForward { sorted: vec![], pre: vec![], sum: vec![], token: vec![0.0; d] });
    }
    for v in images {
        if v.len() != w1.shape[1] {
            return Err(ModelError::Dim { expected: w1.shape[1], got: v.len() });
        }
    }
    // Fixed summation order makes the sum bitwise permutation-invariant.
    let mut sorted = images.to_vec();
    sorted.sort_by_cached_key(|v| bytes_key(v));
    let pre: Vec<Vec<f64>> = sorted.iter().map(|v| affine(w1, b1, v)).collect();
    let mut sum = vec![0.0; w1.shape[0]];
    for h in &pre {
        sum.iter_mut().zip(h).for_each(|(s, v)| *s += v.max(0.0));
    }
    let token = affine(p.get(ParamId::ImgW2), p.get(ParamId::ImgB2), &sum);
    Ok(ImageForward { sorted, pre, sum, token })
}

fn image_backward(f: &ImageForward, p: &ModelParams, g: &[f64], grads: &mut Grads) {
    if f.sorted.is_empty() {
        return;
    }
    let (gw2, gb2) = grads.pair_mut(ParamId::ImgW2, ParamId::ImgB2);
    let g_sum = affine_backward(p.get(ParamId::ImgW2), gw2, gb2, &f.sum, g);
    let w1 = p.get(ParamId::ImgW1);
    for (v, pre) in f.sorted.iter().zip(&f.pre) {
        let gh: Vec<f64> = g_sum.iter().zip(pre).map(|(g, h)| if *h > 0.0 { *g } else { 0.0 }).collect();
        let (gw1, gb1) = grads.pair_mut(ParamId::ImgW1, ParamId::ImgB1);
        affine_backward(w1, gw1, gb1, v, &gh);
    }
}

/// Deep-sets image token: shared affine+ReLU per image, summed, projected.
/// No images → zero vector.
pub fn fuse_images(images: &[Vec<f64>], p: &ModelParams) -> Result<Vec<f64>, ModelError> {
    Ok(image_forward(images, p)?.token)
}

fn query_parts(f: &QueryFeatures, p: &ModelParams) -> Result<Vec<Vec<f64>>, ModelError> {
    let country = p.get(ParamId::Country);
    if f.country_id as usize >= country.shape[0] {
        return Err(ModelError::IdOutOfRange { what: "country", id: f.country_id, rows: country.shape[0] });
    }
    Ok(vec![
        bag_embed(p.get(ParamId::QueryTrigrams), &f.trigram_ids)?,
        bag_embed(p.get(ParamId::QueryWords), &f.word_ids)?,
        country.row(f.country_id as usize).to_vec(),
    ])
}

fn dropout_rng(mode: Mode) -> Option<ChaCha8Rng> {
    match mode {
        Mode::Eval => None,
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    }
}

/// Unit-norm query embedding.
pub fn embed_query(f: &QueryFeatures, p: &ModelParams, mode: Mode) -> Result<Vec<f64>, ModelError> {
    let mut rng = dropout_rng(mode);
    let drop = rng.as_mut().map(|r| (p.dropout_rate, r));
    Ok(fuse_tower(query_parts(f, p)?, &p.get(ParamId::QueryAttention).data, drop)?.out)
}

/// Unit-norm document embeddings for a batch (train mode needs ≥ 2 docs for
/// batch normalization).
pub fn embed_documents(fs: &[&DocumentFeatures], p: &ModelParams, mode: Mode) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut rng = dropout_rng(mode);
    let ctx = context_forward(
        &fs.iter().map(|f| f.context_raw.as_slice()).collect::<Vec<_>>(),
        p,
        rng.is_some(),
    )?;
    let mut out = Vec::with_capacity(fs.len());
    for (f, token) in fs.iter().zip(ctx.tokens) {
        let parts = vec![
            bag_embed(p.get(ParamId::DocTrigrams), &f.trigram_ids)?,
            bag_embed(p.get(ParamId::DocWords), &f.word_ids)?,
            token,
            fuse_images(&f.image_vectors, p)?,
        ];
        let drop = rng.as_mut().map(|r| (p.dropout_rate, r));
        out.push(fuse_tower(parts, &p.get(ParamId::DocAttention).data, drop)?.out);
    }
    Ok(out)
}

/// Eval-mode embedding of a single document.
pub fn embed_document(f: &DocumentFeatures, p: &ModelParams) -> Result<Vec<f64>, ModelError> {
    Ok(embed_documents(&[f], p, Mode::Eval)?.remove(0))
}

/// `(i, j) = ⟨q_i, d_j⟩`; rows are queries, columns documents.
pub fn cosine_matrix(queries: &[Vec<f64>], docs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
    if queries.len() != docs.len() {
        return Err(ModelError::CountMismatch(queries.len(), docs.len()));
    }
    Ok(queries.iter().map(|q| docs.iter().map(|d| dot(q, d)).collect()).collect())
}

/// Dense gradient buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Self { tensors: p.tensors.iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.tensors[id as usize]
    }

    fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [f64], &mut [f64]) {
        let (ia, ib) = (a as usize, b as usize);
        assert!(ia < ib);
        let (lo, hi) = self.tensors.split_at_mut(ib);
        (&mut lo[ia], &mut hi[0])
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Forward pass over a batch of (query, document) pairs, retaining what the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchForward {
    queries: Vec<FusedTower>,
    docs: Vec<FusedTower>,
    context: ContextForward,
    images: Vec<ImageForward>,
    query_ids: Vec<(Vec<u32>, Vec<u32>, u32)>,
    doc_ids: Vec<(Vec<u32>, Vec<u32>)>,
}

impl BatchForward {
    pub fn run(
        pairs: &[(&QueryFeatures, &DocumentFeatures)],
        p: &ModelParams,
        mode: Mode,
    ) -> Result<Self, ModelError> {
        let mut rng = dropout_rng(mode);
        let train = rng.is_some();
        let contexts: Vec<&[f64]> = pairs.iter().map(|(_, d)| d.context_raw.as_slice()).collect();
        let context = context_forward(&contexts, p, train)?;
        let mut queries = Vec::with_capacity(pairs.len());
        let mut docs = Vec::with_capacity(pairs.len());
        let mut images = Vec::with_capacity(pairs.len());
        for (i, (qf, df)) in pairs.iter().enumerate() {
            let drop = rng.as_mut().map(|r| (p.dropout_rate, r));
            queries.push(fuse_tower(query_parts(qf, p)?, &p.get(ParamId::QueryAttention).data, drop)?);
            let img = image_forward(&df.image_vectors, p)?;
            let parts = vec![
                bag_embed(p.get(ParamId::DocTrigrams), &df.trigram_ids)?,
                bag_embed(p.get(ParamId::DocWords), &df.word_ids)?,
                context.tokens[i].clone(),
                img.token.clone(),
            ];
            let drop = rng.as_mut().map(|r| (p.dropout_rate, r));
            docs.push(fuse_tower(parts, &p.get(ParamId::DocAttention).data, drop)?);
            images.push(img);
        }
        Ok(Self {
            queries,
            docs,
            context,
            images,
            query_ids: pairs
                .iter()
                .map(|(q, _)| (q.trigram_ids.clone(), q.word_ids.clone(), q.country_id))
                .collect(),
            doc_ids: pairs.iter().map(|(_, d)| (d.trigram_ids.clone(), d.word_ids.clone())).collect(),
        })
    }

    pub fn query_embeddings(&self) -> Vec<Vec<f64>> {
        self.queries.iter().map(|t| t.out.clone()).collect()
    }

    pub fn doc_embeddings(&self) -> Vec<Vec<f64>> {
        self.docs.iter().map(|t| t.out.clone()).collect()
    }

    /// Attention weights of every tower in the batch (queries then documents).
    pub fn attention_weights(&self) -> impl Iterator<Item = &[f64]> {
        self.queries.iter().chain(&self.docs).map(|t| t.weights.as_slice())
    }

    /// Running statistics after this batch under momentum update; `None` in
    /// eval mode.
    pub fn updated_bn(&self, bn: &BatchNormStats) -> Option<BatchNormStats> {
        if !self.context.train {
            return None;
        }
        let m = bn.momentum;
        let mix = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter().zip(new).map(|(o, n)| ((1.0 - m) * o + m * n) as f32 as f64).collect()
        };
        Some(BatchNormStats {
            running_mean: mix(&bn.running_mean, &self.context.batch_mean),
            running_var: mix(&bn.running_var, &self.context.batch_var_unbiased),
            momentum: m,
            eps: bn.eps,
        })
    }

    /// Reverse pass given gradients of the loss w.r.t. the normalized query
    /// and document embeddings.
    pub fn backward(&self, p: &ModelParams, g_queries: &[Vec<f64>], g_docs: &[Vec<f64>]) -> Grads {
        let mut grads = Grads::zeros_like(p);
        let d = p.embed_dim;
        let add_bag = |g: &mut [f64], ids: &[u32], gp: &[f64]| {
            for &id in ids {
                axpy(1.0, gp, &mut g[id as usize * d..(id as usize + 1) * d]);
            }
        };
        let q_score = &p.get(ParamId::QueryAttention).data;
        let d_score = &p.get(ParamId::DocAttention).data;
        let mut g_tokens = Vec::with_capacity(self.docs.len());
        for i in 0..self.queries.len() {
            let gq = fuse_tower_backward(
                &self.queries[i],
                q_score,
                &g_queries[i],
                grads.get_mut(ParamId::QueryAttention),
            );
            let (tri, words, country) = &self.query_ids[i];
            add_bag(grads.get_mut(ParamId::QueryTrigrams), tri, &gq[0]);
            add_bag(grads.get_mut(ParamId::QueryWords), words, &gq[1]);
            add_bag(grads.get_mut(ParamId::Country), &[*country], &gq[2]);

            let gd = fuse_tower_backward(&self.docs[i], d_score, &g_docs[i], grads.get_mut(ParamId::DocAttention));
            let (tri, words) = &self.doc_ids[i];
            add_bag(grads.get_mut(ParamId::DocTrigrams), tri, &gd[0]);
            add_bag(grads.get_mut(ParamId::DocWords), words, &gd[1]);
            g_tokens.push(gd[2].clone());
            image_backward(&self.images[i], p, &gd[3], &mut grads);
        }
        context_backward(&self.context, p, &g_tokens, &mut grads);
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> ModelParams {
        let feat = FeatureConfig { trigram_buckets: 64, word_buckets: 32, country_vocab_size: 4, image_dim: 3, context_dim_out: 5, ..Default::default() };
        let cfg = ModelConfig { embed_dim: 8, fusion_hidden: 6, context_hidden: 4, ..Default::default() };
        init_params(&cfg, &feat).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = small_params();
        assert_eq!(a, small_params());
        assert!(a.all_finite());
        for v in &a.get(ParamId::QueryTrigrams).data {
            assert!(v.abs() <= 0.05);
        }
        assert!(a.get(ParamId::BnGamma).data.iter().all(|&g| g == 1.0));
        let encoder = ParamId::ALL.iter().filter(|id| id.group() == ParamGroup::Encoder).count();
        assert_eq!(encoder, 4);
        assert_eq!(a.tensors.len(), ParamId::ALL.len());
    }

    #[test]
    fn bag_embed_cases() {
        let p = small_params();
        let t = p.get(ParamId::QueryWords);
        assert_eq!(bag_embed(t, &[3]).unwrap(), t.row(3));
        let two: Vec<f64> = t.row(3).iter().map(|v| 2.0 * v).collect();
        assert_eq!(bag_embed(t, &[3, 3]).unwrap(), two);
        assert_eq!(bag_embed(t, &[]).unwrap(), vec![0.0; 8]);
        assert!(matches!(bag_embed(t, &[32]), Err(ModelError::IdOutOfRange { .. })));
    }

    #[test]
    fn attention_cases() {
        let part = vec![1.0, -2.0, 0.5];
        let (out, w) = attention_fuse(&[part.clone()], &[0.3, 0.1, 9.0]).unwrap();
        assert_eq!(out, part);
        assert_eq!(w, vec![1.0]);
        let parts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (out, _) = attention_fuse(&parts, &[1.0, 1.0]).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
        assert_eq!(attention_fuse(&[], &[1.0]), Err(ModelError::NoParts));
        assert!(matches!(attention_fuse(&[vec![1.0]], &[1.0, 2.0]), Err(ModelError::Dim { .. })));
    }

    #[test]
    fn batch_norm_modes() {
        let p = small_params();
        let a = [0.5, 1.0, 0.0, 0.0, 3.0];
        let b = [2.0, 0.0, 1.0, 0.0, 10.0];
        assert_eq!(encode_context(&[&a], &p, Mode::Train { seed: 0 }), Err(ModelError::BatchTooSmall(1)));
        let alone = encode_context(&[&a], &p, Mode::Eval).unwrap();
        let paired = encode_context(&[&a, &b], &p, Mode::Eval).unwrap();
        assert_eq!(alone[0], paired[0]);
        let same = encode_context(&[&a, &a, &a], &p, Mode::Train { seed: 0 }).unwrap();
        assert!(same.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_norm_identity_with_default_running_stats() {
        let mut p = small_params();
        p.bn.eps = 0.0;
        let c = [0.5, 1.0, 0.0, 0.0, 3.0];
        let w1 = p.get(ParamId::CtxW1);
        let hidden: Vec<f64> = affine(w1, p.get(ParamId::CtxB1), &c).iter().map(|v| v.max(0.0)).collect();
        let expected = affine(p.get(ParamId::CtxW2), p.get(ParamId::CtxB2), &hidden);
        let got = encode_context(&[&c], &p, Mode::Eval).unwrap();
        for (g, e) in got[0].iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn image_token_cases() {
        let p = small_params();
        assert_eq!(fuse_images(&[], &p).unwrap(), vec![0.0; 8]);
        let v = vec![0.2, -0.4, 0.9];
        let hidden: Vec<f64> = affine(p.get(ParamId::ImgW1), p.get(ParamId::ImgB1), &v).iter().map(|x| x.max(0.0)).collect();
        let expected = affine(p.get(ParamId::ImgW2), p.get(ParamId::ImgB2), &hidden);
        assert_eq!(fuse_images(&[v], &p).unwrap(), expected);
        assert!(matches!(fuse_images(&[vec![1.0]], &p), Err(ModelError::Dim { .. })));
    }

    #[test]
    fn cosine_matrix_cases() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = cosine_matrix(&e, &e).unwrap();
        assert_eq!(m, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(cosine_matrix(&e, &e[..1]).is_err());
    }
}
