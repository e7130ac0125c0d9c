//! Multi-head factorized attention (MHFA) pooling over all encoder layers.
//!
//! Forward pass for one utterance `X ∈ R^{L×T×D}`:
//!
//! ```text
//! K_feat = Σ_l softmax(w_k)_l · X_l          V_feat = Σ_l softmax(w_v)_l · X_l      (T×D)
//! K = K_feat · W_k                           V = V_feat · W_v                        (T×C)
//! A = softmax_over_time(K · W_att)                                                   (T×H)
//! P_h = Σ_t A[t,h] · V[t,:]                                                          (H×C)
//! e = vec(P) · W_out + b_out                                                         (E)
//! ```
//!
//! Every head pools the full compressed value stream; the `H·C` concatenation
//! feeds the output layer. During training the value features may be
//! re-styled by [`crate::dsu`] before compression, which couples instances
//! of a batch, so the batch functions are the primary entry points and the
//! single-instance ones are thin wrappers.

use std::ops::Deref;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsu::{self, DsuConfig, DsuNoise, DsuTrace};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Rng};
use crate::protocol::LayeredFeatures;

pub const DEFAULT_HEADS: usize = 32;
pub const DEFAULT_COMPRESSION_DIM: usize = 128;
pub const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhfaConfig {
    pub num_layers: usize,
    pub input_dim: usize,
    pub num_heads: usize,
    pub compression_dim: usize,
    pub embed_dim: usize,
}

impl MhfaConfig {
    /// 32 heads, 128-dim compression and 256-dim embeddings.
    pub fn new(num_layers: usize, input_dim: usize) -> Self {
        Self {
            num_layers,
            input_dim,
            num_heads: DEFAULT_HEADS,
            compression_dim: DEFAULT_COMPRESSION_DIM,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("input_dim", self.input_dim),
            ("num_heads", self.num_heads),
            ("compression_dim", self.compression_dim),
            ("embed_dim", self.embed_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("MHFA {name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        self.num_heads * self.compression_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhfaParams {
    /// Key-stream layer logits `w_k` (L).
    pub layer_keys: Vec<f64>,
    /// Value-stream layer logits `w_v` (L).
    pub layer_values: Vec<f64>,
    /// `W_k`, D×C.
    pub key_proj: Matrix,
    /// `W_v`, D×C.
    pub value_proj: Matrix,
    /// `W_att`, C×H.
    pub attention: Matrix,
    /// `W_out`, (H·C)×E.
    pub output: Matrix,
    /// `b_out`, E.
    pub output_bias: Vec<f64>,
}

impl MhfaParams {
    pub fn zeros(cfg: &MhfaConfig) -> Self {
        Self {
            layer_keys: vec![0.0; cfg.num_layers],
            layer_values: vec![0.0; cfg.num_layers],
            key_proj: Matrix::zeros(cfg.input_dim, cfg.compression_dim),
            value_proj: Matrix::zeros(cfg.input_dim, cfg.compression_dim),
            attention: Matrix::zeros(cfg.compression_dim, cfg.num_heads),
            output: Matrix::zeros(cfg.pooled_dim(), cfg.embed_dim),
            output_bias: vec![0.0; cfg.embed_dim],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            &self.layer_keys,
            &self.layer_values,
            self.key_proj.as_slice(),
            self.value_proj.as_slice(),
            self.attention.as_slice(),
            self.output.as_slice(),
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.layer_keys,
            &mut self.layer_values,
            self.key_proj.as_mut_slice(),
            self.value_proj.as_mut_slice(),
            self.attention.as_mut_slice(),
            self.output.as_mut_slice(),
            &mut self.output_bias,
        ]
    }

    pub fn matches(&self, cfg: &MhfaConfig) -> bool {
        let z = Self::zeros(cfg);
        self.tensors()
            .iter()
            .zip(z.tensors())
            .all(|(a, b)| a.len() == b.len())
            && self.key_proj.shape() == z.key_proj.shape()
            && self.output.shape() == z.output.shape()
    }

    pub fn add_assign(&mut self, other: &MhfaParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` entries.
fn fan_in_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-bound, bound))
}

/// Layer logits start at zero; projections are fan-in scaled uniform.
pub fn init_mhfa(cfg: &MhfaConfig, rng: &mut Rng) -> Result<MhfaParams> {
    cfg.validate()?;
    Ok(MhfaParams {
        layer_keys: vec![0.0; cfg.num_layers],
        layer_values: vec![0.0; cfg.num_layers],
        key_proj: fan_in_uniform(cfg.input_dim, cfg.compression_dim, rng),
        value_proj: fan_in_uniform(cfg.input_dim, cfg.compression_dim, rng),
        attention: fan_in_uniform(cfg.compression_dim, cfg.num_heads, rng),
        output: fan_in_uniform(cfg.pooled_dim(), cfg.embed_dim, rng),
        output_bias: vec![0.0; cfg.embed_dim],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax-weighted sum of the layers: `out[t,d] = Σ_l softmax(w)_l X[l,t,d]`.
pub fn layer_aggregate(x: &LayeredFeatures, w: &[f64]) -> Result<Matrix> {
    if w.len() != x.num_layers() {
        return Err(Error::Shape(format!(
            "{} layer weights for {} layers",
            w.len(),
            x.num_layers()
        )));
    }
    aggregate_with(x, &softmax(w)?)
}

fn aggregate_with(x: &LayeredFeatures, alpha: &[f64]) -> Result<Matrix> {
    let mut out = vec![0.0; x.num_frames() * x.dim()];
    for (l, &a) in alpha.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(x.layer(l)) {
            *o += a * v;
        }
    }
    Matrix::new(x.num_frames(), x.dim(), out)
}

/// Intermediates of one instance's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<'a> {
    pub input: &'a LayeredFeatures,
    pub key_weights: Vec<f64>,
    pub value_weights: Vec<f64>,
    pub key_feat: Matrix,
    /// Value features before any DSU re-styling.
    pub value_feat_raw: Matrix,
    /// Value features fed to `W_v` (equal to the raw ones without DSU).
    pub value_feat: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    /// Per-head attention over time, T×H; each column sums to one.
    pub attention: Matrix,
    pub pooled: Vec<f64>,
}

/// Forward intermediates of a batch, including the DSU trace when it fired.
#[derive(Debug, Clone)]
pub struct BatchCache<'a> {
    pub items: Vec<ForwardCache<'a>>,
    pub dsu: Option<DsuTrace>,
}

/// How DSU participates in a training-mode batch forward.
pub enum DsuHook<'r> {
    /// Bernoulli(p) trigger and fresh noise from `rng`.
    Sample { cfg: DsuConfig, rng: &'r mut Rng },
    /// Always perturb with the given noise (gradient checks).
    Fixed { cfg: DsuConfig, noise: DsuNoise },
}

struct Aggregated<'a> {
    input: &'a LayeredFeatures,
    key_weights: Vec<f64>,
    value_weights: Vec<f64>,
    key_feat: Matrix,
    value_feat: Matrix,
}

fn check_input(x: &LayeredFeatures, cfg: &MhfaConfig) -> Result<()> {
    if x.num_layers() != cfg.num_layers || x.dim() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "features {}x{}x{} do not match MHFA config L={} D={}",
            x.num_layers(),
            x.num_frames(),
            x.dim(),
            cfg.num_layers,
            cfg.input_dim
        )));
    }
    Ok(())
}

fn aggregate_stage<'a>(x: &'a LayeredFeatures, p: &MhfaParams) -> Result<Aggregated<'a>> {
    let key_weights = softmax(&p.layer_keys)?;
    let value_weights = softmax(&p.layer_values)?;
    let key_feat = aggregate_with(x, &key_weights)?;
    let value_feat = aggregate_with(x, &value_weights)?;
    Ok(Aggregated {
        input: x,
        key_weights,
        value_weights,
        key_feat,
        value_feat,
    })
}

fn attention_stage<'a>(
    agg: Aggregated<'a>,
    value_feat: Matrix,
    p: &MhfaParams,
) -> Result<(Embedding, ForwardCache<'a>)> {
    let keys = agg.key_feat.matmul(&p.key_proj)?;
    let values = value_feat.matmul(&p.value_proj)?;
    let logits = keys.matmul(&p.attention)?;
    let attention = softmax_over_time(&logits)?;
    let pooled = attention.t_matmul(&values)?.into_vec();
    let mut e = p.output_bias.clone();
    for (&v, row) in pooled.iter().zip(0..) {
        if v == 0.0 {
            continue;
        }
        for (o, w) in e.iter_mut().zip(p.output.row(row)) {
            *o += v * w;
        }
    }
    if e.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MHFA embedding".into()));
    }
    let cache = ForwardCache {
        input: agg.input,
        key_weights: agg.key_weights,
        value_weights: agg.value_weights,
        key_feat: agg.key_feat,
        value_feat_raw: agg.value_feat,
        value_feat,
        keys,
        values,
        attention,
        pooled,
    };
    Ok((Embedding(e), cache))
}

/// Column-wise softmax of a T×H logit matrix.
fn softmax_over_time(logits: &Matrix) -> Result<Matrix> {
    let (t_n, h_n) = logits.shape();
    let mut out = Matrix::zeros(t_n, h_n);
    for h in 0..h_n {
        let col = softmax(&logits.column(h))?;
        for (t, v) in col.into_iter().enumerate() {
            out[(t, h)] = v;
        }
    }
    Ok(out)
}

/// Inference or training forward for one instance. DSU needs a batch, so it
/// is only available through [`mhfa_forward_batch`].
pub fn mhfa_forward<'a>(
    x: &'a LayeredFeatures,
    p: &MhfaParams,
    cfg: &MhfaConfig,
    training: bool,
) -> Result<(Embedding, Option<ForwardCache<'a>>)> {
    check_input(x, cfg)?;
    let agg = aggregate_stage(x, p)?;
    let v = agg.value_feat.clone();
    let (e, cache) = attention_stage(agg, v, p)?;
    Ok((e, training.then_some(cache)))
}

/// Embeds a batch, optionally applying DSU to the value stream, and keeps
/// the caches needed by [`mhfa_backward_batch`].
pub fn mhfa_forward_batch<'a>(
    xs: &[&'a LayeredFeatures],
    p: &MhfaParams,
    cfg: &MhfaConfig,
    dsu_hook: Option<DsuHook<'_>>,
) -> Result<(Vec<Embedding>, BatchCache<'a>)> {
    if xs.is_empty() {
        return Err(Error::Empty("MHFA batch".into()));
    }
    for x in xs {
        check_input(x, cfg)?;
    }
    let aggs = xs
        .par_iter()
        .map(|x| aggregate_stage(x, p))
        .collect::<Result<Vec<_>>>()?;

    let raw: Vec<Matrix> = aggs.iter().map(|a| a.value_feat.clone()).collect();
    let (values, trace) = match dsu_hook {
        None => (raw, None),
        Some(DsuHook::Sample { cfg, rng }) => dsu::perturb_traced(&raw, &cfg, rng)?,
        Some(DsuHook::Fixed { cfg, noise }) => {
            let (v, t) = dsu::apply_with_noise(&raw, &cfg, noise)?;
            (v, Some(t))
        }
    };

    let (embeddings, items): (Vec<_>, Vec<_>) = aggs
        .into_par_iter()
        .zip(values)
        .map(|(agg, v)| attention_stage(agg, v, p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok((embeddings, BatchCache { items, dsu: trace }))
}

/// Parameter gradients of a batch, plus input gradients when requested.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: MhfaParams,
    pub inputs: Option<Vec<Vec<f64>>>,
}

struct HeadGrads {
    key_proj: Matrix,
    value_proj: Matrix,
    attention: Matrix,
    d_key_feat: Matrix,
    d_value_feat: Matrix,
}

fn check_cache(cache: &ForwardCache<'_>, p: &MhfaParams, grad_e: &[f64]) -> Result<()> {
    let ok = grad_e.len() == p.output_bias.len()
        && cache.pooled.len() == p.output.rows()
        && cache.key_feat.cols() == p.key_proj.rows()
        && cache.keys.cols() == p.attention.rows()
        && cache.key_weights.len() == p.layer_keys.len()
        && cache.input.num_layers() == p.layer_keys.len()
        && cache.input.dim() == p.key_proj.rows()
        && cache.input.num_frames() == cache.keys.rows();
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("MHFA backward: cache does not match parameters/gradient".into()))
    }
}

fn attention_backward(cache: &ForwardCache<'_>, p: &MhfaParams, grad_e: &[f64]) -> Result<HeadGrads> {
    let (h_n, c_n) = (p.attention.cols(), p.attention.rows());
    let d_pooled: Vec<f64> = (0..p.output.rows())
        .map(|r| crate::numerics::dot(p.output.row(r), grad_e))
        .collect();
    let d_pooled = Matrix::new(h_n, c_n, d_pooled)?;
    let a = &cache.attention;
    let d_att_w = cache.values.matmul_t(&d_pooled)?;
    let d_values = a.matmul(&d_pooled)?;
    let mut d_logits = Matrix::zeros(a.rows(), h_n);
    for h in 0..h_n {
        let inner: f64 = (0..a.rows()).map(|t| a[(t, h)] * d_att_w[(t, h)]).sum();
        for t in 0..a.rows() {
            d_logits[(t, h)] = a[(t, h)] * (d_att_w[(t, h)] - inner);
        }
    }
    let attention = cache.keys.t_matmul(&d_logits)?;
    let d_keys = d_logits.matmul_t(&p.attention)?;
    Ok(HeadGrads {
        key_proj: cache.key_feat.t_matmul(&d_keys)?,
        value_proj: cache.value_feat.t_matmul(&d_values)?,
        attention,
        d_key_feat: d_keys.matmul_t(&p.key_proj)?,
        d_value_feat: d_values.matmul_t(&p.value_proj)?,
    })
}

/// Softmax backward for layer logits: `dw = α ⊙ (dα − ⟨α, dα⟩)`.
fn layer_logit_grad(weights: &[f64], x: &LayeredFeatures, d_feat: &Matrix) -> Vec<f64> {
    let d_alpha: Vec<f64> = (0..x.num_layers())
        .map(|l| crate::numerics::dot(x.layer(l), d_feat.as_slice()))
        .collect();
    let inner = crate::numerics::dot(weights, &d_alpha);
    weights
        .iter()
        .zip(&d_alpha)
        .map(|(a, d)| a * (d - inner))
        .collect()
}

/// Backward pass over a batch. `grad_embeddings[i]` is `∂loss/∂e_i`.
pub fn mhfa_backward_batch(
    cache: &BatchCache<'_>,
    p: &MhfaParams,
    grad_embeddings: &[Vec<f64>],
    want_input_grads: bool,
) -> Result<Gradients> {
    if grad_embeddings.len() != cache.items.len() {
        return Err(Error::Shape(format!(
            "{} embedding gradients for a batch of {}",
            grad_embeddings.len(),
            cache.items.len()
        )));
    }
    for (item, g) in cache.items.iter().zip(grad_embeddings) {
        check_cache(item, p, g)?;
    }
    let heads = cache
        .items
        .par_iter()
        .zip(grad_embeddings)
        .map(|(item, g)| attention_backward(item, p, g))
        .collect::<Result<Vec<_>>>()?;

    let d_values_raw: Vec<Matrix> = match &cache.dsu {
        None => heads.iter().map(|h| h.d_value_feat.clone()).collect(),
        Some(trace) => {
            let raw: Vec<Matrix> = cache.items.iter().map(|c| c.value_feat_raw.clone()).collect();
            let d: Vec<Matrix> = heads.iter().map(|h| h.d_value_feat.clone()).collect();
            dsu::backward(trace, &raw, &d)?
        }
    };

    let mut grads = MhfaParams {
        layer_keys: vec![0.0; p.layer_keys.len()],
        layer_values: vec![0.0; p.layer_values.len()],
        key_proj: Matrix::zeros(p.key_proj.rows(), p.key_proj.cols()),
        value_proj: Matrix::zeros(p.value_proj.rows(), p.value_proj.cols()),
        attention: Matrix::zeros(p.attention.rows(), p.attention.cols()),
        output: Matrix::zeros(p.output.rows(), p.output.cols()),
        output_bias: vec![0.0; p.output_bias.len()],
    };
    let mut inputs = want_input_grads.then(Vec::new);
    // Fixed summation order keeps results independent of the thread count.
    for ((item, head), d_vf) in cache.items.iter().zip(&heads).zip(&d_values_raw) {
        grads.key_proj.add_assign(&head.key_proj)?;
        grads.value_proj.add_assign(&head.value_proj)?;
        grads.attention.add_assign(&head.attention)?;
        let dk = layer_logit_grad(&item.key_weights, item.input, &head.d_key_feat);
        let dv = layer_logit_grad(&item.value_weights, item.input, d_vf);
        for (g, d) in grads.layer_keys.iter_mut().zip(dk) {
            *g += d;
        }
        for (g, d) in grads.layer_values.iter_mut().zip(dv) {
            *g += d;
        }
        if let Some(inputs) = inputs.as_mut() {
            let x = item.input;
            let n = x.num_frames() * x.dim();
            let mut dx = vec![0.0; x.num_layers() * n];
            for l in 0..x.num_layers() {
                let (a, b) = (item.key_weights[l], item.value_weights[l]);
                for ((o, k), v) in dx[l * n..(l + 1) * n]
                    .iter_mut()
                    .zip(head.d_key_feat.as_slice())
                    .zip(d_vf.as_slice())
                {
                    *o = a * k + b * v;
                }
            }
            inputs.push(dx);
        }
    }
    for g in grad_embeddings {
        for (b, v) in grads.output_bias.iter_mut().zip(g) {
            *b += v;
        }
    }
    let e_n = p.output.cols();
    grads
        .output
        .as_mut_slice()
        .par_chunks_mut(e_n)
        .enumerate()
        .for_each(|(r, row)| {
            for (item, g) in cache.items.iter().zip(grad_embeddings) {
                let v = item.pooled[r];
                if v == 0.0 {
                    continue;
                }
                for (o, gv) in row.iter_mut().zip(g) {
                    *o += v * gv;
                }
            }
        });
    if !grads.is_finite() {
        return Err(Error::NonFinite("MHFA gradients".into()));
    }
    Ok(Gradients {
        params: grads,
        inputs,
    })
}

/// Single-instance backward; see [`mhfa_backward_batch`].
pub fn mhfa_backward(
    cache: &ForwardCache<'_>,
    p: &MhfaParams,
    grad_e: &[f64],
    want_input_grad: bool,
) -> Result<Gradients> {
    let batch = BatchCache {
        items: vec![cache.clone()],
        dsu: None,
    };
    mhfa_backward_batch(&batch, p, &[grad_e.to_vec()], want_input_grad)
}
