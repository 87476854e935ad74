//! Decoder-only transformer with pre-norm blocks and explicit backward passes.
//!
//! The model keeps its pre-trained weights (`W*`) immutable; trainable
//! corrections enter through an [`Overlay`]: low-rank adapters on the query and
//! value projections, and optional replacement rows for the output head.
//! Gradients are computed by a hand-written reverse pass over cached
//! activations. Only the quantities requested through [`GradRequest`] are
//! accumulated.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, Projection};
use crate::scalar::Scalar;
use crate::tensor::{add_matmul, add_matmul_nt, add_matmul_tn, dot, log_softmax, softmax, Matrix};

pub type TokenId = u32;

/// Named map from parameter or adapter-factor identifiers to tensors.
pub type GradientMap<S = f64> = BTreeMap<String, Matrix<S>>;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Width of the feed-forward hidden layer.
    pub mlp_hidden: usize,
    /// Residual-branch dropout applied in [`DropoutMode::Train`].
    pub dropout_p: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 160,
            mlp_hidden: 128,
            dropout_p: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 {
            return Err(Error::invalid("vocab_size, d_model and n_heads must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("max_seq_len and mlp_hidden must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of scalar parameters in a base model with this configuration.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let h = self.mlp_hidden;
        let per_layer = 4 * d + 4 * d * d + h * d + h + d * h + d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + self.vocab_size * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S = f64> {
    pub ln1_g: Matrix<S>,
    pub ln1_b: Matrix<S>,
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub ln2_g: Matrix<S>,
    pub ln2_b: Matrix<S>,
    pub w1: Matrix<S>,
    pub b1: Matrix<S>,
    pub w2: Matrix<S>,
    pub b2: Matrix<S>,
}

impl<S: Scalar> LayerParams<S> {
    fn zeros_like(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.mlp_hidden;
        Self {
            ln1_g: Matrix::zeros(1, d),
            ln1_b: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_g: Matrix::zeros(1, d),
            ln2_b: Matrix::zeros(1, d),
            w1: Matrix::zeros(h, d),
            b1: Matrix::zeros(1, h),
            w2: Matrix::zeros(d, h),
            b2: Matrix::zeros(1, d),
        }
    }

    fn fields(&self) -> [(&'static str, &Matrix<S>); 12] {
        [
            ("ln1.gamma", &self.ln1_g),
            ("ln1.beta", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("ln2.gamma", &self.ln2_g),
            ("ln2.beta", &self.ln2_b),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Matrix<S>); 12] {
        [
            ("ln1.gamma", &mut self.ln1_g),
            ("ln1.beta", &mut self.ln1_b),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("ln2.gamma", &mut self.ln2_g),
            ("ln2.beta", &mut self.ln2_b),
            ("mlp.w1", &mut self.w1),
            ("mlp.b1", &mut self.b1),
            ("mlp.w2", &mut self.w2),
            ("mlp.b2", &mut self.b2),
        ]
    }

    pub fn projection(&self, proj: Projection) -> &Matrix<S> {
        match proj {
            Projection::Query => &self.wq,
            Projection::Value => &self.wv,
        }
    }
}

/// All base-model weights. Linear maps are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<S = f64> {
    pub tok_emb: Matrix<S>,
    pub pos_emb: Matrix<S>,
    pub layers: Vec<LayerParams<S>>,
    pub lnf_g: Matrix<S>,
    pub lnf_b: Matrix<S>,
    pub head: Matrix<S>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            tok_emb: Matrix::zeros(cfg.vocab_size, d),
            pos_emb: Matrix::zeros(cfg.max_seq_len, d),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros_like(cfg)).collect(),
            lnf_g: Matrix::zeros(1, d),
            lnf_b: Matrix::zeros(1, d),
            head: Matrix::zeros(cfg.vocab_size, d),
        }
    }

    /// Visits every tensor with its canonical name, in a fixed order.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Matrix<S>)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.fields() {
                f(&format!("layers.{l}.{name}"), m);
            }
        }
        f("ln_f.gamma", &self.lnf_g);
        f("ln_f.beta", &self.lnf_b);
        f("head", &self.head);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Matrix<S>)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in layer.fields_mut() {
                f(&format!("layers.{l}.{name}"), m);
            }
        }
        f("ln_f.gamma", &mut self.lnf_g);
        f("ln_f.beta", &mut self.lnf_b);
        f("head", &mut self.head);
    }

    pub fn to_named(&self) -> GradientMap<S> {
        let mut out = BTreeMap::new();
        self.for_each(|n, m| {
            out.insert(n.to_string(), m.clone());
        });
        out
    }

    /// Rebuilds parameters from a named map, checking every expected tensor is present
    /// with the expected shape.
    pub fn from_named(cfg: &ModelConfig, named: &GradientMap<S>) -> Result<Self> {
        let mut params = Self::zeros_like(cfg);
        let mut missing = None;
        params.for_each_mut(|name, m| match named.get(name) {
            Some(src) if src.shape() == m.shape() => *m = src.clone(),
            Some(src) => {
                missing.get_or_insert(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    m.shape()
                ));
            }
            None => {
                missing.get_or_insert(format!("tensor `{name}` missing"));
            }
        });
        if let Some(msg) = missing {
            return Err(Error::Shape(msg));
        }
        let mut expected = 0;
        params.for_each(|_, _| expected += 1);
        if named.len() != expected {
            return Err(Error::Shape("unexpected extra tensors in parameter map".into()));
        }
        Ok(params)
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, m| n += m.len());
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel<S = f64> {
    pub config: ModelConfig,
    pub params: Params<S>,
    pub frozen: bool,
}

impl<S: Scalar> BaseModel<S> {
    /// Random initialisation: `N(0, 0.02)` embeddings, `N(0, 1/fan_in)` linear
    /// maps, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros_like(&config);
        params.for_each_mut(|name, m| {
            if name.ends_with(".gamma") {
                m.fill(S::one());
            } else if name.ends_with(".beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                // zero
            } else {
                let std = if name.ends_with("_emb") {
                    0.02
                } else {
                    (1.0 / m.cols() as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                m.as_mut_slice()
                    .iter_mut()
                    .for_each(|x| *x = S::of(normal.sample(&mut rng)));
            }
        });
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Content hash over configuration and every parameter bit.
    pub fn fingerprint(&self) -> u64 {
        crate::checkpoint::model_fingerprint(self)
    }

    pub fn convert<T: Scalar>(&self) -> BaseModel<T> {
        let mut params = Params::<T>::zeros_like(&self.config);
        let src = self.params.to_named();
        params.for_each_mut(|n, m| *m = src[n].convert());
        BaseModel {
            config: self.config.clone(),
            params,
            frozen: self.frozen,
        }
    }
}

/// Replacement rows of the output head for a set of token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRows<S = f64> {
    pub tokens: Vec<TokenId>,
    /// `tokens.len() × d_model`
    pub rows: Matrix<S>,
}

impl<S: Scalar> HeadRows<S> {
    pub fn from_base(model: &BaseModel<S>, tokens: &[TokenId]) -> Result<Self> {
        let d = model.config.d_model;
        let mut rows = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            check_token(t, model.config.vocab_size)?;
            rows.row_mut(i).copy_from_slice(model.params.head.row(t as usize));
        }
        Ok(Self {
            tokens: tokens.to_vec(),
            rows,
        })
    }

    pub const PARAM_NAME: &'static str = "head_rows";
}

/// Trainable corrections applied on top of frozen base weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overlay<'a, S = f64> {
    pub adapter: Option<&'a LoraAdapter<S>>,
    pub head: Option<&'a HeadRows<S>>,
}

impl<'a, S> Overlay<'a, S> {
    pub fn none() -> Self {
        Self {
            adapter: None,
            head: None,
        }
    }

    pub fn adapter(adapter: Option<&'a LoraAdapter<S>>) -> Self {
        Self { adapter, head: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropoutMode {
    /// Deterministic; no dropout anywhere.
    Eval,
    /// Residual-branch dropout at `ModelConfig::dropout_p` and adapter-input
    /// dropout at the adapter's own rate.
    Train,
    /// Test-time dropout on adapter inputs only, at rate `p`.
    Mc { p: f64 },
}

/// Which gradients a reverse pass should accumulate.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradRequest {
    pub base: bool,
    pub adapter: bool,
    pub head_rows: bool,
}

#[derive(Clone, Debug)]
pub struct Grads<S> {
    pub base: Option<Params<S>>,
    /// `(dA, dB)` aligned with `LoraAdapter::factors`.
    pub adapter: Option<Vec<(Matrix<S>, Matrix<S>)>>,
    pub head_rows: Option<Matrix<S>>,
}

impl<S: Scalar> Grads<S> {
    pub(crate) fn empty(model: &BaseModel<S>, overlay: &Overlay<S>, req: GradRequest) -> Self {
        Self {
            base: req.base.then(|| Params::zeros_like(&model.config)),
            adapter: match (req.adapter, overlay.adapter) {
                (true, Some(a)) => Some(
                    a.factors
                        .iter()
                        .map(|f| (Matrix::zeros(f.a.rows(), f.a.cols()), Matrix::zeros(f.b.rows(), f.b.cols())))
                        .collect(),
                ),
                _ => None,
            },
            head_rows: match (req.head_rows, overlay.head) {
                (true, Some(h)) => Some(Matrix::zeros(h.rows.rows(), h.rows.cols())),
                _ => None,
            },
        }
    }

    pub(crate) fn scale(&mut self, s: S) {
        if let Some(p) = &mut self.base {
            p.for_each_mut(|_, m| m.scale(s));
        }
        if let Some(a) = &mut self.adapter {
            for (da, db) in a {
                da.scale(s);
                db.scale(s);
            }
        }
        if let Some(h) = &mut self.head_rows {
            h.scale(s);
        }
    }
}

struct Dropout<S> {
    mask: Matrix<S>,
}

impl<S: Scalar> Dropout<S> {
    fn sample(rows: usize, cols: usize, p: f64, rng: &mut impl Rng) -> Option<Self> {
        if p <= 0.0 {
            return None;
        }
        let keep = S::of(1.0 / (1.0 - p));
        let mask = Matrix::from_fn(rows, cols, |_, _| if rng.random::<f64>() < p { S::zero() } else { keep });
        Some(Self { mask })
    }

    fn apply(&self, x: &Matrix<S>) -> Matrix<S> {
        let mut out = x.clone();
        out.as_mut_slice()
            .iter_mut()
            .zip(self.mask.as_slice())
            .for_each(|(v, &m)| *v *= m);
        out
    }
}

fn apply_opt<S: Scalar>(drop: &Option<Dropout<S>>, x: &Matrix<S>) -> Matrix<S> {
    match drop {
        Some(d) => d.apply(x),
        None => x.clone(),
    }
}

fn apply_opt_in_place<S: Scalar>(drop: &Option<Dropout<S>>, x: &mut Matrix<S>) {
    if let Some(d) = drop {
        x.as_mut_slice()
            .iter_mut()
            .zip(d.mask.as_slice())
            .for_each(|(v, &m)| *v *= m);
    }
}

struct LnCache<S> {
    xhat: Matrix<S>,
    rstd: Vec<S>,
}

fn layer_norm<S: Scalar>(x: &Matrix<S>, g: &Matrix<S>, b: &Matrix<S>) -> (Matrix<S>, LnCache<S>) {
    let (t, d) = x.shape();
    let mut xhat = Matrix::zeros(t, d);
    let mut y = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let inv_d = S::of(1.0 / d as f64);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let r = S::one() / (var + S::of(LN_EPS)).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        let xh = xhat.row(i).to_vec();
        for ((o, &h), (&gg, &bb)) in y.row_mut(i).iter_mut().zip(&xh).zip(g.as_slice().iter().zip(b.as_slice())) {
            *o = h * gg + bb;
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`; accumulates `dg`, `db` when given.
fn layer_norm_backward<S: Scalar>(
    dy: &Matrix<S>,
    cache: &LnCache<S>,
    g: &Matrix<S>,
    mut dparams: Option<(&mut Matrix<S>, &mut Matrix<S>)>,
) -> Matrix<S> {
    let (t, d) = dy.shape();
    let inv_d = S::of(1.0 / d as f64);
    let mut dx = Matrix::zeros(t, d);
    let mut dxhat = vec![S::zero(); d];
    for i in 0..t {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        if let Some((dg, db)) = dparams.as_mut() {
            for j in 0..d {
                dg.as_mut_slice()[j] += dyr[j] * xh[j];
                db.as_mut_slice()[j] += dyr[j];
            }
        }
        for j in 0..d {
            dxhat[j] = dyr[j] * g.as_slice()[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<S>() * inv_d;
        let mean_dxhat_xhat = dot(&dxhat, xh) * inv_d;
        let r = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<S: Scalar>(z: S) -> S {
    let c = S::of(GELU_C);
    let k = S::of(0.044715);
    S::of(0.5) * z * (S::one() + (c * (z + k * z * z * z)).tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(z: S) -> S {
    let c = S::of(GELU_C);
    let k = S::of(0.044715);
    let u = c * (z + k * z * z * z);
    let th = u.tanh();
    let du = c * (S::one() + S::of(3.0) * k * z * z);
    S::of(0.5) * (S::one() + th) + S::of(0.5) * z * (S::one() - th * th) * du
}

/// Cached activations of one adapter path `s · dropout(x) Aᵀ Bᵀ`.
struct LoraCache<S> {
    factor: usize,
    input: Matrix<S>,
    drop: Option<Dropout<S>>,
    u: Matrix<S>,
}

struct LayerCache<S> {
    ln1: LnCache<S>,
    a: Matrix<S>,
    lora_q: Option<LoraCache<S>>,
    lora_v: Option<LoraCache<S>>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    probs: Vec<Matrix<S>>,
    ctx: Matrix<S>,
    attn_drop: Option<Dropout<S>>,
    ln2: LnCache<S>,
    m: Matrix<S>,
    z: Matrix<S>,
    act: Matrix<S>,
    mlp_drop: Option<Dropout<S>>,
}

/// Activations retained for the reverse pass.
pub struct ForwardCache<S> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<S>>,
    /// Rows of the final residual stream fed to the head.
    out_rows: Vec<usize>,
    lnf: LnCache<S>,
    hidden: Matrix<S>,
}

/// Which positions produce logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positions {
    Last,
    All,
}

fn check_token(t: TokenId, vocab: usize) -> Result<()> {
    if (t as usize) < vocab {
        Ok(())
    } else {
        Err(Error::TokenOutOfVocab { token: t, vocab })
    }
}

fn lora_forward<S: Scalar>(
    adapter: &LoraAdapter<S>,
    factor: usize,
    input: &Matrix<S>,
    drop_p: f64,
    rng: &mut impl Rng,
    out: &mut Matrix<S>,
) -> LoraCache<S> {
    let f = &adapter.factors[factor];
    let drop = Dropout::sample(input.rows(), input.cols(), drop_p, rng);
    let x = apply_opt(&drop, input);
    let u = x.matmul_nt(&f.a);
    add_matmul_nt(out, &u, &f.b, adapter.scale());
    LoraCache {
        factor,
        input: x,
        drop,
        u,
    }
}

fn validate_overlay<S: Scalar>(model: &BaseModel<S>, overlay: &Overlay<S>) -> Result<()> {
    let cfg = &model.config;
    if let Some(adapter) = overlay.adapter {
        for f in &adapter.factors {
            let layer = f.target.layer;
            if layer >= cfg.n_layers {
                return Err(Error::Shape(format!(
                    "adapter targets {} but the model has {} layers",
                    f.target, cfg.n_layers
                )));
            }
            let w = model.params.layers[layer].projection(f.target.proj);
            if f.b.rows() != w.rows() || f.a.cols() != w.cols() || f.a.rows() != f.b.cols() {
                return Err(Error::Shape(format!(
                    "adapter factors at {} (B {:?}, A {:?}) do not compose to {:?}",
                    f.target,
                    f.b.shape(),
                    f.a.shape(),
                    w.shape()
                )));
            }
        }
    }
    if let Some(head) = overlay.head {
        if head.rows.shape() != (head.tokens.len(), cfg.d_model) {
            return Err(Error::Shape(format!("head rows have shape {:?}", head.rows.shape())));
        }
        for &t in &head.tokens {
            check_token(t, cfg.vocab_size)?;
        }
    }
    Ok(())
}

fn effective_head<'m, S: Scalar>(
    model: &'m BaseModel<S>,
    overlay: &Overlay<S>,
) -> std::borrow::Cow<'m, Matrix<S>> {
    match overlay.head {
        None => std::borrow::Cow::Borrowed(&model.params.head),
        Some(h) => {
            let mut head = model.params.head.clone();
            for (i, &t) in h.tokens.iter().enumerate() {
                head.row_mut(t as usize).copy_from_slice(h.rows.row(i));
            }
            std::borrow::Cow::Owned(head)
        }
    }
}

/// Full forward pass returning logits for the requested positions and the
/// cache needed by [`backward`].
pub fn forward_cached<S: Scalar>(
    model: &BaseModel<S>,
    overlay: &Overlay<S>,
    tokens: &[TokenId],
    mode: DropoutMode,
    rng: &mut impl Rng,
    positions: Positions,
) -> Result<(Matrix<S>, ForwardCache<S>)> {
    let cfg = &model.config;
    let p = &model.params;
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    for &t in tokens {
        check_token(t, cfg.vocab_size)?;
    }
    validate_overlay(model, overlay)?;

    let (resid_p, adapter_p) = match mode {
        DropoutMode::Eval => (0.0, 0.0),
        DropoutMode::Train => (cfg.dropout_p, overlay.adapter.map_or(0.0, |a| a.dropout)),
        DropoutMode::Mc { p } => (0.0, p),
    };

    let t = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = S::of(1.0 / (dh as f64).sqrt());

    let mut x = Matrix::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(i);
        for ((o, &e), &pe) in row.iter_mut().zip(p.tok_emb.row(tok as usize)).zip(p.pos_emb.row(i)) {
            *o = e + pe;
        }
    }

    let mut caches = Vec::with_capacity(cfg.n_layers);
    for (l, lp) in p.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
        let mut q = a.matmul_nt(&lp.wq);
        let k = a.matmul_nt(&lp.wk);
        let mut v = a.matmul_nt(&lp.wv);
        let mut lora_q = None;
        let mut lora_v = None;
        if let Some(adapter) = overlay.adapter {
            if let Some(fi) = adapter.factor_index(l, Projection::Query) {
                lora_q = Some(lora_forward(adapter, fi, &a, adapter_p, rng, &mut q));
            }
            if let Some(fi) = adapter.factor_index(l, Projection::Value) {
                lora_v = Some(lora_forward(adapter, fi, &a, adapter_p, rng, &mut v));
            }
        }

        let mut ctx = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let mut pm = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = &q.row(i)[off..off + dh];
                let row = pm.row_mut(i);
                let mut max = S::neg_infinity();
                for j in 0..=i {
                    let s = dot(qi, &k.row(j)[off..off + dh]) * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut z = S::zero();
                for r in row.iter_mut().take(i + 1) {
                    *r = (*r - max).exp();
                    z += *r;
                }
                let inv = S::one() / z;
                for r in row.iter_mut().take(i + 1) {
                    *r *= inv;
                }
            }
            for i in 0..t {
                let prow = pm.row(i).to_vec();
                let crow = &mut ctx.row_mut(i)[off..off + dh];
                for (j, &pij) in prow.iter().enumerate().take(i + 1) {
                    for (c, &vv) in crow.iter_mut().zip(&v.row(j)[off..off + dh]) {
                        *c += pij * vv;
                    }
                }
            }
            probs.push(pm);
        }

        let mut o = ctx.matmul_nt(&lp.wo);
        let attn_drop = Dropout::sample(t, d, resid_p, rng);
        apply_opt_in_place(&attn_drop, &mut o);
        x.add_assign(&o);

        let (m, ln2) = layer_norm(&x, &lp.ln2_g, &lp.ln2_b);
        let mut z = m.matmul_nt(&lp.w1);
        for i in 0..t {
            for (zz, &b) in z.row_mut(i).iter_mut().zip(lp.b1.as_slice()) {
                *zz += b;
            }
        }
        let act = z.map(gelu);
        let mut f = act.matmul_nt(&lp.w2);
        for i in 0..t {
            for (ff, &b) in f.row_mut(i).iter_mut().zip(lp.b2.as_slice()) {
                *ff += b;
            }
        }
        let mlp_drop = Dropout::sample(t, d, resid_p, rng);
        apply_opt_in_place(&mlp_drop, &mut f);
        x.add_assign(&f);

        if !x.is_finite() {
            return Err(Error::NonFiniteActivation { layer: l });
        }

        caches.push(LayerCache {
            ln1,
            a,
            lora_q,
            lora_v,
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ln2,
            m,
            z,
            act,
            mlp_drop,
        });
    }

    let out_rows: Vec<usize> = match positions {
        Positions::Last => vec![t - 1],
        Positions::All => (0..t).collect(),
    };
    let mut xs = Matrix::zeros(out_rows.len(), d);
    for (i, &r) in out_rows.iter().enumerate() {
        xs.row_mut(i).copy_from_slice(x.row(r));
    }
    let (hidden, lnf) = layer_norm(&xs, &p.lnf_g, &p.lnf_b);
    let head = effective_head(model, overlay);
    let logits = hidden.matmul_nt(&head);
    if !logits.is_finite() {
        return Err(Error::NonFiniteActivation { layer: cfg.n_layers });
    }

    Ok((
        logits,
        ForwardCache {
            tokens: tokens.to_vec(),
            layers: caches,
            out_rows,
            lnf,
            hidden,
        },
    ))
}

/// Next-token logits at the final position.
///
/// With `DropoutMode::Eval` the result is a pure function of the weights,
/// adapter and tokens; in the other modes randomness comes only from `rng`.
pub fn forward<S: Scalar>(
    model: &BaseModel<S>,
    adapter: Option<&LoraAdapter<S>>,
    tokens: &[TokenId],
    mode: DropoutMode,
    rng: &mut impl Rng,
) -> Result<Vec<S>> {
    forward_with(model, &Overlay::adapter(adapter), tokens, mode, rng)
}

pub fn forward_with<S: Scalar>(
    model: &BaseModel<S>,
    overlay: &Overlay<S>,
    tokens: &[TokenId],
    mode: DropoutMode,
    rng: &mut impl Rng,
) -> Result<Vec<S>> {
    let (logits, _) = forward_cached(model, overlay, tokens, mode, rng, Positions::Last)?;
    Ok(logits.into_vec())
}

/// Post-norm hidden state at the final position (the head's input).
pub fn final_hidden<S: Scalar>(model: &BaseModel<S>, tokens: &[TokenId]) -> Result<Vec<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, cache) = forward_cached(model, &Overlay::none(), tokens, DropoutMode::Eval, &mut rng, Positions::Last)?;
    Ok(cache.hidden.into_vec())
}

fn lora_backward<S: Scalar>(
    adapter: &LoraAdapter<S>,
    cache: &LoraCache<S>,
    dout: &Matrix<S>,
    grads: Option<&mut (Matrix<S>, Matrix<S>)>,
    dinput: Option<&mut Matrix<S>>,
) {
    let f = &adapter.factors[cache.factor];
    let s = adapter.scale();
    // du = s · dout · B   (T × r)
    let mut du = Matrix::zeros(dout.rows(), f.b.cols());
    add_matmul(&mut du, dout, &f.b, s);
    if let Some((da, db)) = grads {
        add_matmul_tn(db, dout, &cache.u, s);
        add_matmul_tn(da, &du, &cache.input, S::one());
    }
    if let Some(dx) = dinput {
        let mut dxd = du.matmul(&f.a);
        apply_opt_in_place(&cache.drop, &mut dxd);
        dx.add_assign(&dxd);
    }
}

/// Reverse pass. `dlogits` has one row per position in the forward's
/// `Positions`. Gradients are accumulated into `grads`.
pub fn backward<S: Scalar>(
    model: &BaseModel<S>,
    overlay: &Overlay<S>,
    cache: &ForwardCache<S>,
    dlogits: &Matrix<S>,
    grads: &mut Grads<S>,
) {
    let cfg = &model.config;
    let p = &model.params;
    let t = cache.tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = S::of(1.0 / (dh as f64).sqrt());
    let want_base = grads.base.is_some();

    let head = effective_head(model, overlay);
    let dhidden = dlogits.matmul(&head);
    if let Some(gb) = grads.base.as_mut() {
        add_matmul_tn(&mut gb.head, dlogits, &cache.hidden, S::one());
    }
    if let (Some(gh), Some(h)) = (grads.head_rows.as_mut(), overlay.head) {
        for (i, &tok) in h.tokens.iter().enumerate() {
            for r in 0..dlogits.rows() {
                let g = dlogits[(r, tok as usize)];
                if g != S::zero() {
                    for (o, &hv) in gh.row_mut(i).iter_mut().zip(cache.hidden.row(r)) {
                        *o += g * hv;
                    }
                }
            }
        }
    }
    // Adapters only need gradients down to the lowest adapted layer.
    let lowest_needed = if want_base {
        0
    } else {
        match (grads.adapter.is_some(), overlay.adapter) {
            (true, Some(a)) => a.factors.iter().map(|f| f.target.layer).min().unwrap_or(cfg.n_layers),
            _ => cfg.n_layers,
        }
    };
    if lowest_needed >= cfg.n_layers && !want_base {
        return;
    }

    let dxs = {
        let dparams = grads.base.as_mut().map(|g| {
            let Params { lnf_g, lnf_b, .. } = g;
            (lnf_g, lnf_b)
        });
        layer_norm_backward(&dhidden, &cache.lnf, &p.lnf_g, dparams)
    };
    let mut dx = Matrix::zeros(t, d);
    for (i, &r) in cache.out_rows.iter().enumerate() {
        dx.row_mut(r).copy_from_slice(dxs.row(i));
    }

    for l in (lowest_needed..cfg.n_layers).rev() {
        let lp = &p.layers[l];
        let c = &cache.layers[l];
        let mut gl = grads.base.as_mut().map(|g| &mut g.layers[l]);

        // MLP branch.
        let mut df = dx.clone();
        apply_opt_in_place(&c.mlp_drop, &mut df);
        if let Some(g) = gl.as_deref_mut() {
            add_matmul_tn(&mut g.w2, &df, &c.act, S::one());
            for i in 0..t {
                for (b, &v) in g.b2.as_mut_slice().iter_mut().zip(df.row(i)) {
                    *b += v;
                }
            }
        }
        let mut dz = df.matmul(&lp.w2);
        for (dzv, &zv) in dz.as_mut_slice().iter_mut().zip(c.z.as_slice()) {
            *dzv *= gelu_grad(zv);
        }
        if let Some(g) = gl.as_deref_mut() {
            add_matmul_tn(&mut g.w1, &dz, &c.m, S::one());
            for i in 0..t {
                for (b, &v) in g.b1.as_mut_slice().iter_mut().zip(dz.row(i)) {
                    *b += v;
                }
            }
        }
        let dm = dz.matmul(&lp.w1);
        let dres = {
            let dp = gl.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b));
            layer_norm_backward(&dm, &c.ln2, &lp.ln2_g, dp)
        };
        dx.add_assign(&dres);

        // Attention branch.
        let mut dout = dx.clone();
        apply_opt_in_place(&c.attn_drop, &mut dout);
        if let Some(g) = gl.as_deref_mut() {
            add_matmul_tn(&mut g.wo, &dout, &c.ctx, S::one());
        }
        let dctx = dout.matmul(&lp.wo);
        let mut dq = Matrix::zeros(t, d);
        let mut dk = Matrix::zeros(t, d);
        let mut dv = Matrix::zeros(t, d);
        let mut dp_row = vec![S::zero(); t];
        for h in 0..cfg.n_heads {
            let off = h * dh;
            let pm = &c.probs[h];
            for i in 0..t {
                let dci = &dctx.row(i)[off..off + dh];
                let prow = pm.row(i);
                // dP_ij = dctx_i · v_j ; dv_j += P_ij dctx_i
                for j in 0..=i {
                    dp_row[j] = dot(dci, &c.v.row(j)[off..off + dh]);
                    let pij = prow[j];
                    for (o, &g) in dv.row_mut(j)[off..off + dh].iter_mut().zip(dci) {
                        *o += pij * g;
                    }
                }
                let mut inner = S::zero();
                for j in 0..=i {
                    inner += dp_row[j] * prow[j];
                }
                let qi: Vec<S> = c.q.row(i)[off..off + dh].to_vec();
                for j in 0..=i {
                    let ds = prow[j] * (dp_row[j] - inner) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let kj = &c.k.row(j)[off..off + dh];
                    for (o, &kv) in dq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    for (o, &qv) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                        *o += ds * qv;
                    }
                }
            }
        }

        let need_da = want_base || l > lowest_needed;
        let mut da = Matrix::zeros(t, d);
        if need_da {
            add_matmul(&mut da, &dq, &lp.wq, S::one());
            add_matmul(&mut da, &dk, &lp.wk, S::one());
            add_matmul(&mut da, &dv, &lp.wv, S::one());
        }
        if let Some(g) = gl.as_deref_mut() {
            add_matmul_tn(&mut g.wq, &dq, &c.a, S::one());
            add_matmul_tn(&mut g.wk, &dk, &c.a, S::one());
            add_matmul_tn(&mut g.wv, &dv, &c.a, S::one());
        }
        if let Some(adapter) = overlay.adapter {
            for (lc, dproj) in [(&c.lora_q, &dq), (&c.lora_v, &dv)] {
                if let Some(lc) = lc {
                    let g = grads.adapter.as_mut().map(|v| &mut v[lc.factor]);
                    lora_backward(adapter, lc, dproj, g, need_da.then_some(&mut da));
                }
            }
        }
        if !need_da {
            break;
        }
        let mut gl = grads.base.as_mut().map(|g| &mut g.layers[l]);
        let dres = {
            let dp = gl.as_deref_mut().map(|g| (&mut g.ln1_g, &mut g.ln1_b));
            layer_norm_backward(&da, &c.ln1, &lp.ln1_g, dp)
        };
        dx.add_assign(&dres);
    }

    if let Some(g) = grads.base.as_mut() {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let r = dx.row(i);
            for (o, &v) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(r) {
                *o += v;
            }
            for (o, &v) in g.pos_emb.row_mut(i).iter_mut().zip(r) {
                *o += v;
            }
        }
    }
}

/// Regularizer added to the NLL objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlScope {
    /// KL between full next-token distributions.
    #[default]
    FullVocab,
    /// KL between task-normalized distributions over the label set.
    LabelSet,
}

/// What the loss is differentiated with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradTarget {
    #[default]
    Adapter,
    HeadRows,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossSpec {
    pub kl_beta: f64,
    pub kl_scope: KlScope,
    pub target: GradTarget,
    pub mode: LossMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum LossMode {
    #[default]
    Eval,
    Train,
}

/// One supervised example at the answer position.
pub trait Supervised {
    fn tokens(&self) -> &[TokenId];
    fn target(&self) -> TokenId;
    fn label_tokens(&self) -> &[TokenId];
}

/// Per-example loss decomposition.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts<S> {
    pub nll: S,
    pub kl: S,
}

/// KL(p ‖ q) over the chosen support together with `∂KL/∂logits`.
pub(crate) fn kl_and_grad<S: Scalar>(
    logits: &[S],
    base_log_probs: &[S],
    scope: KlScope,
    labels: &[TokenId],
) -> (S, Vec<S>) {
    let mut dlogits = vec![S::zero(); logits.len()];
    match scope {
        KlScope::FullVocab => {
            let lp = log_softmax(logits);
            let mut kl = S::zero();
            for (i, &l) in lp.iter().enumerate() {
                kl += l.exp() * (l - base_log_probs[i]);
            }
            for (i, &l) in lp.iter().enumerate() {
                dlogits[i] = l.exp() * (l - base_log_probs[i] - kl);
            }
            (kl, dlogits)
        }
        KlScope::LabelSet => {
            // Restricting the full log-distribution keeps both sides on the
            // same footing, so identical models give exactly zero.
            let full = log_softmax(logits);
            let sub: Vec<S> = labels.iter().map(|&t| full[t as usize]).collect();
            let base_sub: Vec<S> = labels.iter().map(|&t| base_log_probs[t as usize]).collect();
            let lp = log_softmax(&sub);
            let lq = log_softmax(&base_sub);
            let mut kl = S::zero();
            for i in 0..lp.len() {
                kl += lp[i].exp() * (lp[i] - lq[i]);
            }
            for (i, &t) in labels.iter().enumerate() {
                dlogits[t as usize] = lp[i].exp() * (lp[i] - lq[i] - kl);
            }
            (kl, dlogits)
        }
    }
}

/// Mean loss over `batch` and the gradients of the overlay's trainable
/// tensors. `base_log_probs` optionally supplies cached frozen-base
/// log-distributions (one per example) for the KL term.
pub fn loss_and_grads_with<S: Scalar, E: Supervised>(
    model: &BaseModel<S>,
    overlay: &Overlay<S>,
    batch: &[E],
    spec: &LossSpec,
    base_log_probs: Option<&[Vec<S>]>,
    rng: &mut impl Rng,
) -> Result<(S, LossParts<S>, Grads<S>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if spec.kl_beta < 0.0 {
        return Err(Error::invalid("kl_beta must be non-negative"));
    }
    let req = match spec.target {
        GradTarget::Adapter => GradRequest {
            adapter: true,
            ..Default::default()
        },
        GradTarget::HeadRows => GradRequest {
            head_rows: true,
            ..Default::default()
        },
    };
    let mode = match spec.mode {
        LossMode::Eval => DropoutMode::Eval,
        LossMode::Train => DropoutMode::Train,
    };
    let vocab = model.config.vocab_size;
    let n = S::of(batch.len() as f64);
    let beta = S::of(spec.kl_beta);
    let mut grads = Grads::empty(model, overlay, req);
    let mut parts = LossParts {
        nll: S::zero(),
        kl: S::zero(),
    };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(0);
    for (idx, ex) in batch.iter().enumerate() {
        let y = ex.target();
        check_token(y, vocab)?;
        let (logits, cache) = forward_cached(model, overlay, ex.tokens(), mode, rng, Positions::Last)?;
        let logits = logits.into_vec();
        let lp = log_softmax(&logits);
        parts.nll -= lp[y as usize];
        let mut dl: Vec<S> = lp.iter().map(|l| l.exp()).collect();
        dl[y as usize] -= S::one();
        if spec.kl_beta > 0.0 {
            let owned;
            let base_lp: &[S] = match base_log_probs {
                Some(cached) => &cached[idx],
                None => {
                    let base = forward(model, None, ex.tokens(), DropoutMode::Eval, &mut eval_rng)?;
                    owned = log_softmax(&base);
                    &owned
                }
            };
            let (kl, dkl) = kl_and_grad(&logits, base_lp, spec.kl_scope, ex.label_tokens());
            parts.kl += kl;
            for (d, g) in dl.iter_mut().zip(dkl) {
                *d += beta * g;
            }
        }
        let dlogits = Matrix::row_vector(dl);
        backward(model, overlay, &cache, &dlogits, &mut grads);
    }
    parts.nll /= n;
    parts.kl /= n;
    grads.scale(S::one() / n);
    let loss = parts.nll + beta * parts.kl;
    Ok((loss, parts, grads))
}

/// Mean NLL (plus KL term when configured) and gradients keyed by adapter
/// factor name. Base parameters never appear in the returned map.
pub fn loss_and_grads<S: Scalar, E: Supervised>(
    model: &BaseModel<S>,
    adapter: &LoraAdapter<S>,
    batch: &[E],
    spec: &LossSpec,
) -> Result<(S, GradientMap<S>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = LossSpec {
        target: GradTarget::Adapter,
        ..*spec
    };
    let (loss, _, grads) = loss_and_grads_with(model, &Overlay::adapter(Some(adapter)), batch, &spec, None, &mut rng)?;
    Ok((loss, adapter.named_grads(grads.adapter.unwrap_or_default())))
}

/// Central-difference check of an arbitrary objective.
///
/// `objective` maps parameters to `(loss, analytic gradients)`. Returns the
/// maximum over all entries of `|analytic − numeric| / (|numeric| + 1e-12)`.
pub fn grad_check_fn<S: Scalar>(
    params: &GradientMap<S>,
    epsilon: f64,
    mut objective: impl FnMut(&GradientMap<S>) -> Result<(S, GradientMap<S>)>,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let (_, analytic) = objective(params)?;
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (name, tensor) in params {
        let g = analytic
            .get(name)
            .ok_or_else(|| Error::invalid(format!("objective returned no gradient for `{name}`")))?;
        for idx in 0..tensor.len() {
            let orig = tensor.as_slice()[idx];
            work.get_mut(name).expect("cloned").as_mut_slice()[idx] = orig + S::of(epsilon);
            let (plus, _) = objective(&work)?;
            work.get_mut(name).expect("cloned").as_mut_slice()[idx] = orig - S::of(epsilon);
            let (minus, _) = objective(&work)?;
            work.get_mut(name).expect("cloned").as_mut_slice()[idx] = orig;
            let numeric = (plus.as_f64() - minus.as_f64()) / (2.0 * epsilon);
            let err = (g.as_slice()[idx].as_f64() - numeric).abs() / (numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Exhaustive central-difference check of [`loss_and_grads`] over every
/// adapter entry.
pub fn grad_check<S: Scalar, E: Supervised>(
    model: &BaseModel<S>,
    adapter: &LoraAdapter<S>,
    batch: &[E],
    spec: &LossSpec,
    epsilon: f64,
) -> Result<f64> {
    let params = adapter.named_params();
    let mut scratch = adapter.clone();
    grad_check_fn(&params, epsilon, |p| {
        scratch.load_named(p)?;
        loss_and_grads(model, &scratch, batch, spec)
    })
}

/// Mean next-token cross-entropy over all positions of each sequence,
/// with gradients for every base parameter. Used for pretraining.
pub fn sequence_loss_and_grads<S: Scalar>(
    model: &BaseModel<S>,
    sequences: &[Vec<TokenId>],
    mode: DropoutMode,
    rng: &mut impl Rng,
) -> Result<(S, Params<S>)> {
    let mut grads = Grads::empty(model, &Overlay::none(), GradRequest {
        base: true,
        ..Default::default()
    });
    let mut total = S::zero();
    let mut count = 0usize;
    for seq in sequences {
        if seq.len() < 2 {
            continue;
        }
        let input = &seq[..seq.len() - 1];
        let (logits, cache) = forward_cached(model, &Overlay::none(), input, mode, rng, Positions::All)?;
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        for i in 0..input.len() {
            let y = seq[i + 1] as usize;
            let p = softmax(logits.row(i));
            total -= p[y].ln();
            let row = dlogits.row_mut(i);
            row.copy_from_slice(&p);
            row[y] -= S::one();
        }
        count += input.len();
        backward(model, &Overlay::none(), &cache, &dlogits, &mut grads);
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = S::one() / S::of(count as f64);
    grads.scale(inv);
    Ok((total * inv, grads.base.expect("requested")))
}
