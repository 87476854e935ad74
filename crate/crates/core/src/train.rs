//! Fine-tuning of a single ensemble member.
//!
//! The optimizer is AdamW with the decay split by factor group: tensors picked
//! by [`DecayTarget`] use `weight_decay`, every other tensor uses
//! `baseline_decay`. Decay is decoupled and never enters the moment
//! estimates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskExample;
use crate::ensemble::{task_normalize, PredictionRecord};
use crate::error::{Error, Result};
use crate::eval::{self, EvalRun, Split};
use crate::lora::{init_from_spec, AdapterSpec, Factor, LoraAdapter};
use crate::model::{
    backward, forward, forward_cached, kl_and_grad, loss_and_grads_with, BaseModel, DropoutMode, GradRequest,
    GradTarget, GradientMap, Grads, HeadRows, KlScope, LossMode, LossSpec, Overlay, Params, Positions,
};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax, Matrix};

/// Seed used for adapter initialisation when `fix_init` is set.
pub const FIXED_INIT_SEED: u64 = 0x5eed_0000;
/// Seed of the adapter-dropout stream when `fix_shuffle` is set.
const FIXED_NOISE_SEED: u64 = 0x5eed_0001;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayTarget {
    #[default]
    None,
    AOnly,
    BOnly,
    Both,
}

impl DecayTarget {
    pub fn selects(self, factor: Option<Factor>) -> bool {
        matches!(
            (self, factor),
            (DecayTarget::Both, Some(_)) | (DecayTarget::AOnly, Some(Factor::A)) | (DecayTarget::BOnly, Some(Factor::B))
        )
    }
}

/// Sign of the decay term in `θ ← θ − γ(ĝ ± λθ)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySign {
    /// `θ − γ(ĝ + λθ)`: shrinks parameters.
    #[default]
    Standard,
    /// `θ − γ(ĝ − λθ)`: the literal printed form, kept for comparison.
    AsPrinted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_target: DecayTarget,
    pub baseline_decay: f64,
    pub decay_sign: DecaySign,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            decay_target: DecayTarget::None,
            baseline_decay: 1e-2,
            decay_sign: DecaySign::Standard,
        }
    }
}

impl AdamWConfig {
    /// Effective decay coefficient for a tensor.
    pub fn decay_for(&self, name: &str) -> f64 {
        if self.decay_target.selects(Factor::of_name(name)) {
            self.weight_decay
        } else {
            self.baseline_decay
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.step_size >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.baseline_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid optimizer configuration {self:?}")))
        }
    }
}

/// Anything with named trainable tensors.
pub trait Trainable<S> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<S>));
}

impl<S: Scalar> Trainable<S> for LoraAdapter<S> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<S>)) {
        self.for_each_param_mut(f);
    }
}

impl<S: Scalar> Trainable<S> for HeadRows<S> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<S>)) {
        f(HeadRows::<S>::PARAM_NAME, &mut self.rows);
    }
}

impl<S: Scalar> Trainable<S> for Params<S> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<S>)) {
        self.for_each_mut(f);
    }
}

impl<S: Scalar> Trainable<S> for GradientMap<S> {
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<S>)) {
        for (k, v) in self.iter_mut() {
            f(k, v);
        }
    }
}

/// First and second moments per trainable tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<S = f64> {
    pub m: BTreeMap<String, Matrix<S>>,
    pub v: BTreeMap<String, Matrix<S>>,
    pub t: u64,
}

/// One AdamW update. Fails without touching any tensor if a gradient is
/// missing, mis-shaped or non-finite.
pub fn adamw_step<S: Scalar>(
    state: &mut OptimizerState<S>,
    grads: &GradientMap<S>,
    trainables: &mut dyn Trainable<S>,
    config: &AdamWConfig,
) -> Result<()> {
    config.validate()?;
    let mut problem: Option<Error> = None;
    let mut seen = 0usize;
    trainables.visit_mut(&mut |name, theta| {
        seen += 1;
        if problem.is_some() {
            return;
        }
        match grads.get(name) {
            None => problem = Some(Error::Shape(format!("no gradient for `{name}`"))),
            Some(g) if g.shape() != theta.shape() => {
                problem = Some(Error::Shape(format!("gradient for `{name}` has shape {:?}", g.shape())))
            }
            Some(g) if !g.is_finite() => problem = Some(Error::NonFiniteGradient(name.to_string())),
            Some(_) => {}
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if seen != grads.len() {
        return Err(Error::Shape(format!("{} gradients for {seen} trainable tensors", grads.len())));
    }

    state.t += 1;
    let t = state.t as i32;
    let b1 = S::of(config.beta1);
    let b2 = S::of(config.beta2);
    let bc1 = S::of(1.0 - config.beta1.powi(t));
    let bc2 = S::of(1.0 - config.beta2.powi(t));
    let lr = S::of(config.step_size);
    let eps = S::of(config.eps);
    let sign = match config.decay_sign {
        DecaySign::Standard => S::one(),
        DecaySign::AsPrinted => -S::one(),
    };
    trainables.visit_mut(&mut |name, theta| {
        let g = &grads[name];
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(theta.rows(), theta.cols()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(theta.rows(), theta.cols()));
        let decay = sign * S::of(config.decay_for(name));
        for (((th, &gi), mi), vi) in theta
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mi = b1 * *mi + (S::one() - b1) * gi;
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let dir = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            *th -= lr * (dir + decay * *th);
        }
    });
    Ok(())
}

/// KL-to-base penalty `β · mean D_KL(p(·|x; W*+ΔW) ‖ p(·|x; W*))` at the
/// answer position and its gradient with respect to the adapter factors.
/// The base distribution is treated as a constant.
pub fn kl_regularizer<S: Scalar>(
    model: &BaseModel<S>,
    adapter: &LoraAdapter<S>,
    batch: &[TaskExample],
    beta: f64,
    scope: KlScope,
) -> Result<(S, GradientMap<S>)> {
    if beta < 0.0 {
        return Err(Error::invalid("beta must be non-negative"));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let overlay = Overlay::adapter(Some(adapter));
    let req = GradRequest {
        adapter: true,
        ..Default::default()
    };
    let mut grads = Grads::empty(model, &overlay, req);
    let mut total = S::zero();
    let n = S::of(batch.len() as f64);
    let scale = S::of(beta) / n;
    for ex in batch {
        let base = log_softmax(&forward(model, None, &ex.prompt_tokens, DropoutMode::Eval, &mut rng)?);
        let (logits, cache) = forward_cached(model, &overlay, &ex.prompt_tokens, DropoutMode::Eval, &mut rng, Positions::Last)?;
        let (kl, dkl) = kl_and_grad(logits.as_slice(), &base, scope, &ex.label_tokens);
        total += kl;
        let dl = Matrix::row_vector(dkl.into_iter().map(|g| g * scale).collect());
        backward(model, &overlay, &cache, &dl, &mut grads);
    }
    Ok((S::of(beta) * total / n, adapter.named_grads(grads.adapter.unwrap_or_default())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_target: DecayTarget,
    pub baseline_decay: f64,
    pub decay_sign: DecaySign,
    pub kl_beta: f64,
    pub kl_scope: KlScope,
    pub epochs: usize,
    pub early_stop_epochs: Option<usize>,
    pub batch_size: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub fix_init: bool,
    pub fix_shuffle: bool,
    pub adapter: AdapterSpec,
    /// Abort when a batch loss exceeds this multiple of the first batch loss.
    pub divergence_factor: f64,
    pub n_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        Self {
            step_size: opt.step_size,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            decay_target: opt.decay_target,
            baseline_decay: opt.baseline_decay,
            decay_sign: opt.decay_sign,
            kl_beta: 0.0,
            kl_scope: KlScope::FullVocab,
            epochs: 20,
            early_stop_epochs: None,
            batch_size: 8,
            init_seed: 0,
            shuffle_seed: 0,
            fix_init: false,
            fix_shuffle: false,
            adapter: AdapterSpec::default(),
            divergence_factor: 1e3,
            n_bins: 10,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            step_size: self.step_size,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            decay_target: self.decay_target,
            baseline_decay: self.baseline_decay,
            decay_sign: self.decay_sign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if let Some(k) = self.early_stop_epochs {
            if k == 0 || k > self.epochs {
                return Err(Error::invalid(format!("early_stop_epochs {k} must lie in 1..={}", self.epochs)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.kl_beta < 0.0 {
            return Err(Error::invalid("kl_beta must be non-negative"));
        }
        if self.n_bins == 0 {
            return Err(Error::invalid("n_bins must be at least 1"));
        }
        Ok(())
    }

    pub fn epochs_to_run(&self) -> usize {
        self.early_stop_epochs.unwrap_or(self.epochs)
    }

    pub fn effective_init_seed(&self) -> u64 {
        if self.fix_init {
            FIXED_INIT_SEED
        } else {
            self.init_seed
        }
    }

    /// Same configuration for ensemble member `index`: seeds offset by the index.
    pub fn for_member(&self, index: usize) -> Self {
        Self {
            init_seed: self.init_seed.wrapping_add(index as u64),
            shuffle_seed: self.shuffle_seed.wrapping_add(index as u64),
            ..self.clone()
        }
    }

    /// Hash of everything that determines the trained adapter. Seeds that a
    /// randomness flag overrides are left out.
    pub fn fingerprint(&self) -> u64 {
        let mut c = self.clone();
        if c.fix_init {
            c.init_seed = 0;
        }
        if c.fix_shuffle {
            c.shuffle_seed = 0;
        }
        crate::checkpoint::fingerprint_bytes(&serde_json::to_vec(&c).expect("config serialises"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_nll: f64,
    pub val_ece: f64,
    pub val_kl: f64,
    pub norm_a: f64,
    pub norm_b: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Set when the run was aborted.
    pub failure: Option<String>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_accuracy,val_nll,val_ece,val_kl,norm_a,norm_b";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_accuracy, r.val_nll, r.val_ece, r.val_kl, r.norm_a, r.norm_b
            ));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

#[derive(Clone, Debug)]
pub struct MemberRun<S = f64> {
    pub adapter: LoraAdapter<S>,
    pub history: TrainHistory,
}

impl<S> MemberRun<S> {
    pub fn diverged(&self) -> bool {
        self.history.failure.is_some()
    }
}

/// Single-member predictions and the mean full-vocabulary KL to the base on `val`.
pub fn validate_member<S: Scalar>(
    base: &BaseModel<S>,
    adapter: Option<&LoraAdapter<S>>,
    val: &[TaskExample],
    base_log_probs: &[Vec<S>],
) -> Result<(Vec<PredictionRecord>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut records = Vec::with_capacity(val.len());
    let mut kl = 0.0;
    for (ex, base_lp) in val.iter().zip(base_log_probs) {
        let logits = forward(base, adapter, &ex.prompt_tokens, DropoutMode::Eval, &mut rng)?;
        let (k, _) = kl_and_grad(&logits, base_lp, KlScope::FullVocab, &ex.label_tokens);
        kl += k.as_f64();
        let dist = task_normalize(&logits, &ex.label_tokens)?;
        records.push(PredictionRecord::from_members(&ex.id, ex.gold, vec![dist]));
    }
    Ok((records, kl / val.len().max(1) as f64))
}

pub(crate) fn base_log_probs<S: Scalar>(base: &BaseModel<S>, data: &[TaskExample]) -> Result<Vec<Vec<S>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    data.iter()
        .map(|ex| Ok(log_softmax(&forward(base, None, &ex.prompt_tokens, DropoutMode::Eval, &mut rng)?)))
        .collect()
}

/// Fine-tunes one adapter on `data`, recording validation metrics on `val`
/// after every epoch.
///
/// Randomness comes from two streams: adapter initialisation (`init_seed`,
/// or [`FIXED_INIT_SEED`] under `fix_init`) and per-epoch shuffling plus
/// adapter dropout (`shuffle_seed`; under `fix_shuffle` data is visited in
/// the given order and dropout uses a fixed stream).
pub fn train_member<S: Scalar>(
    base: &BaseModel<S>,
    data: &[TaskExample],
    val: &[TaskExample],
    config: &TrainConfig,
) -> Result<MemberRun<S>> {
    config.validate()?;
    if !base.frozen {
        return Err(Error::invalid("base model must be frozen before fine-tuning"));
    }
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    for ex in data {
        ex.check_labels(base.config.vocab_size)?;
    }
    let opt = config.adamw();
    let mut adapter: LoraAdapter<S> = init_from_spec(&base.config, &config.adapter, config.effective_init_seed())?;
    let mut state = OptimizerState::default();
    let train_base_lp = if config.kl_beta > 0.0 {
        Some(base_log_probs(base, data)?)
    } else {
        None
    };
    let val_base_lp = base_log_probs(base, val)?;
    let spec = LossSpec {
        kl_beta: config.kl_beta,
        kl_scope: config.kl_scope,
        target: GradTarget::Adapter,
        mode: LossMode::Train,
    };

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(if config.fix_shuffle {
        FIXED_NOISE_SEED
    } else {
        config.shuffle_seed ^ 0x9e37_79b9_7f4a_7c15
    });
    let mut history = TrainHistory::default();
    let mut reference_loss: Option<f64> = None;

    for epoch in 0..config.epochs_to_run() {
        if !config.fix_shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TaskExample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let cached: Option<Vec<Vec<S>>> = train_base_lp
                .as_ref()
                .map(|lp| chunk.iter().map(|&i| lp[i].clone()).collect());
            let step = loss_and_grads_with(
                base,
                &Overlay::adapter(Some(&adapter)),
                &batch,
                &spec,
                cached.as_deref(),
                &mut noise_rng,
            );
            let (loss, _, grads) = match step {
                Ok(v) => v,
                Err(e @ Error::NonFiniteActivation { .. }) => {
                    history.failure = Some(format!("epoch {}: {e}", epoch + 1));
                    return Ok(MemberRun { adapter, history });
                }
                Err(e) => return Err(e),
            };
            let loss = loss.as_f64();
            let reference = *reference_loss.get_or_insert(loss);
            if !loss.is_finite() || loss > config.divergence_factor * reference.max(f64::MIN_POSITIVE) {
                history.failure = Some(format!("epoch {}: loss {loss} diverged from {reference}", epoch + 1));
                return Ok(MemberRun { adapter, history });
            }
            loss_sum += loss * chunk.len() as f64;
            let named = adapter.named_grads(grads.adapter.unwrap_or_default());
            if let Err(e) = adamw_step(&mut state, &named, &mut adapter, &opt) {
                if matches!(e, Error::NonFiniteGradient(_)) {
                    history.failure = Some(format!("epoch {}: {e}", epoch + 1));
                    return Ok(MemberRun { adapter, history });
                }
                return Err(e);
            }
        }
        let (val_accuracy, val_nll, val_ece, val_kl) = if val.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let (records, kl) = validate_member(base, Some(&adapter), val, &val_base_lp)?;
            let run = EvalRun::new(records, Split::InDistribution, "validation")?;
            (eval::accuracy(&run), eval::nll(&run).value, eval::ece(&run, config.n_bins)?, kl)
        };
        let (norm_a, norm_b) = adapter.norms();
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / data.len() as f64,
            val_accuracy,
            val_nll,
            val_ece,
            val_kl,
            norm_a,
            norm_b,
        });
    }
    Ok(MemberRun { adapter, history })
}
