//! Predictors over a shared frozen base: LoRA ensembles, single adapters,
//! MC dropout on adapter inputs, last-layer ensembles and few-shot prompting.

use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_adapter, load_base};
use crate::data::TaskExample;
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::model::{final_hidden, forward_with, BaseModel, DropoutMode, HeadRows, Overlay, TokenId};
use crate::scalar::Scalar;
use crate::tensor::{dot, softmax, Matrix};
use crate::train::{adamw_step, OptimizerState, TrainConfig};

pub const DEFAULT_MC_PASSES: usize = 5;

/// Softmax over the full vocabulary restricted to `labels` and renormalized.
pub fn task_normalize<S: Scalar>(logits: &[S], labels: &[TokenId]) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("empty label set"));
    }
    check_distinct(labels)?;
    let probs = softmax(logits);
    restrict(&probs.iter().map(|p| p.as_f64()).collect::<Vec<_>>(), labels)
}

fn check_distinct(labels: &[TokenId]) -> Result<()> {
    for (i, t) in labels.iter().enumerate() {
        if labels[..i].contains(t) {
            return Err(Error::invalid(format!("label token {t} used by two options")));
        }
    }
    Ok(())
}

fn restrict(probs: &[f64], labels: &[TokenId]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(labels.len());
    for &t in labels {
        out.push(*probs.get(t as usize).ok_or(Error::TokenOutOfVocab {
            token: t,
            vocab: probs.len(),
        })?);
    }
    let z: f64 = out.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::ZeroNormalizer);
    }
    for p in &mut out {
        *p /= z;
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax_lowest(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    /// One task-normalized distribution per member or stochastic pass.
    pub member_probs: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub gold: usize,
    pub confidence: f64,
    pub correct: bool,
}

impl PredictionRecord {
    /// Ensembles by the arithmetic mean of the member distributions. The
    /// running-mean update returns identical members unchanged, bit for bit.
    pub fn from_members(id: &str, gold: usize, member_probs: Vec<Vec<f64>>) -> Self {
        let mut probs = member_probs[0].clone();
        for (i, p) in member_probs.iter().enumerate().skip(1) {
            let w = 1.0 / (i + 1) as f64;
            for (mean, &x) in probs.iter_mut().zip(p) {
                *mean += (x - *mean) * w;
            }
        }
        Self::from_probs(id, gold, member_probs, probs)
    }

    pub fn from_probs(id: &str, gold: usize, member_probs: Vec<Vec<f64>>, probs: Vec<f64>) -> Self {
        let predicted = argmax_lowest(&probs);
        Self {
            id: id.to_string(),
            confidence: probs[predicted],
            correct: predicted == gold,
            member_probs,
            probs,
            predicted,
            gold,
        }
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    crate::checkpoint::write_atomic(path, &out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    #[default]
    LoraEnsemble,
    Single,
    McDropout,
    LastLayerEnsemble,
    /// The bare base model, used for few-shot prompting.
    Base,
}

/// Order in which task normalization and member averaging are composed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    NormalizeThenAverage,
    /// Average full-vocabulary distributions, then normalize over the labels.
    AverageThenNormalize,
}

#[derive(Clone, Debug)]
pub struct EnsembleBundle<S = f64> {
    pub base: Arc<BaseModel<S>>,
    pub members: Vec<Arc<LoraAdapter<S>>>,
    pub kind: EnsembleKind,
    pub mc_passes: usize,
    pub dropout_p: f64,
    pub head_variants: Vec<HeadRows<S>>,
    pub combine: Combine,
}

impl<S: Scalar> EnsembleBundle<S> {
    fn with(base: Arc<BaseModel<S>>, members: Vec<Arc<LoraAdapter<S>>>, kind: EnsembleKind) -> Self {
        Self {
            base,
            members,
            kind,
            mc_passes: DEFAULT_MC_PASSES,
            dropout_p: 0.0,
            head_variants: Vec::new(),
            combine: Combine::default(),
        }
    }

    pub fn lora_ensemble(base: Arc<BaseModel<S>>, members: Vec<Arc<LoraAdapter<S>>>) -> Result<Self> {
        let b = Self::with(base, members, EnsembleKind::LoraEnsemble);
        b.validate()?;
        Ok(b)
    }

    pub fn single(base: Arc<BaseModel<S>>, member: Arc<LoraAdapter<S>>) -> Self {
        Self::with(base, vec![member], EnsembleKind::Single)
    }

    pub fn mc_dropout(base: Arc<BaseModel<S>>, member: Arc<LoraAdapter<S>>, passes: usize, p: f64) -> Result<Self> {
        let b = Self {
            mc_passes: passes,
            dropout_p: p,
            ..Self::with(base, vec![member], EnsembleKind::McDropout)
        };
        b.validate()?;
        Ok(b)
    }

    pub fn last_layer(base: Arc<BaseModel<S>>, variants: Vec<HeadRows<S>>) -> Result<Self> {
        let b = Self {
            head_variants: variants,
            ..Self::with(base, Vec::new(), EnsembleKind::LastLayerEnsemble)
        };
        b.validate()?;
        Ok(b)
    }

    pub fn base_only(base: Arc<BaseModel<S>>) -> Self {
        Self::with(base, Vec::new(), EnsembleKind::Base)
    }

    pub fn with_combine(mut self, combine: Combine) -> Self {
        self.combine = combine;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            EnsembleKind::LoraEnsemble => !self.members.is_empty(),
            EnsembleKind::Single => self.members.len() == 1,
            EnsembleKind::McDropout => {
                self.members.len() == 1 && self.mc_passes >= 1 && (0.0..1.0).contains(&self.dropout_p)
            }
            EnsembleKind::LastLayerEnsemble => !self.head_variants.is_empty(),
            EnsembleKind::Base => self.members.is_empty(),
        };
        if !ok {
            return Err(Error::invalid(format!(
                "{:?} bundle with {} members, {} head variants, {} passes, dropout {}",
                self.kind,
                self.members.len(),
                self.head_variants.len(),
                self.mc_passes,
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Number of distributions that get averaged.
    pub fn size(&self) -> usize {
        match self.kind {
            EnsembleKind::LoraEnsemble | EnsembleKind::Single => self.members.len(),
            EnsembleKind::McDropout => self.mc_passes,
            EnsembleKind::LastLayerEnsemble => self.head_variants.len(),
            EnsembleKind::Base => 1,
        }
    }

    fn member_logits(&self, tokens: &[TokenId], rng: &mut impl Rng) -> Result<Vec<Vec<S>>> {
        let base = &*self.base;
        match self.kind {
            EnsembleKind::LoraEnsemble | EnsembleKind::Single => self
                .members
                .iter()
                .map(|a| forward_with(base, &Overlay::adapter(Some(a)), tokens, DropoutMode::Eval, rng))
                .collect(),
            EnsembleKind::McDropout => {
                let overlay = Overlay::adapter(Some(&*self.members[0]));
                let mode = DropoutMode::Mc { p: self.dropout_p };
                (0..self.mc_passes)
                    .map(|_| forward_with(base, &overlay, tokens, mode, rng))
                    .collect()
            }
            EnsembleKind::LastLayerEnsemble => self
                .head_variants
                .iter()
                .map(|h| {
                    let overlay = Overlay {
                        adapter: None,
                        head: Some(h),
                    };
                    forward_with(base, &overlay, tokens, DropoutMode::Eval, rng)
                })
                .collect(),
            EnsembleKind::Base => Ok(vec![forward_with(base, &Overlay::none(), tokens, DropoutMode::Eval, rng)?]),
        }
    }

    /// Prediction for an arbitrary token sequence whose next token is the answer.
    pub fn predict_tokens(
        &self,
        id: &str,
        tokens: &[TokenId],
        labels: &[TokenId],
        gold: usize,
        rng: &mut impl Rng,
    ) -> Result<PredictionRecord> {
        self.validate()?;
        if labels.is_empty() {
            return Err(Error::invalid("empty label set"));
        }
        check_distinct(labels)?;
        let logits = self.member_logits(tokens, rng)?;
        let member_probs = logits
            .iter()
            .map(|l| task_normalize(l, labels))
            .collect::<Result<Vec<_>>>()?;
        match self.combine {
            Combine::NormalizeThenAverage => Ok(PredictionRecord::from_members(id, gold, member_probs)),
            Combine::AverageThenNormalize => {
                let vocab = logits[0].len();
                let mut mean = vec![0.0; vocab];
                for l in &logits {
                    for (m, p) in mean.iter_mut().zip(softmax(l)) {
                        *m += p.as_f64() / logits.len() as f64;
                    }
                }
                let probs = restrict(&mean, labels)?;
                Ok(PredictionRecord::from_probs(id, gold, member_probs, probs))
            }
        }
    }

    pub fn predict(&self, example: &TaskExample, rng: &mut impl Rng) -> Result<PredictionRecord> {
        self.predict_tokens(&example.id, &example.prompt_tokens, &example.label_tokens, example.gold, rng)
    }

    /// Predictions for every example. Example `i` draws its randomness from
    /// a stream seeded by `(seed, i)`, so results do not depend on batching.
    pub fn predict_all(&self, examples: &[TaskExample], seed: u64) -> Result<Vec<PredictionRecord>> {
        examples
            .iter()
            .enumerate()
            .map(|(i, ex)| self.predict(ex, &mut example_rng(seed, i)))
            .collect()
    }
}

impl EnsembleBundle<f64> {
    /// Loads the base once and every adapter against its fingerprint.
    pub fn load(base_path: &Path, adapter_paths: &[impl AsRef<Path>], kind: EnsembleKind) -> Result<Self> {
        let base = Arc::new(load_base(base_path)?);
        let fp = base.fingerprint();
        let members = adapter_paths
            .iter()
            .map(|p| Ok(Arc::new(load_adapter(p.as_ref(), fp)?.adapter)))
            .collect::<Result<Vec<_>>>()?;
        let b = Self::with(base, members, kind);
        b.validate()?;
        Ok(b)
    }
}

pub(crate) fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `n_draws` sorted index lists of `m` distinct members out of `pool_size`.
pub fn subsample_indices(pool_size: usize, m: usize, n_draws: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m > pool_size {
        return Err(Error::invalid(format!("cannot draw {m} members from a pool of {pool_size}")));
    }
    if m == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_draws)
        .map(|_| {
            let mut d = index::sample(&mut rng, pool_size, m).into_vec();
            d.sort_unstable();
            d
        })
        .collect())
}

pub fn subsample_pool<S: Scalar>(
    base: &Arc<BaseModel<S>>,
    pool: &[Arc<LoraAdapter<S>>],
    m: usize,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<EnsembleBundle<S>>> {
    subsample_indices(pool.len(), m, n_draws, seed)?
        .into_iter()
        .map(|idx| EnsembleBundle::lora_ensemble(base.clone(), idx.into_iter().map(|i| pool[i].clone()).collect()))
        .collect()
}

/// `n_draws` prompts, each prefixing `k` demonstrations drawn without
/// replacement from `demos`.
pub fn few_shot_prompt(
    example: &TaskExample,
    demos: &[TaskExample],
    k: usize,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    if k > demos.len() {
        return Err(Error::invalid(format!("{k} demonstrations requested from {}", demos.len())));
    }
    if demos.iter().any(|d| d.id == example.id) {
        return Err(Error::invalid(format!("demonstrations contain the query {:?}", example.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_draws)
        .map(|_| {
            let mut seq: Vec<TokenId> = Vec::new();
            for i in index::sample(&mut rng, demos.len(), k) {
                seq.extend_from_slice(&demos[i].demo_tokens);
            }
            seq.extend_from_slice(&example.prompt_tokens);
            seq
        })
        .collect())
}

/// Base-model predictions under few-shot prompting, one run per draw.
/// Draw `d` of every example uses the demonstrations sampled with seed
/// `seed + i` for example `i`.
pub fn predict_few_shot<S: Scalar>(
    base: &Arc<BaseModel<S>>,
    examples: &[TaskExample],
    demos: &[TaskExample],
    k: usize,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<Vec<PredictionRecord>>> {
    let bundle = EnsembleBundle::base_only(base.clone());
    let mut runs = vec![Vec::with_capacity(examples.len()); n_draws];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (i, ex) in examples.iter().enumerate() {
        let prompts = few_shot_prompt(ex, demos, k, n_draws, seed.wrapping_add(i as u64))?;
        for (d, p) in prompts.iter().enumerate() {
            runs[d].push(bundle.predict_tokens(&ex.id, p, &ex.label_tokens, ex.gold, &mut rng)?);
        }
    }
    Ok(runs)
}

/// Mean full-vocabulary NLL of the gold letter and gradient with respect
/// to the replacement rows, from precomputed final hidden states.
fn head_rows_loss<S: Scalar>(
    head: &Matrix<S>,
    rows: &HeadRows<S>,
    hidden: &[Vec<S>],
    targets: &[usize],
    batch: &[usize],
) -> (f64, Matrix<S>) {
    let mut grad = Matrix::zeros(rows.rows.rows(), rows.rows.cols());
    let mut loss = 0.0;
    let inv = S::one() / S::of(batch.len() as f64);
    for &i in batch {
        let h = &hidden[i];
        let mut logits: Vec<S> = (0..head.rows()).map(|v| dot(head.row(v), h)).collect();
        for (j, &t) in rows.tokens.iter().enumerate() {
            logits[t as usize] = dot(rows.rows.row(j), h);
        }
        let p = softmax(&logits);
        let target = targets[i];
        loss -= p[rows.tokens[target] as usize].as_f64().ln();
        for (j, &t) in rows.tokens.iter().enumerate() {
            let d = (p[t as usize] - if j == target { S::one() } else { S::zero() }) * inv;
            for (g, &x) in grad.row_mut(j).iter_mut().zip(h) {
                *g += d * x;
            }
        }
    }
    (loss / batch.len() as f64, grad)
}

/// Trains `m` sets of output-head rows for the option letters, each from the
/// pre-trained rows, with member `i` shuffling under `config.for_member(i)`.
/// Everything else stays frozen, so final hidden states are computed once.
pub fn train_last_layer_ensemble<S: Scalar>(
    base: &Arc<BaseModel<S>>,
    data: &[TaskExample],
    m: usize,
    config: &TrainConfig,
) -> Result<EnsembleBundle<S>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    if m == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let labels = data[0].label_tokens.clone();
    if let Some(ex) = data.iter().find(|e| e.label_tokens != labels) {
        return Err(Error::invalid(format!("example {:?} uses a different label set", ex.id)));
    }
    let hidden = data
        .iter()
        .map(|ex| final_hidden(base, &ex.prompt_tokens))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<usize> = data.iter().map(|e| e.gold).collect();
    let head = &base.params.head;
    let mut variants = Vec::with_capacity(m);
    for member in 0..m {
        let cfg = config.for_member(member);
        let opt = cfg.adamw();
        let mut rows = HeadRows::from_base(base, &labels)?;
        let mut state = OptimizerState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..cfg.epochs_to_run() {
            if !cfg.fix_shuffle {
                order.shuffle(&mut rng);
            }
            for batch in order.chunks(cfg.batch_size) {
                let (loss, grad) = head_rows_loss(head, &rows, &hidden, &targets, batch);
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        reason: format!("last-layer loss {loss}"),
                    });
                }
                let mut named = crate::model::GradientMap::new();
                named.insert(HeadRows::<S>::PARAM_NAME.to_string(), grad);
                adamw_step(&mut state, &named, &mut rows, &opt)?;
            }
        }
        variants.push(rows);
    }
    EnsembleBundle::last_layer(base.clone(), variants)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        let uniform = task_normalize(&[0.3f64; 10], &[1, 2, 3, 4]).unwrap();
        for p in uniform {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let logits: Vec<f64> = [0.2f64, 0.1, 0.1, 0.6].iter().map(|p| p.ln()).collect();
        let p = task_normalize(&logits, &[0, 1, 2]).unwrap();
        for (a, b) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_errors() {
        assert!(task_normalize(&[0.0f64; 4], &[]).is_err());
        assert!(task_normalize(&[0.0f64; 4], &[1, 1]).is_err());
        let dead = [f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0];
        assert!(matches!(task_normalize(&dead, &[0, 1]), Err(Error::ZeroNormalizer)));
    }

    #[test]
    fn two_member_average() {
        let r = PredictionRecord::from_members("x", 0, vec![vec![0.9, 0.1], vec![0.5, 0.5]]);
        assert!((r.probs[0] - 0.7).abs() < 1e-15 && (r.probs[1] - 0.3).abs() < 1e-15);
        assert_eq!(r.predicted, 0);
        assert!((r.confidence - 0.7).abs() < 1e-15);
        assert!(r.correct);
    }

    #[test]
    fn ties_pick_lowest() {
        assert_eq!(argmax_lowest(&[0.25, 0.25, 0.5, 0.5]), 2);
        assert_eq!(argmax_lowest(&[0.5, 0.5]), 0);
    }

    #[test]
    fn subsample_contract() {
        assert!(subsample_indices(3, 4, 1, 0).is_err());
        let d = subsample_indices(3, 3, 4, 1).unwrap();
        assert!(d.iter().all(|x| x == &vec![0, 1, 2]));
    }
}
