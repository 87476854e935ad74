//! Accuracy, NLL, expected calibration error, OOD AUROC from the maximum
//! softmax probability, and the raw data behind reliability diagrams.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ensemble::PredictionRecord;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    InDistribution,
    Ood,
}

/// Predictions of one predictor on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRun {
    pub predictions: Vec<PredictionRecord>,
    pub split: Split,
    pub source: String,
}

impl EvalRun {
    pub fn new(predictions: Vec<PredictionRecord>, split: Split, source: impl Into<String>) -> Result<Self> {
        let first = predictions.first().ok_or(Error::EmptyBatch)?;
        let k = first.probs.len();
        if let Some(bad) = predictions.iter().find(|r| r.probs.len() != k) {
            return Err(Error::invalid(format!(
                "record {:?} has {} options, expected {k}",
                bad.id,
                bad.probs.len()
            )));
        }
        Ok(Self {
            predictions,
            split,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

pub fn accuracy(run: &EvalRun) -> f64 {
    let hits = run.predictions.iter().filter(|r| r.correct).count();
    hits as f64 / run.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nll {
    /// `+∞` when any gold probability is zero.
    pub value: f64,
    /// Records whose gold probability is zero.
    pub infinite: usize,
}

/// Mean `−ln p(gold)` under the ensembled distribution.
pub fn nll(run: &EvalRun) -> Nll {
    let mut total = 0.0;
    let mut infinite = 0;
    for r in &run.predictions {
        let p = r.probs[r.gold];
        if p > 0.0 {
            total -= p.ln();
        } else {
            infinite += 1;
        }
    }
    let value = if infinite > 0 {
        f64::INFINITY
    } else {
        total / run.len() as f64
    };
    Nll { value, infinite }
}

/// Equal-width bin of a confidence in `[0, 1]`. A value on an interior edge
/// belongs to the upper bin; 1.0 belongs to the top bin.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    let edge = |i: usize| i as f64 / n_bins as f64;
    let mut b = ((confidence * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
    // `floor(c·n)` can land one bin off of `c ≥ i/n` because of rounding.
    if b + 1 < n_bins && confidence >= edge(b + 1) {
        b += 1;
    } else if b > 0 && confidence < edge(b) {
        b -= 1;
    }
    b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// NaN for an empty bin.
    pub mean_confidence: f64,
    /// NaN for an empty bin.
    pub accuracy: f64,
}

fn check_bins(n_bins: usize) -> Result<()> {
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be at least 1"));
    }
    Ok(())
}

pub fn reliability(run: &EvalRun, n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_bins(n_bins)?;
    let mut conf = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for r in &run.predictions {
        let b = bin_index(r.confidence, n_bins);
        conf[b] += r.confidence;
        hits[b] += r.correct as usize;
        count[b] += 1;
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b] as f64;
            ReliabilityBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_confidence: conf[b] / n,
                accuracy: hits[b] as f64 / n,
            }
        })
        .collect())
}

/// `Σ_b (|B_b|/N)·|acc(B_b) − conf(B_b)|` over equal-width confidence bins.
pub fn ece(run: &EvalRun, n_bins: usize) -> Result<f64> {
    let n = run.len() as f64;
    Ok(reliability(run, n_bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// Area under the ROC curve of `positives` against `negatives` via the
/// Mann–Whitney statistic; tied pairs count one half.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of the positives, with mid-ranks for ties.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let pos_in_group = all[i..j].iter().filter(|x| x.1).count() as u128;
        // ranks i+1 ..= j, mid-rank (i + 1 + j) / 2
        rank2_sum += pos_in_group * (i + 1 + j) as u128;
        i = j;
    }
    let np = positives.len() as u128;
    let nn = negatives.len() as u128;
    let u2 = rank2_sum - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

/// AUROC of the score `−confidence` with the OOD run as the positive class.
pub fn auroc_msp(in_run: &EvalRun, out_run: &EvalRun) -> Result<f64> {
    let score = |run: &EvalRun| run.predictions.iter().map(|r| -r.confidence).collect::<Vec<_>>();
    auroc(&score(out_run), &score(in_run))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub n_bins: usize,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

/// Confidences of wrong predictions, binned like [`ece`].
pub fn wrong_confidence_histogram(run: &EvalRun, n_bins: usize) -> Result<Histogram> {
    check_bins(n_bins)?;
    let mut counts = vec![0; n_bins];
    for r in run.predictions.iter().filter(|r| !r.correct) {
        counts[bin_index(r.confidence, n_bins)] += 1;
    }
    Ok(Histogram { n_bins, counts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub split: Split,
    pub source: String,
    pub n: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub nll_infinite: usize,
    pub ece: f64,
    pub n_bins: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auroc: Option<f64>,
    pub reliability: Vec<ReliabilityBin>,
    pub wrong_confidence: Histogram,
}

impl MetricsReport {
    /// Metrics of `run`; `ood` adds the AUROC of separating it from `run`.
    pub fn compute(predictor: &str, run: &EvalRun, n_bins: usize, ood: Option<&EvalRun>) -> Result<Self> {
        let nll = nll(run);
        Ok(Self {
            predictor: predictor.to_string(),
            split: run.split,
            source: run.source.clone(),
            n: run.len(),
            accuracy: accuracy(run),
            nll: nll.value,
            nll_infinite: nll.infinite,
            ece: ece(run, n_bins)?,
            n_bins,
            auroc: ood.map(|o| auroc_msp(run, o)).transpose()?,
            reliability: reliability(run, n_bins)?,
            wrong_confidence: wrong_confidence_histogram(run, n_bins)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let auroc = self.auroc.map_or("-".to_string(), |a| format!("{a:.4}"));
        let _ = writeln!(
            s,
            "{:<20} {:<16} {:>6} {:>8} {:>8} {:>8} {:>6} {:>8}",
            "predictor", "split", "n", "acc", "nll", "ece", "bins", "auroc"
        );
        let _ = writeln!(
            s,
            "{:<20} {:<16} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>8}",
            self.predictor,
            format!("{:?}", self.split),
            self.n,
            self.accuracy,
            self.nll,
            self.ece,
            self.n_bins,
            auroc
        );
        s
    }

    pub fn reliability_csv(&self) -> String {
        let mut s = String::from("lower,upper,count,mean_confidence,accuracy\n");
        for b in &self.reliability {
            let _ = writeln!(s, "{},{},{},{},{}", b.lower, b.upper, b.count, b.mean_confidence, b.accuracy);
        }
        s
    }
}
