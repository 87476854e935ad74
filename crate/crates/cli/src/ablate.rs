use std::collections::BTreeMap;
use std::sync::Arc;

use loraens::ensemble::subsample_indices;
use loraens::train::TrainConfig;
use serde::Serialize;

use crate::commands::{adapter_paths, load_base_model, load_examples, load_optional, load_pool, load_tokenizer, seeds, train_all};
use crate::config::{ExperimentConfig, Sweep};
use crate::error::{CliError, Result};
use crate::predict::{ensemble_of, member_predictions, reports, Predictions, Scores};
use crate::run::Run;

/// One row of `ablation.csv`: a predictor evaluated at one sweep point and draw.
#[derive(Clone, Debug, Serialize)]
struct Row {
    sweep: &'static str,
    setting: String,
    draw: usize,
    predictor: &'static str,
    m: usize,
    #[serde(skip)]
    scores: Scores,
    accuracy: f64,
    nll: f64,
    ece: f64,
    auroc: Option<f64>,
    ood_accuracy: Option<f64>,
    ood_nll: Option<f64>,
    ood_ece: Option<f64>,
    norm_a: Option<f64>,
    norm_b: Option<f64>,
    val_kl: Option<f64>,
}

impl Row {
    fn new(sweep: &'static str, setting: String, draw: usize, predictor: &'static str, m: usize, scores: Scores) -> Self {
        Self {
            sweep,
            setting,
            draw,
            predictor,
            m,
            accuracy: scores.accuracy,
            nll: scores.nll,
            ece: scores.ece,
            auroc: scores.auroc,
            ood_accuracy: scores.ood_accuracy,
            ood_nll: scores.ood_nll,
            ood_ece: scores.ood_ece,
            scores,
            norm_a: None,
            norm_b: None,
            val_kl: None,
        }
    }
}

/// One row of `traces.csv`: a member's validation metrics after an epoch.
#[derive(Serialize)]
struct Trace<'a> {
    sweep: &'static str,
    setting: &'a str,
    member: usize,
    epoch: usize,
    train_loss: f64,
    val_accuracy: f64,
    val_nll: f64,
    val_ece: f64,
    val_kl: f64,
    norm_a: f64,
    norm_b: f64,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    sweep: &'a str,
    setting: &'a str,
    predictor: &'a str,
    draws: usize,
    accuracy: f64,
    accuracy_se: f64,
    nll: f64,
    nll_se: f64,
    ece: f64,
    ece_se: f64,
    auroc: Option<f64>,
}

fn sweep_name(s: Sweep) -> &'static str {
    match s {
        Sweep::M => "m",
        Sweep::Randomness => "randomness",
        Sweep::Decay => "decay",
        Sweep::Kl => "kl",
        Sweep::EarlyStop => "early_stop",
    }
}

/// Training configurations for each point of a training sweep.
fn settings(cfg: &ExperimentConfig, sweep: Sweep) -> Vec<(String, TrainConfig)> {
    let a = &cfg.ablation;
    let t = &cfg.train;
    match sweep {
        Sweep::M => Vec::new(),
        Sweep::Randomness => a
            .randomness
            .iter()
            .map(|r| {
                let (fix_init, fix_shuffle) = r.flags();
                (r.name().to_string(), TrainConfig { fix_init, fix_shuffle, ..t.clone() })
            })
            .collect(),
        Sweep::Decay => a
            .decay_targets
            .iter()
            .flat_map(|&d| {
                a.weight_decays.iter().map(move |&w| {
                    let name = serde_json::to_value(d).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                    (format!("{name}:{w}"), TrainConfig { decay_target: d, weight_decay: w, ..t.clone() })
                })
            })
            .collect(),
        Sweep::Kl => a
            .kl_betas
            .iter()
            .map(|&b| (format!("{b}"), TrainConfig { kl_beta: b, ..t.clone() }))
            .collect(),
        Sweep::EarlyStop => a
            .early_stop
            .iter()
            .map(|&k| (format!("{k}"), TrainConfig { early_stop_epochs: Some(k), epochs: t.epochs.max(k), ..t.clone() }))
            .collect(),
    }
}

fn check(cfg: &ExperimentConfig, pool: Option<usize>) -> Result<()> {
    let a = &cfg.ablation;
    if a.sweeps.is_empty() {
        return Err(CliError::config("ablation.sweeps is empty"));
    }
    for &s in &a.sweeps {
        let empty = match s {
            Sweep::M => a.m_values.is_empty() || a.draws == 0,
            Sweep::Randomness => a.randomness.is_empty(),
            Sweep::Decay => a.decay_targets.is_empty() || a.weight_decays.is_empty(),
            Sweep::Kl => a.kl_betas.is_empty(),
            Sweep::EarlyStop => a.early_stop.is_empty(),
        };
        if empty {
            return Err(CliError::config(format!("ablation sweep `{}` has no points", sweep_name(s))));
        }
    }
    if let Some(p) = pool {
        if let Some(&m) = a.m_values.iter().find(|&&m| m > p || m == 0) {
            return Err(CliError::config(format!("ensemble size M={m} is not in 1..={p}, the size of the adapter pool")));
        }
    }
    Ok(())
}

pub fn ablate(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    check(cfg, None)?;
    let wants = |s: Sweep| cfg.ablation.sweeps.contains(&s);
    let tokenizer = load_tokenizer(cfg)?;
    let base = load_base_model(cfg, &tokenizer)?;
    let val = load_examples(&cfg.paths.validation, "paths.validation", &tokenizer)?;
    let ood = load_optional(&cfg.paths.ood, "paths.ood", &tokenizer)?;
    let ood = ood.as_deref();
    let pool_paths = if wants(Sweep::M) { adapter_paths(cfg)? } else { Vec::new() };
    if wants(Sweep::M) {
        check(cfg, Some(pool_paths.len()))?;
    }
    let trains = cfg.ablation.sweeps.iter().any(|&s| s != Sweep::M);
    let train = if trains { load_examples(&cfg.paths.train, "paths.train", &tokenizer)? } else { Vec::new() };
    run.manifest.base_fingerprint = Some(crate::run::hex(base.fingerprint()));
    run.lap("load");

    let n_bins = cfg.eval.n_bins;
    let seed = cfg.eval.seed;
    let jobs = cfg.jobs();
    let score = |p: &Predictions| -> Result<Scores> { Ok(Scores::of(&reports("", p, n_bins, "ablation")?)) };
    let mut rows: Vec<Row> = Vec::new();
    let mut traces = csv::Writer::from_writer(Vec::new());

    for &sweep in &cfg.ablation.sweeps {
        let name = sweep_name(sweep);
        if sweep == Sweep::M {
            let pool = load_pool(&base, &pool_paths)?;
            let preds = member_predictions(&base, &pool, &val, ood, seed, jobs)?;
            for &m in &cfg.ablation.m_values {
                let draws = subsample_indices(pool.len(), m, cfg.ablation.draws, seed.wrapping_add(m as u64))?;
                for (d, idx) in draws.iter().enumerate() {
                    let chosen: Vec<&Predictions> = idx.iter().map(|&i| &preds[i]).collect();
                    rows.push(Row::new(name, format!("M={m}"), d, "lora_ensemble", m, score(&ensemble_of(&chosen))?));
                }
            }
            run.lap(name);
            continue;
        }
        for (setting, tc) in settings(cfg, sweep) {
            let configs: Vec<TrainConfig> = (0..cfg.ensemble.members).map(|i| tc.for_member(i)).collect();
            run.manifest.members.extend(configs.iter().enumerate().map(|(i, c)| seeds(i, c)));
            let mut adapters = Vec::new();
            let mut finals = Vec::new();
            for (i, r) in train_all(&base, &train, &val, &configs, jobs)?.into_iter().enumerate() {
                let member = r?;
                if let Some(reason) = &member.history.failure {
                    return Err(CliError::Numerical(format!("{name} {setting} member {i}: {reason}")));
                }
                for e in &member.history.epochs {
                    traces.serialize(Trace {
                        sweep: name,
                        setting: &setting,
                        member: i,
                        epoch: e.epoch,
                        train_loss: e.train_loss,
                        val_accuracy: e.val_accuracy,
                        val_nll: e.val_nll,
                        val_ece: e.val_ece,
                        val_kl: e.val_kl,
                        norm_a: e.norm_a,
                        norm_b: e.norm_b,
                    })?;
                }
                finals.push(member.history.last().cloned().expect("at least one epoch"));
                adapters.push(Arc::new(member.adapter));
            }
            let preds = member_predictions(&base, &adapters, &val, ood, seed, jobs)?;
            let m = adapters.len();
            let n = m as f64;
            let mean = |f: fn(&loraens::train::EpochRecord) -> f64| Some(finals.iter().map(f).sum::<f64>() / n);
            let singles: Vec<Scores> = preds.iter().map(&score).collect::<Result<_>>()?;
            rows.push(Row {
                norm_a: mean(|e| e.norm_a),
                norm_b: mean(|e| e.norm_b),
                val_kl: mean(|e| e.val_kl),
                ..Row::new(name, setting.clone(), 0, "single_mean", 1, Scores::mean(&singles))
            });
            let ensemble = score(&ensemble_of(&preds.iter().collect::<Vec<_>>()))?;
            rows.push(Row::new(name, setting, 0, "lora_ensemble", m, ensemble));
        }
        run.lap(name);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    run.write("ablation.csv", w.into_inner().map_err(|e| CliError::config(e.to_string()))?)?;
    if cfg.ablation.sweeps.iter().any(|&s| s != Sweep::M) {
        run.write("traces.csv", traces.into_inner().map_err(|e| CliError::config(e.to_string()))?)?;
    }
    run.write("ablation_summary.csv", summarize(&rows)?)?;
    run.lap("write");
    Ok(())
}

/// Mean and standard error over draws for each (sweep, setting, predictor),
/// in first-appearance order.
fn summarize(rows: &[Row]) -> Result<Vec<u8>> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<&Row>> = BTreeMap::new();
    for r in rows {
        let key = (r.sweep.to_string(), r.setting.clone(), r.predictor.to_string());
        groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        }).push(r);
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        (mean, se)
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for key in &order {
        let g = &groups[key];
        let col = |f: fn(&Row) -> f64| stats(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (accuracy, accuracy_se) = col(|r| r.scores.accuracy);
        let (nll, nll_se) = col(|r| r.scores.nll);
        let (ece, ece_se) = col(|r| r.scores.ece);
        let auroc = g.iter().map(|r| r.scores.auroc).sum::<Option<f64>>().map(|s| s / g.len() as f64);
        w.serialize(SummaryRow {
            sweep: &key.0,
            setting: &key.1,
            predictor: &key.2,
            draws: g.len(),
            accuracy,
            accuracy_se,
            nll,
            nll_se,
            ece,
            ece_se,
            auroc,
        })?;
    }
    w.into_inner().map_err(|e| CliError::config(e.to_string()))
}
