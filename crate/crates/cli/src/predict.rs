use std::sync::Arc;

use loraens::data::TaskExample;
use loraens::ensemble::{predict_few_shot, train_last_layer_ensemble, write_predictions, EnsembleBundle, PredictionRecord};
use loraens::eval::{EvalRun, MetricsReport, Split};
use loraens::model::BaseModel;
use loraens::LoraAdapter64;
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{adapter_paths, load_base_model, load_examples, load_optional, load_pool, load_tokenizer};
use crate::config::{ExperimentConfig, Predictor};
use crate::error::{CliError, Result};
use crate::run::Run;

/// Predictions of one predictor on the validation split and, when
/// configured, the OOD split.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub val: Vec<PredictionRecord>,
    pub ood: Option<Vec<PredictionRecord>>,
}

pub fn bundle_predictions(
    bundle: &EnsembleBundle,
    val: &[TaskExample],
    ood: Option<&[TaskExample]>,
    seed: u64,
) -> Result<Predictions> {
    Ok(Predictions {
        val: bundle.predict_all(val, seed)?,
        ood: ood.map(|o| bundle.predict_all(o, seed)).transpose()?,
    })
}

/// Each adapter on its own, in parallel.
pub fn member_predictions(
    base: &Arc<BaseModel>,
    members: &[Arc<LoraAdapter64>],
    val: &[TaskExample],
    ood: Option<&[TaskExample]>,
    seed: u64,
    jobs: usize,
) -> Result<Vec<Predictions>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        members
            .par_iter()
            .map(|m| bundle_predictions(&EnsembleBundle::single(base.clone(), m.clone()), val, ood, seed))
            .collect()
    })
}

fn average(records: &[&Vec<PredictionRecord>]) -> Vec<PredictionRecord> {
    (0..records[0].len())
        .map(|j| {
            let r0 = &records[0][j];
            PredictionRecord::from_members(&r0.id, r0.gold, records.iter().map(|r| r[j].probs.clone()).collect())
        })
        .collect()
}

/// LoRA ensemble of the given members' predictions.
pub fn ensemble_of(members: &[&Predictions]) -> Predictions {
    let val: Vec<&Vec<PredictionRecord>> = members.iter().map(|m| &m.val).collect();
    let ood: Option<Vec<&Vec<PredictionRecord>>> = members.iter().map(|m| m.ood.as_ref()).collect();
    Predictions {
        val: average(&val),
        ood: ood.map(|o| average(&o)),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Scores {
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub auroc: Option<f64>,
    pub ood_accuracy: Option<f64>,
    pub ood_nll: Option<f64>,
    pub ood_ece: Option<f64>,
}

pub struct Reports {
    pub val: MetricsReport,
    pub ood: Option<MetricsReport>,
}

pub fn reports(label: &str, p: &Predictions, n_bins: usize, source: &str) -> Result<Reports> {
    let in_run = EvalRun::new(p.val.clone(), Split::InDistribution, source)?;
    let ood_run = p.ood.clone().map(|o| EvalRun::new(o, Split::Ood, source)).transpose()?;
    Ok(Reports {
        val: MetricsReport::compute(label, &in_run, n_bins, ood_run.as_ref())?,
        ood: ood_run.map(|o| MetricsReport::compute(label, &o, n_bins, None)).transpose()?,
    })
}

impl Scores {
    pub fn of(r: &Reports) -> Self {
        Self {
            accuracy: r.val.accuracy,
            nll: r.val.nll,
            ece: r.val.ece,
            auroc: r.val.auroc,
            ood_accuracy: r.ood.as_ref().map(|o| o.accuracy),
            ood_nll: r.ood.as_ref().map(|o| o.nll),
            ood_ece: r.ood.as_ref().map(|o| o.ece),
        }
    }

    pub fn mean(all: &[Scores]) -> Self {
        let n = all.len() as f64;
        let m = |f: fn(&Scores) -> f64| all.iter().map(f).sum::<f64>() / n;
        let mo = |f: fn(&Scores) -> Option<f64>| all.iter().map(f).sum::<Option<f64>>().map(|s| s / n);
        Self {
            accuracy: m(|s| s.accuracy),
            nll: m(|s| s.nll),
            ece: m(|s| s.ece),
            auroc: mo(|s| s.auroc),
            ood_accuracy: mo(|s| s.ood_accuracy),
            ood_nll: mo(|s| s.ood_nll),
            ood_ece: mo(|s| s.ood_ece),
        }
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    predictor: &'a str,
    label: &'a str,
    n_bins: usize,
    accuracy: f64,
    nll: f64,
    ece: f64,
    auroc: Option<f64>,
    ood_accuracy: Option<f64>,
    ood_nll: Option<f64>,
    ood_ece: Option<f64>,
}

fn write_summary(run: &mut Run, rows: &[(String, String, Scores)], n_bins: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (predictor, label, scores) in rows {
        w.serialize(SummaryRow {
            predictor,
            label,
            n_bins,
            accuracy: scores.accuracy,
            nll: scores.nll,
            ece: scores.ece,
            auroc: scores.auroc,
            ood_accuracy: scores.ood_accuracy,
            ood_nll: scores.ood_nll,
            ood_ece: scores.ood_ece,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::config(e.to_string()))?;
    run.write("summary.csv", bytes)?;
    Ok(())
}

/// Runs every configured predictor and writes its predictions; with
/// `evaluate`, also per-predictor reports and a summary table.
pub fn predict(cfg: &ExperimentConfig, run: &mut Run, evaluate: bool) -> Result<()> {
    if cfg.eval.predictors.is_empty() {
        return Err(CliError::config("eval.predictors is empty"));
    }
    let tokenizer = load_tokenizer(cfg)?;
    let base = load_base_model(cfg, &tokenizer)?;
    let val = load_examples(&cfg.paths.validation, "paths.validation", &tokenizer)?;
    let ood = load_optional(&cfg.paths.ood, "paths.ood", &tokenizer)?;
    let ood = ood.as_deref();
    let needs = |p: &[Predictor]| cfg.eval.predictors.iter().any(|x| p.contains(x));
    let train = if needs(&[Predictor::LastLayer, Predictor::FewShot]) {
        load_examples(&cfg.paths.train, "paths.train", &tokenizer)?
    } else {
        Vec::new()
    };
    let members = if needs(&[Predictor::SingleMean, Predictor::LoraEnsemble, Predictor::McDropout]) {
        load_pool(&base, &adapter_paths(cfg)?)?
    } else {
        Vec::new()
    };
    run.manifest.base_fingerprint = Some(crate::run::hex(base.fingerprint()));
    run.lap("load");

    let seed = cfg.eval.seed;
    let per_member = if needs(&[Predictor::SingleMean, Predictor::LoraEnsemble]) {
        member_predictions(&base, &members, &val, ood, seed, cfg.jobs())?
    } else {
        Vec::new()
    };
    // (predictor, member labels and predictions)
    let mut groups: Vec<(Predictor, Vec<(String, Predictions)>)> = Vec::new();
    for &p in &cfg.eval.predictors {
        let outputs = match p {
            Predictor::SingleMean => per_member
                .iter()
                .enumerate()
                .map(|(i, m)| (format!("single-{i:02}"), m.clone()))
                .collect(),
            Predictor::LoraEnsemble => vec![(p.name().to_string(), ensemble_of(&per_member.iter().collect::<Vec<_>>()))],
            Predictor::McDropout => {
                let b = EnsembleBundle::mc_dropout(base.clone(), members[0].clone(), cfg.ensemble.mc_passes, cfg.ensemble.mc_dropout)?;
                vec![(p.name().to_string(), bundle_predictions(&b, &val, ood, seed)?)]
            }
            Predictor::LastLayer => {
                let b = train_last_layer_ensemble(&base, &train, cfg.ensemble.members, &cfg.train)?;
                vec![(p.name().to_string(), bundle_predictions(&b, &val, ood, seed)?)]
            }
            Predictor::FewShot => {
                let (k, draws) = (cfg.ensemble.few_shot_k, cfg.ensemble.few_shot_draws.max(1));
                let v = predict_few_shot(&base, &val, &train, k, draws, seed)?;
                let o = ood.map(|o| predict_few_shot(&base, o, &train, k, draws, seed)).transpose()?;
                v.into_iter()
                    .enumerate()
                    .map(|(d, val)| {
                        let label = if draws == 1 { p.name().to_string() } else { format!("few_shot-d{d}") };
                        (label, Predictions { val, ood: o.as_ref().map(|o| o[d].clone()) })
                    })
                    .collect()
            }
        };
        run.lap(p.name());
        groups.push((p, outputs));
    }

    let source = cfg.paths.validation.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let n_bins = cfg.eval.n_bins;
    let mut rows = Vec::new();
    run.subdir("predictions")?;
    for (p, outputs) in &groups {
        let mut scores = Vec::new();
        for (label, preds) in outputs {
            let path = run.path(&format!("predictions/{label}.validation.jsonl"));
            write_predictions(&path, &preds.val)?;
            run.artifact(&path)?;
            if let Some(o) = &preds.ood {
                let path = run.path(&format!("predictions/{label}.ood.jsonl"));
                write_predictions(&path, o)?;
                run.artifact(&path)?;
            }
            if evaluate {
                let r = reports(label, preds, n_bins, &source)?;
                run.write(&format!("reports/{label}.validation.json"), r.val.to_json())?;
                run.write(&format!("reports/{label}.validation.txt"), r.val.to_text())?;
                run.write(&format!("reports/{label}.validation.reliability.csv"), r.val.reliability_csv())?;
                if let Some(o) = &r.ood {
                    run.write(&format!("reports/{label}.ood.json"), o.to_json())?;
                    run.write(&format!("reports/{label}.ood.reliability.csv"), o.reliability_csv())?;
                }
                let s = Scores::of(&r);
                rows.push((p.name().to_string(), label.clone(), s.clone()));
                scores.push(s);
            }
        }
        if evaluate && outputs.len() > 1 {
            rows.push((p.name().to_string(), p.name().to_string(), Scores::mean(&scores)));
        }
    }
    if evaluate {
        write_summary(run, &rows, n_bins)?;
        for (_, label, s) in &rows {
            let auroc = s.auroc.map_or("-".into(), |a| format!("{a:.4}"));
            println!("{label:<16} acc {:.4}  nll {:.4}  ece {:.4}  auroc {auroc}", s.accuracy, s.nll, s.ece);
        }
    }
    run.lap("write");
    Ok(())
}
