use std::path::{Path, PathBuf};

use loraens::data::{GeneratorConfig, PretrainConfig};
use loraens::train::{DecayTarget, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub base: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    /// Out-of-distribution questions. Setting it turns on AUROC.
    pub ood: Option<PathBuf>,
    /// Where `finetune` writes adapters and the others read them. Defaults
    /// to `adapters/` inside the run directory when fine-tuning.
    pub adapter_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    /// Every member alone, metrics averaged.
    SingleMean,
    LoraEnsemble,
    McDropout,
    LastLayer,
    FewShot,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::SingleMean => "single_mean",
            Predictor::LoraEnsemble => "lora_ensemble",
            Predictor::McDropout => "mc_dropout",
            Predictor::LastLayer => "last_layer",
            Predictor::FewShot => "few_shot",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    /// Members trained by `finetune` and used by the ensemble predictors.
    pub members: usize,
    pub mc_passes: usize,
    pub mc_dropout: f64,
    pub few_shot_k: usize,
    pub few_shot_draws: usize,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: 5,
            mc_passes: 10,
            mc_dropout: 0.1,
            few_shot_k: 3,
            few_shot_draws: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub n_bins: usize,
    pub predictors: Vec<Predictor>,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n_bins: 10,
            predictors: vec![Predictor::SingleMean, Predictor::LoraEnsemble],
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Ensemble size, by subsampling a trained pool.
    M,
    Randomness,
    Decay,
    Kl,
    EarlyStop,
}

/// Which sources of member diversity stay on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Randomness {
    Both,
    ShuffleOnly,
    InitOnly,
    None,
}

impl Randomness {
    /// `(fix_init, fix_shuffle)`.
    pub fn flags(self) -> (bool, bool) {
        match self {
            Randomness::Both => (false, false),
            Randomness::ShuffleOnly => (true, false),
            Randomness::InitOnly => (false, true),
            Randomness::None => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Randomness::Both => "both",
            Randomness::ShuffleOnly => "shuffle_only",
            Randomness::InitOnly => "init_only",
            Randomness::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSpec {
    pub sweeps: Vec<Sweep>,
    pub m_values: Vec<usize>,
    pub draws: usize,
    pub randomness: Vec<Randomness>,
    pub decay_targets: Vec<DecayTarget>,
    pub weight_decays: Vec<f64>,
    pub kl_betas: Vec<f64>,
    pub early_stop: Vec<usize>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            sweeps: vec![Sweep::M],
            m_values: (1..=5).collect(),
            draws: 5,
            randomness: vec![Randomness::ShuffleOnly, Randomness::InitOnly, Randomness::None],
            decay_targets: vec![DecayTarget::AOnly, DecayTarget::BOnly, DecayTarget::Both],
            weight_decays: vec![1e-2, 1.0, 1e2],
            kl_betas: vec![0.0, 0.01, 0.05, 0.1],
            early_stop: vec![1, 2, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of the synthetic task generator.
    pub data_seed: u64,
    /// Parallel member training. Defaults to the number of members.
    pub jobs: Option<usize>,
    pub paths: Paths,
    pub generator: GeneratorConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleSpec,
    pub eval: EvalSpec,
    pub ablation: AblationSpec,
    /// Runs combined by `report`.
    pub runs: Vec<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            jobs: None,
            paths: Paths::default(),
            generator: GeneratorConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleSpec::default(),
            eval: EvalSpec::default(),
            ablation: AblationSpec::default(),
            runs: Vec::new(),
        }
    }
}

/// Recursively overlays `top` onto `bottom`; `top` wins on conflicts.
pub fn merge(bottom: &mut Table, top: Table) {
    for (k, v) in top {
        match (bottom.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                bottom.insert(k, v);
            }
        }
    }
}

/// Sets `dotted.key` in `table`, creating intermediate tables.
pub fn set(table: &mut Table, key: &str, value: impl Into<Value>) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("intermediate key is a table");
    }
    t.insert(last.to_string(), value.into());
}

impl ExperimentConfig {
    /// Built-in defaults, overlaid by command-line `flags`, overlaid by the
    /// config file.
    pub fn resolve(flags: Table, file: Option<&Path>) -> Result<Self> {
        let mut table = Table::try_from(ExperimentConfig::default()).expect("defaults serialise");
        merge(&mut table, flags);
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let parsed: Table = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        let cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
        cfg.train.validate()?;
        if cfg.eval.n_bins == 0 {
            return Err(CliError::config("eval.n_bins must be at least 1"));
        }
        if cfg.ensemble.members == 0 {
            return Err(CliError::config("ensemble.members must be at least 1"));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn fingerprint(&self) -> u64 {
        loraens::checkpoint::fingerprint_bytes(self.to_toml().as_bytes())
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(self.ensemble.members).max(1)
    }
}

/// The configured `path`, which must exist.
pub fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .ok_or_else(|| CliError::config(format!("{key} is not set")))?;
    if !p.exists() {
        return Err(CliError::config(format!("{key} not found: {}", p.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_flags_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[train]\nepochs = 3\n[ensemble]\nmembers = 2\n").unwrap();
        let mut flags = Table::new();
        set(&mut flags, "train.epochs", 7);
        set(&mut flags, "train.batch_size", 4);
        let cfg = ExperimentConfig::resolve(flags.clone(), Some(&file)).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.ensemble.members, 2);
        assert_eq!(cfg.train.step_size, TrainConfig::default().step_size);
        let no_file = ExperimentConfig::resolve(flags, None).unwrap();
        assert_eq!(no_file.train.epochs, 7);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn typos_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "[ensemble]\nmembrs = 2\n").unwrap();
        assert!(matches!(ExperimentConfig::resolve(Table::new(), Some(&file)), Err(CliError::Config(_))));
    }
}
