use std::path::PathBuf;
use std::sync::Arc;

use loraens::checkpoint::{load_adapter, load_base, save_adapter_new, save_base, AdapterCheckpoint};
use loraens::data::{
    export_jsonl, generate_synthetic, ingest_jsonl, pretrain_base, read_corpus, write_corpus, TaskExample, Tokenizer,
};
use loraens::lora::adapter_file_name;
use loraens::model::BaseModel;
use loraens::train::{train_member, MemberRun, TrainConfig};
use loraens::LoraAdapter64;
use rayon::prelude::*;

use crate::config::{require, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::run::{hex, MemberSeeds, Run};

pub fn dispatch(command: &str, cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    match command {
        "generate" => generate(cfg, run),
        "pretrain" => pretrain(cfg, run),
        "finetune" => finetune(cfg, run),
        "predict" => crate::predict::predict(cfg, run, false),
        "evaluate" => crate::predict::predict(cfg, run, true),
        "ablate" => crate::ablate::ablate(cfg, run),
        "report" => crate::report::report(cfg, run),
        other => Err(CliError::config(format!("unknown command {other}"))),
    }
}

fn generate(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let syn = generate_synthetic(&cfg.generator, cfg.data_seed)?;
    let corpus = run.path("corpus.txt");
    write_corpus(&corpus, &syn.corpus)?;
    run.artifact(&corpus)?;
    let tok = run.path("tokenizer.json");
    syn.tokenizer.save(&tok)?;
    run.artifact(&tok)?;
    for (name, examples) in [
        ("train.jsonl", &syn.in_dist.train),
        ("validation.jsonl", &syn.in_dist.validation),
        ("ood.jsonl", &syn.ood.train),
    ] {
        let p = run.path(name);
        export_jsonl(&p, examples)?;
        run.artifact(&p)?;
    }
    run.lap("generate");
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let corpus = read_corpus(require(&cfg.paths.corpus, "paths.corpus")?)?;
    let tokenizer = match &cfg.paths.tokenizer {
        Some(_) => Tokenizer::load(require(&cfg.paths.tokenizer, "paths.tokenizer")?)?,
        None => Tokenizer::fit(corpus.iter().map(String::as_str)),
    };
    run.lap("load");
    let (base, report) = pretrain_base(&corpus, &tokenizer, &cfg.pretrain)?;
    run.lap("pretrain");
    let path = run.path("base.ckpt");
    save_base(&base, &path)?;
    run.artifact(&path)?;
    let tok = run.path("tokenizer.json");
    tokenizer.save(&tok)?;
    run.artifact(&tok)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    run.write("pretrain.csv", csv)?;
    run.manifest.base_fingerprint = Some(hex(base.fingerprint()));
    Ok(())
}

pub fn load_tokenizer(cfg: &ExperimentConfig) -> Result<Tokenizer> {
    Ok(Tokenizer::load(require(&cfg.paths.tokenizer, "paths.tokenizer")?)?)
}

/// Loads the base and checks it against the tokenizer.
pub fn load_base_model(cfg: &ExperimentConfig, tokenizer: &Tokenizer) -> Result<Arc<BaseModel>> {
    let base: BaseModel = load_base(require(&cfg.paths.base, "paths.base")?)?;
    if base.config.vocab_size != tokenizer.len() {
        return Err(CliError::config(format!(
            "base vocabulary has {} entries but the tokenizer {}",
            base.config.vocab_size,
            tokenizer.len()
        )));
    }
    Ok(Arc::new(base))
}

/// Well-formed records of a JSONL file. Malformed lines are reported on
/// stderr; a file without any valid record is an error.
pub fn load_examples(path: &Option<PathBuf>, key: &str, tokenizer: &Tokenizer) -> Result<Vec<TaskExample>> {
    let p = require(path, key)?;
    let ingested = ingest_jsonl(p, tokenizer)?;
    for e in &ingested.errors {
        eprintln!("warning: {}:{}: {}", p.display(), e.line, e.message);
    }
    if ingested.dataset.train.is_empty() {
        return Err(CliError::config(format!("{key} {} holds no valid records", p.display())));
    }
    Ok(ingested.dataset.train)
}

pub fn load_optional(path: &Option<PathBuf>, key: &str, tokenizer: &Tokenizer) -> Result<Option<Vec<TaskExample>>> {
    path.as_ref().map(|_| load_examples(path, key, tokenizer)).transpose()
}

/// `*.adapter` files in the configured adapter directory, sorted by name.
pub fn adapter_paths(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = require(&cfg.paths.adapter_dir, "paths.adapter_dir")?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "adapter"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::config(format!("no .adapter files in {}", dir.display())));
    }
    Ok(paths)
}

pub fn load_pool(base: &BaseModel, paths: &[PathBuf]) -> Result<Vec<Arc<LoraAdapter64>>> {
    let fp = base.fingerprint();
    paths
        .iter()
        .map(|p| Ok(Arc::new(load_adapter(p, fp)?.adapter)))
        .collect()
}

/// Trains every configuration on a pool of `jobs` threads.
pub fn train_all(
    base: &BaseModel,
    train: &[TaskExample],
    val: &[TaskExample],
    configs: &[TrainConfig],
    jobs: usize,
) -> Result<Vec<loraens::Result<MemberRun>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| configs.par_iter().map(|c| train_member(base, train, val, c)).collect()))
}

pub fn seeds(index: usize, c: &TrainConfig) -> MemberSeeds {
    MemberSeeds {
        index,
        init_seed: c.effective_init_seed(),
        shuffle_seed: c.shuffle_seed,
        fix_init: c.fix_init,
        fix_shuffle: c.fix_shuffle,
    }
}

fn finetune(cfg: &ExperimentConfig, run: &mut Run) -> Result<()> {
    let tokenizer = load_tokenizer(cfg)?;
    let base = load_base_model(cfg, &tokenizer)?;
    let train = load_examples(&cfg.paths.train, "paths.train", &tokenizer)?;
    let val = load_optional(&cfg.paths.validation, "paths.validation", &tokenizer)?.unwrap_or_default();
    let dir = match &cfg.paths.adapter_dir {
        Some(d) => d.clone(),
        None => run.path("adapters"),
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let configs: Vec<TrainConfig> = (0..cfg.ensemble.members).map(|i| cfg.train.for_member(i)).collect();
    let targets: Vec<PathBuf> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| dir.join(adapter_file_name(i, c.init_seed)))
        .collect();
    if let Some(p) = targets.iter().find(|p| p.exists()) {
        return Err(CliError::config(format!("refusing to overwrite existing adapter {}", p.display())));
    }
    run.manifest.members = configs.iter().enumerate().map(|(i, c)| seeds(i, c)).collect();
    run.manifest.base_fingerprint = Some(hex(base.fingerprint()));
    run.lap("load");

    let results = train_all(&base, &train, &val, &configs, cfg.jobs())?;
    run.lap("train");
    let mut failures = Vec::new();
    for (i, (result, (config, path))) in results.into_iter().zip(configs.iter().zip(&targets)).enumerate() {
        match result {
            Ok(member) => {
                run.write(&format!("history/member-{i:02}.csv"), member.history.to_csv())?;
                if let Some(reason) = member.history.failure {
                    failures.push(format!("member {i}: {reason}"));
                    continue;
                }
                let ckpt = AdapterCheckpoint {
                    base_fingerprint: base.fingerprint(),
                    train_fingerprint: config.fingerprint(),
                    adapter: member.adapter,
                };
                save_adapter_new(&ckpt, path)?;
                run.artifact(path)?;
            }
            Err(e) if e.kind() == loraens::ErrorKind::Numerical => failures.push(format!("member {i}: {e}")),
            Err(e) => return Err(e.into()),
        }
    }
    run.lap("save");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "{} of {} members failed, survivors kept in {}: {}",
            failures.len(),
            configs.len(),
            dir.display(),
            failures.join("; ")
        )))
    }
}
