#![allow(dead_code)]

use loraens::data::{generate_synthetic, GeneratorConfig, Synthetic};
use loraens::model::{BaseModel, ModelConfig};

pub fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        n_subjects: 16,
        n_relations: 3,
        n_ood_relations: 1,
        n_ood_subjects: 4,
        n_objects: 4,
        n_options: 4,
        n_train: 12,
        n_validation: 6,
        n_ood: 6,
        n_corpus_questions: 4,
        ..Default::default()
    }
}

pub fn small_task(seed: u64) -> Synthetic {
    generate_synthetic(&small_generator(), seed).unwrap()
}

pub fn small_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 128,
        mlp_hidden: 32,
        dropout_p: 0.0,
    }
}

/// Randomly initialised frozen base sized for `task`.
pub fn random_base(task: &Synthetic, seed: u64) -> BaseModel {
    BaseModel::init(small_model(task.tokenizer.len()), seed).unwrap().freeze()
}
