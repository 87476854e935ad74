use loraens::checkpoint::{
    adapter_file_size, base_file_size, base_load_count, encode_adapter, load_adapter, load_base, save_adapter,
    save_adapter_new, save_base, AdapterCheckpoint,
};
use loraens::lora::{effective_delta, init_adapter, AdapterSpec, LoraAdapter, Projection, ScaleMode, Target};
use loraens::model::{forward, BaseModel, DropoutMode, ModelConfig};
use loraens::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> ModelConfig {
    ModelConfig {
        vocab_size: 40,
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 16,
        mlp_hidden: 128,
        dropout_p: 0.0,
    }
}

fn trained_like(cfg: &ModelConfig, seed: u64) -> LoraAdapter {
    let mut a = init_adapter(cfg, &Target::all_query_value(cfg.n_layers), 8, 32.0, ScaleMode::AlphaOverR, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
    for f in &mut a.factors {
        f.b.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1));
    }
    a
}

#[test]
fn paper_rank_and_alpha_start_as_identity() {
    let cfg = toy();
    let base: BaseModel = BaseModel::init(cfg.clone(), 3).unwrap();
    let a: LoraAdapter = init_adapter(&cfg, &Target::all_query_value(2), 8, 32.0, ScaleMode::AlphaOverR, 5).unwrap();
    assert_eq!(a.factors.len(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tokens = [1, 7, 3, 30, 2];
    let with = forward(&base, Some(&a), &tokens, DropoutMode::Eval, &mut rng).unwrap();
    let without = forward(&base, None, &tokens, DropoutMode::Eval, &mut rng).unwrap();
    assert_eq!(with, without);
}

#[test]
fn seeding_is_deterministic_and_distinct() {
    let cfg = toy();
    let t = Target::all_query_value(2);
    let a: LoraAdapter = init_adapter(&cfg, &t, 8, 32.0, ScaleMode::AlphaOverR, 11).unwrap();
    let b: LoraAdapter = init_adapter(&cfg, &t, 8, 32.0, ScaleMode::AlphaOverR, 11).unwrap();
    let c: LoraAdapter = init_adapter(&cfg, &t, 8, 32.0, ScaleMode::AlphaOverR, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.factors[0].a, c.factors[0].a);
}

#[test]
fn kaiming_uniform_bound_and_mean() {
    // k = 100 input features, 1000 rows: 10⁵ entries.
    let cfg = ModelConfig {
        vocab_size: 8,
        d_model: 100,
        n_layers: 1,
        n_heads: 4,
        max_seq_len: 4,
        mlp_hidden: 8,
        dropout_p: 0.0,
    };
    let target = [Target::new(0, Projection::Query)];
    let mut entries = Vec::new();
    for seed in 0..13 {
        let a: LoraAdapter = init_adapter(&cfg, &target, 100, 1.0, ScaleMode::AlphaOverR, seed).unwrap();
        entries.extend_from_slice(a.factors[0].a.as_slice());
    }
    entries.truncate(100_000);
    assert_eq!(entries.len(), 100_000);
    let bound = (6.0f64 / 100.0).sqrt();
    assert!(entries.iter().all(|x| x.abs() <= bound));
    let n = entries.len() as f64;
    let mean = entries.iter().sum::<f64>() / n;
    // Uniform(−b, b) has standard deviation b/√3.
    let se = bound / 3f64.sqrt() / n.sqrt();
    assert!(mean.abs() < 3.0 * se, "mean {mean}, 3se {}", 3.0 * se);
}

#[test]
fn zero_b_delta_is_zero() {
    let cfg = toy();
    let a: LoraAdapter = init_adapter(&cfg, &Target::all_query_value(2), 8, 32.0, ScaleMode::LiteralAlpha, 1).unwrap();
    for t in a.targets() {
        assert!(effective_delta(&a, t).unwrap().is_all_zero());
    }
    assert!(effective_delta(&a, Target::new(5, Projection::Value)).is_err());
}

fn numeric_rank(m: &loraens::tensor::Matrix) -> usize {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    let sv = dm.singular_values();
    let top = sv.max();
    sv.iter().filter(|&&s| s > top * 1e-10).count()
}

#[test]
fn delta_rank_never_exceeds_r() {
    let cfg = toy();
    for seed in 0..3 {
        let a = trained_like(&cfg, seed);
        for t in a.targets() {
            let d = effective_delta(&a, t).unwrap();
            assert_eq!(d.shape(), (64, 64));
            assert!(numeric_rank(&d) <= a.rank);
        }
    }
}

#[test]
fn adapter_round_trip_is_exact() {
    let cfg = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("member-00.seed-7.adapter");
    let ckpt = AdapterCheckpoint {
        base_fingerprint: 42,
        train_fingerprint: 9,
        adapter: trained_like(&cfg, 7),
    };
    save_adapter(&ckpt, &path).unwrap();
    let back: AdapterCheckpoint = load_adapter(&path, 42).unwrap();
    assert_eq!(back, ckpt);
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, adapter_file_size(4, ckpt.adapter.parameter_count()));
}

#[test]
fn corruption_and_wrong_base_are_detected() {
    let cfg = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.adapter");
    let ckpt = AdapterCheckpoint {
        base_fingerprint: 1,
        train_fingerprint: 2,
        adapter: trained_like(&cfg, 1),
    };
    let mut bytes = encode_adapter(&ckpt);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        load_adapter::<f64>(&path, 2),
        Err(Error::FingerprintMismatch { expected: 2, found: 1, .. })
    ));
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_adapter::<f64>(&path, 1), Err(Error::Crc { .. })));
}

#[test]
fn unknown_version_is_rejected() {
    let cfg = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.adapter");
    let ckpt = AdapterCheckpoint {
        base_fingerprint: 1,
        train_fingerprint: 2,
        adapter: trained_like(&cfg, 1),
    };
    let mut bytes = encode_adapter(&ckpt);
    bytes[8] = 99;
    // Re-seal the checksum so only the version is wrong.
    let n = bytes.len();
    let crc = crc32fast::hash(&bytes[..n - 4]);
    bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let err = load_adapter::<f64>(&path, 1).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn existing_adapter_is_never_overwritten() {
    let cfg = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("member-00.seed-0.adapter");
    let ckpt = AdapterCheckpoint {
        base_fingerprint: 1,
        train_fingerprint: 2,
        adapter: trained_like(&cfg, 0),
    };
    save_adapter_new(&ckpt, &path).unwrap();
    let before = std::fs::read(&path).unwrap();
    let other = AdapterCheckpoint {
        adapter: trained_like(&cfg, 1),
        ..ckpt
    };
    assert!(save_adapter_new(&other, &path).is_err());
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn base_round_trip_and_load_counter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    let model: BaseModel = BaseModel::init(toy(), 4).unwrap().freeze();
    save_base(&model, &path).unwrap();
    let before = base_load_count();
    let back: BaseModel = load_base(&path).unwrap();
    assert_eq!(base_load_count(), before + 1);
    assert_eq!(back.params, model.params);
    assert_eq!(back.fingerprint(), model.fingerprint());
    assert!(back.frozen);
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, base_file_size(&model.config));
}

#[test]
fn adapter_is_far_smaller_than_base() {
    // Adapter entries: 2 targets per layer, each d·r + r·k.
    let cfg = ModelConfig::default();
    let spec = AdapterSpec::default();
    let entries = spec.parameter_count(&cfg);
    assert_eq!(entries, cfg.n_layers * 2 * (64 * 8 + 8 * 64));
    let ratio = adapter_file_size(4, entries) as f64 / base_file_size(&cfg) as f64;
    let count_ratio = entries as f64 / cfg.parameter_count() as f64;
    assert!((ratio - count_ratio).abs() < 0.01);
    // With d_model = 64 the adapter is a few percent of the base, not orders of magnitude smaller.
    assert!(ratio < 0.05, "ratio {ratio}");
}
