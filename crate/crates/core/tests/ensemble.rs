mod common;

use std::sync::Arc;

use common::{random_base, small_task};
use loraens::checkpoint::{base_load_count, save_adapter, save_base, AdapterCheckpoint};
use loraens::ensemble::{
    few_shot_prompt, predict_few_shot, read_predictions, subsample_indices, subsample_pool, task_normalize,
    train_last_layer_ensemble, write_predictions, Combine, EnsembleBundle, EnsembleKind, PredictionRecord,
};
use loraens::eval::{nll, EvalRun, Split};
use loraens::lora::{init_from_spec, AdapterSpec, LoraAdapter};
use loraens::model::{BaseModel, HeadRows};
use loraens::tensor::softmax;
use loraens::train::TrainConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn member(base: &BaseModel, seed: u64) -> Arc<LoraAdapter> {
    let mut a: LoraAdapter = init_from_spec(&base.config, &AdapterSpec::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    for f in &mut a.factors {
        f.b.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
    }
    Arc::new(a)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn identical_members_equal_one_member() {
    let task = small_task(1);
    let base = Arc::new(random_base(&task, 2));
    let m = member(&base, 3);
    let single = EnsembleBundle::single(base.clone(), m.clone());
    let many = EnsembleBundle::lora_ensemble(base.clone(), vec![m.clone(); 4]).unwrap();
    let one = EnsembleBundle::lora_ensemble(base.clone(), vec![m]).unwrap();
    let data = &task.in_dist.validation;
    let s = single.predict_all(data, 0).unwrap();
    for other in [many.predict_all(data, 0).unwrap(), one.predict_all(data, 0).unwrap()] {
        for (a, b) in s.iter().zip(&other) {
            assert_eq!(a.probs, b.probs);
            assert_eq!(a.predicted, b.predicted);
        }
    }
}

#[test]
fn ensemble_is_the_mean_of_member_predictions() {
    let task = small_task(1);
    let base = Arc::new(random_base(&task, 2));
    let members: Vec<_> = (0..3).map(|s| member(&base, 10 + s)).collect();
    let bundle = EnsembleBundle::lora_ensemble(base.clone(), members.clone()).unwrap();
    let ex = &task.in_dist.validation[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rec = bundle.predict(ex, &mut rng).unwrap();
    let individual: Vec<Vec<f64>> = members
        .iter()
        .map(|m| EnsembleBundle::single(base.clone(), m.clone()).predict(ex, &mut rng).unwrap().probs)
        .collect();
    assert_eq!(rec.member_probs.len(), 3);
    for j in 0..ex.options.len() {
        let mean = individual.iter().map(|p| p[j]).sum::<f64>() / 3.0;
        assert!((rec.probs[j] - mean).abs() < 1e-12);
    }
    assert!((rec.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    // Full-vocabulary averaging differs in general but stays a distribution.
    let avg_first = bundle.clone().with_combine(Combine::AverageThenNormalize).predict(ex, &mut rng).unwrap();
    assert!((avg_first.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn ensemble_nll_never_exceeds_mean_member_nll() {
    let task = small_task(1);
    let base = Arc::new(random_base(&task, 2));
    let members: Vec<_> = (0..4).map(|s| member(&base, 20 + s)).collect();
    let data = &task.in_dist.validation;
    let ens = EnsembleBundle::lora_ensemble(base.clone(), members.clone()).unwrap();
    let run = |r| EvalRun::new(r, Split::InDistribution, "t").unwrap();
    let ens_nll = nll(&run(ens.predict_all(data, 0).unwrap())).value;
    let mean_nll = members
        .iter()
        .map(|m| nll(&run(EnsembleBundle::single(base.clone(), m.clone()).predict_all(data, 0).unwrap())).value)
        .sum::<f64>()
        / 4.0;
    assert!(ens_nll <= mean_nll + 1e-12);
}

#[test]
fn mc_dropout_without_dropout_is_deterministic() {
    let task = small_task(1);
    let base = Arc::new(random_base(&task, 2));
    let m = member(&base, 3);
    let single = EnsembleBundle::single(base.clone(), m.clone()).predict_all(&task.in_dist.validation, 0).unwrap();
    let mc = EnsembleBundle::mc_dropout(base.clone(), m.clone(), 5, 0.0).unwrap();
    assert_eq!(mc.size(), 5);
    let mc = mc.predict_all(&task.in_dist.validation, 0).unwrap();
    for (a, b) in single.iter().zip(&mc) {
        assert_eq!(a.probs, b.probs);
    }

    let noisy = EnsembleBundle::mc_dropout(base.clone(), m.clone(), 4, 0.3).unwrap();
    let a = noisy.predict_all(&task.in_dist.validation, 7).unwrap();
    let b = noisy.predict_all(&task.in_dist.validation, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].member_probs[0], a[0].member_probs[1]);
    assert!(EnsembleBundle::mc_dropout(base.clone(), m.clone(), 0, 0.1).is_err());
    assert!(EnsembleBundle::mc_dropout(base, m, 2, 1.0).is_err());
}

#[test]
fn predictions_do_not_depend_on_batching() {
    let task = small_task(1);
    let base = Arc::new(random_base(&task, 2));
    let bundle = EnsembleBundle::mc_dropout(base.clone(), member(&base, 3), 3, 0.2).unwrap();
    let data = &task.in_dist.validation;
    let all = bundle.predict_all(data, 11).unwrap();
    let tail = bundle.predict_all(&data[..2], 11).unwrap();
    assert_eq!(&all[..2], &tail[..]);
}

#[test]
fn subsampling_is_deterministic_and_exhaustive() {
    let a = subsample_indices(10, 3, 20, 5).unwrap();
    assert_eq!(a, subsample_indices(10, 3, 20, 5).unwrap());
    assert_ne!(a, subsample_indices(10, 3, 20, 6).unwrap());
    for d in &a {
        assert_eq!(d.len(), 3);
        assert!(d.windows(2).all(|w| w[0] < w[1]));
        assert!(d.iter().all(|&i| i < 10));
    }
    // Pairs from {0, 1, 2}: each of the three subsets turns up.
    let pairs = subsample_indices(3, 2, 200, 1).unwrap();
    for want in [vec![0, 1], vec![0, 2], vec![1, 2]] {
        assert!(pairs.contains(&want));
    }
    assert!(pairs.iter().all(|p| p.len() == 2 && p[0] != p[1]));

    let task = small_task(1);
    let base = Arc::new(random_base(&task, 2));
    let pool: Vec<_> = (0..3).map(|s| member(&base, s)).collect();
    let bundles = subsample_pool(&base, &pool, 2, 4, 1).unwrap();
    assert_eq!(bundles.len(), 4);
    assert!(bundles.iter().all(|b| b.size() == 2));
    assert!(subsample_pool(&base, &pool, 4, 1, 1).is_err());
}

#[test]
fn few_shot_prompts() {
    let task = small_task(1);
    let query = &task.in_dist.validation[0];
    let demos = &task.in_dist.train;
    let zero = few_shot_prompt(query, demos, 0, 3, 1).unwrap();
    assert!(zero.iter().all(|p| p == &query.prompt_tokens));
    let two = few_shot_prompt(query, demos, 2, 5, 9).unwrap();
    assert_eq!(two, few_shot_prompt(query, demos, 2, 5, 9).unwrap());
    for p in &two {
        assert!(p.ends_with(&query.prompt_tokens));
        let prefix = &p[..p.len() - query.prompt_tokens.len()];
        let matched = demos.iter().filter(|d| prefix.starts_with(&d.demo_tokens)).count();
        assert!(matched >= 1);
    }
    assert!(few_shot_prompt(query, demos, demos.len() + 1, 1, 0).is_err());
    assert!(few_shot_prompt(query, &task.in_dist.validation, 1, 1, 0).is_err());

    let base = Arc::new(random_base(&task, 2));
    let runs = predict_few_shot(&base, &task.in_dist.validation, demos, 1, 3, 4).unwrap();
    assert_eq!(runs.len(), 3);
    assert!(runs.iter().all(|r| r.len() == task.in_dist.validation.len()));
    let zero_shot = predict_few_shot(&base, &task.in_dist.validation, demos, 0, 1, 4).unwrap();
    let plain = EnsembleBundle::base_only(base.clone()).predict_all(&task.in_dist.validation, 0).unwrap();
    assert_eq!(zero_shot[0], plain);
}

#[test]
fn last_layer_ensemble_starts_from_the_base_head() {
    let task = small_task(1);
    let base = Arc::new(random_base(&task, 2));
    let data = &task.in_dist.train;
    let frozen = TrainConfig {
        step_size: 0.0,
        baseline_decay: 0.0,
        epochs: 2,
        ..Default::default()
    };
    let still = train_last_layer_ensemble(&base, data, 2, &frozen).unwrap();
    let plain = EnsembleBundle::base_only(base.clone()).predict_all(&task.in_dist.validation, 0).unwrap();
    let ll = still.predict_all(&task.in_dist.validation, 0).unwrap();
    for (a, b) in plain.iter().zip(&ll) {
        assert!(close(&a.probs, &b.probs, 1e-12));
    }
    assert_eq!(still.head_variants[0].rows, HeadRows::from_base(&base, &data[0].label_tokens).unwrap().rows);

    let moving = TrainConfig {
        step_size: 1e-2,
        epochs: 3,
        batch_size: 4,
        ..Default::default()
    };
    let trained = train_last_layer_ensemble(&base, data, 3, &moving).unwrap();
    assert_eq!(trained.kind, EnsembleKind::LastLayerEnsemble);
    assert_eq!(trained.size(), 3);
    assert_ne!(trained.head_variants[0].rows, trained.head_variants[1].rows);
    assert!(train_last_layer_ensemble(&base, data, 0, &moving).is_err());
}

#[test]
fn bundle_load_reads_the_base_once() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let dir = tempfile::tempdir().unwrap();
    let base_path = dir.path().join("base.ckpt");
    save_base(&base, &base_path).unwrap();
    let paths: Vec<_> = (0..3)
        .map(|i| {
            let p = dir.path().join(format!("m{i}.adapter"));
            let ckpt = AdapterCheckpoint {
                base_fingerprint: base.fingerprint(),
                train_fingerprint: 0,
                adapter: (*member(&base, i)).clone(),
            };
            save_adapter(&ckpt, &p).unwrap();
            p
        })
        .collect();
    let before = base_load_count();
    let bundle = EnsembleBundle::load(&base_path, &paths, EnsembleKind::LoraEnsemble).unwrap();
    assert_eq!(base_load_count(), before + 1);
    assert_eq!(bundle.size(), 3);
    bundle.predict_all(&task.in_dist.validation, 0).unwrap();
    assert_eq!(base_load_count(), before + 1);

    let other = random_base(&task, 99);
    let other_path = dir.path().join("other.ckpt");
    save_base(&other, &other_path).unwrap();
    assert!(EnsembleBundle::load(&other_path, &paths, EnsembleKind::LoraEnsemble).is_err());
}

#[test]
fn predictions_round_trip_through_jsonl() {
    let task = small_task(1);
    let base = Arc::new(random_base(&task, 2));
    let bundle = EnsembleBundle::lora_ensemble(base.clone(), vec![member(&base, 1), member(&base, 2)]).unwrap();
    let recs = bundle.predict_all(&task.in_dist.validation, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    write_predictions(&path, &recs).unwrap();
    assert_eq!(read_predictions(&path).unwrap(), recs);
}

fn dist(raw: &[f64]) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    raw.iter().map(|x| x / z).collect()
}

proptest! {
    #[test]
    fn normalized_distributions_sum_to_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..1000 {
            let vocab = rng.random_range(4..40);
            let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-30.0..30.0)).collect();
            let k = rng.random_range(2..=vocab.min(8));
            let labels: Vec<u32> = rand::seq::index::sample(&mut rng, vocab, k).into_iter().map(|i| i as u32).collect();
            let p = task_normalize(&logits, &labels).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            // Ratios are those of the full softmax.
            let full = softmax(&logits);
            let (a, b) = (labels[0] as usize, labels[1] as usize);
            if full[b] > 1e-300 && p[1] > 1e-300 {
                prop_assert!(((p[0] / p[1]) / (full[a] / full[b]) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mean_is_a_permutation_invariant_convex_combination(
        raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..8),
        shift in 0usize..8,
    ) {
        let members: Vec<Vec<f64>> = raw.iter().map(|r| dist(r)).collect();
        let rec = PredictionRecord::from_members("x", 0, members.clone());
        for j in 0..4 {
            let lo = members.iter().map(|m| m[j]).fold(f64::INFINITY, f64::min);
            let hi = members.iter().map(|m| m[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(rec.probs[j] >= lo - 1e-15 && rec.probs[j] <= hi + 1e-15);
        }
        prop_assert!((rec.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut rotated = members.clone();
        rotated.rotate_left(shift % members.len());
        let other = PredictionRecord::from_members("x", 0, rotated);
        prop_assert!(close(&rec.probs, &other.probs, 1e-15));
        prop_assert_eq!(rec.predicted, other.predicted);
    }
}
