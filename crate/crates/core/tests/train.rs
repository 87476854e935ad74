mod common;

use common::{random_base, small_task};
use loraens::lora::{init_from_spec, AdapterSpec, LoraAdapter};
use loraens::model::{loss_and_grads, GradientMap, KlScope, LossSpec};
use loraens::tensor::Matrix;
use loraens::train::{
    adamw_step, kl_regularizer, train_member, AdamWConfig, DecaySign, DecayTarget, OptimizerState, TrainConfig,
    TrainHistory,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single(name: &str, v: f64) -> GradientMap {
    let mut m = GradientMap::new();
    m.insert(name.to_string(), Matrix::from_vec(1, 1, vec![v]).unwrap());
    m
}

fn zero_grads(adapter: &LoraAdapter) -> GradientMap {
    adapter
        .named_params()
        .into_iter()
        .map(|(k, m)| (k, Matrix::zeros(m.rows(), m.cols())))
        .collect()
}

fn perturbed(adapter: &LoraAdapter, seed: u64, scale: f64) -> LoraAdapter {
    let mut a = adapter.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    a.for_each_param_mut(|_, m| m.as_mut_slice().iter_mut().for_each(|x| *x += rng.random_range(-scale..scale)));
    a
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        step_size: 1e-2,
        ..Default::default()
    }
}

#[test]
fn first_step_matches_closed_form() {
    let name = "layers.0.value.lora_b";
    let (theta0, g, gamma) = (0.3, -2.5, 1e-3);
    for (lambda, sign) in [(0.0, DecaySign::Standard), (0.5, DecaySign::Standard), (0.5, DecaySign::AsPrinted)] {
        let cfg = AdamWConfig {
            step_size: gamma,
            weight_decay: lambda,
            decay_target: DecayTarget::BOnly,
            decay_sign: sign,
            ..Default::default()
        };
        let mut theta = single(name, theta0);
        let mut state = OptimizerState::default();
        adamw_step(&mut state, &single(name, g), &mut theta, &cfg).unwrap();
        // After one step the bias-corrected moments are g and g².
        let dir = g / (g.abs() + cfg.eps);
        let signed = if sign == DecaySign::Standard { lambda } else { -lambda };
        let expected = theta0 - gamma * (dir + signed * theta0);
        assert!((theta[name][(0, 0)] - expected).abs() < 1e-12);
        if lambda == 0.0 {
            assert!((theta[name][(0, 0)] - (theta0 + gamma)).abs() < gamma * 1e-8);
        }
    }
}

#[test]
fn b_only_decay_is_selective_and_geometric() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let spec = AdapterSpec::default();
    let adapter0 = perturbed(&init_from_spec(&base.config, &spec, 3).unwrap(), 4, 0.2);
    let gamma = 1e-3;
    let cfg = AdamWConfig {
        step_size: gamma,
        weight_decay: 1e2,
        decay_target: DecayTarget::BOnly,
        ..Default::default()
    };
    let mut adapter = adapter0.clone();
    let mut state = OptimizerState::default();
    let steps = 7;
    for _ in 0..steps {
        adamw_step(&mut state, &zero_grads(&adapter), &mut adapter, &cfg).unwrap();
    }
    let fb = (1.0 - gamma * 1e2).powi(steps);
    let fa = (1.0 - gamma * 1e-2).powi(steps);
    for (before, after) in adapter0.factors.iter().zip(&adapter.factors) {
        for (x0, x) in before.b.as_slice().iter().zip(after.b.as_slice()) {
            assert!((x - fb * x0).abs() < 1e-12);
        }
        for (x0, x) in before.a.as_slice().iter().zip(after.a.as_slice()) {
            assert!((x - fa * x0).abs() < 1e-12);
        }
    }
}

#[test]
fn kl_penalty_vanishes_at_zero_b() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let adapter: LoraAdapter = init_from_spec(&base.config, &AdapterSpec::default(), 3).unwrap();
    let batch = &task.in_dist.train[..4];
    for scope in [KlScope::FullVocab, KlScope::LabelSet] {
        let (kl, grads) = kl_regularizer(&base, &adapter, batch, 1.0, scope).unwrap();
        assert!(kl.abs() < 1e-15);
        assert!(grads.values().all(|g| g.max_abs() < 1e-12));
    }
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let adapter = perturbed(&init_from_spec(&base.config, &AdapterSpec::default(), 3).unwrap(), 9, 0.3);
    let batch = &task.in_dist.train[..3];
    for scope in [KlScope::FullVocab, KlScope::LabelSet] {
        let beta = 0.7;
        let (kl, grads) = kl_regularizer(&base, &adapter, batch, beta, scope).unwrap();
        assert!(kl > 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names: Vec<String> = grads.keys().cloned().collect();
        for _ in 0..6 {
            let name = &names[rng.random_range(0..names.len())];
            let len = grads[name].len();
            let idx = rng.random_range(0..len);
            let h = 1e-5;
            let at = |delta: f64| {
                let mut a = adapter.clone();
                a.for_each_param_mut(|n, m| {
                    if n == name {
                        m.as_mut_slice()[idx] += delta;
                    }
                });
                kl_regularizer(&base, &a, batch, beta, scope).unwrap().0
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let analytic = grads[name].as_slice()[idx];
            assert!(
                (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "{name}[{idx}]: {numeric} vs {analytic}"
            );
        }
    }
}

#[test]
fn zero_beta_leaves_the_loss_unchanged() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let adapter = perturbed(&init_from_spec(&base.config, &AdapterSpec::default(), 3).unwrap(), 9, 0.3);
    let batch = &task.in_dist.train[..4];
    let plain = loss_and_grads(&base, &adapter, batch, &LossSpec::default()).unwrap();
    let with_scope = loss_and_grads(
        &base,
        &adapter,
        batch,
        &LossSpec {
            kl_beta: 0.0,
            kl_scope: KlScope::LabelSet,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(plain, with_scope);
    let (kl, _) = kl_regularizer(&base, &adapter, batch, 0.0, KlScope::FullVocab).unwrap();
    assert_eq!(kl, 0.0);

    // NLL plus β·KL, and the same for gradients.
    let beta = 0.3;
    let reg = loss_and_grads(
        &base,
        &adapter,
        batch,
        &LossSpec {
            kl_beta: beta,
            ..Default::default()
        },
    )
    .unwrap();
    let (penalty, pgrads) = kl_regularizer(&base, &adapter, batch, beta, KlScope::FullVocab).unwrap();
    assert!((reg.0 - (plain.0 + penalty)).abs() < 1e-12);
    for (name, g) in &reg.1 {
        for ((a, b), c) in g.as_slice().iter().zip(plain.1[name].as_slice()).zip(pgrads[name].as_slice()) {
            assert!((a - (b + c)).abs() < 1e-12);
        }
    }
}

#[test]
fn training_is_deterministic_and_leaves_base_untouched() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let fp = base.fingerprint();
    let cfg = quick(3);
    let a = train_member(&base, &task.in_dist.train, &task.in_dist.validation, &cfg).unwrap();
    let b = train_member(&base, &task.in_dist.train, &task.in_dist.validation, &cfg).unwrap();
    assert_eq!(a.adapter, b.adapter);
    assert_eq!(a.history, b.history);
    assert_eq!(base.fingerprint(), fp);
    assert!(!a.diverged());
}

#[test]
fn history_has_one_row_per_epoch() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let cfg = TrainConfig {
        early_stop_epochs: Some(2),
        ..quick(5)
    };
    let run = train_member(&base, &task.in_dist.train, &task.in_dist.validation, &cfg).unwrap();
    assert_eq!(run.history.epochs.len(), 2);
    assert_eq!(run.history.last().unwrap().epoch, 2);
    let csv = run.history.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], TrainHistory::CSV_HEADER);
    assert_eq!(lines.len(), 3);
    let rec = run.history.last().unwrap();
    assert!(rec.val_accuracy.is_finite() && rec.val_nll > 0.0 && rec.val_kl >= 0.0);
    assert!(rec.norm_b > 0.0);

    let no_val = train_member(&base, &task.in_dist.train, &[], &quick(1)).unwrap();
    assert!(no_val.history.epochs[0].val_accuracy.is_nan());
}

#[test]
fn training_fits_the_training_set() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let run = train_member(&base, &task.in_dist.train, &[], &quick(15)).unwrap();
    let losses: Vec<f64> = run.history.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.last().unwrap() < &(0.7 * losses[0]), "{losses:?}");
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn fixed_seeds_make_members_identical() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let fixed = TrainConfig {
        fix_init: true,
        fix_shuffle: true,
        ..quick(2)
    };
    let m0 = train_member(&base, &task.in_dist.train, &[], &fixed.for_member(0)).unwrap();
    let m1 = train_member(&base, &task.in_dist.train, &[], &fixed.for_member(1)).unwrap();
    assert_eq!(m0.adapter.factors, m1.adapter.factors);

    let free = quick(2);
    let f0 = train_member(&base, &task.in_dist.train, &[], &free.for_member(0)).unwrap();
    let f1 = train_member(&base, &task.in_dist.train, &[], &free.for_member(1)).unwrap();
    assert_ne!(f0.adapter.factors, f1.adapter.factors);

    // Only one source of randomness varies.
    let init_only = TrainConfig {
        fix_shuffle: true,
        ..quick(2)
    };
    let i0 = train_member(&base, &task.in_dist.train, &[], &init_only.for_member(0)).unwrap();
    let i1 = train_member(&base, &task.in_dist.train, &[], &init_only.for_member(1)).unwrap();
    assert_ne!(i0.adapter.factors[0].a, i1.adapter.factors[0].a);
}

#[test]
fn invalid_runs_are_rejected() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    assert!(train_member(&base, &task.in_dist.train, &[], &quick(0)).is_err());
    assert!(train_member(&base, &[], &[], &quick(1)).is_err());
    let mut unfrozen = base.clone();
    unfrozen.frozen = false;
    assert!(train_member(&unfrozen, &task.in_dist.train, &[], &quick(1)).is_err());
    let negative = TrainConfig {
        kl_beta: -1.0,
        ..quick(1)
    };
    assert!(train_member(&base, &task.in_dist.train, &[], &negative).is_err());
}

#[test]
fn divergence_is_reported_not_fatal() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let cfg = TrainConfig {
        divergence_factor: 1e-6,
        ..quick(3)
    };
    let run = train_member(&base, &task.in_dist.train, &[], &cfg).unwrap();
    assert!(run.diverged());
    assert!(run.history.epochs.is_empty());
}

#[test]
fn kl_regularized_training_stays_closer_to_base() {
    let task = small_task(1);
    let base = random_base(&task, 2);
    let val = &task.in_dist.validation;
    let free = train_member(&base, &task.in_dist.train, val, &quick(6)).unwrap();
    let tied = train_member(
        &base,
        &task.in_dist.train,
        val,
        &TrainConfig {
            kl_beta: 5.0,
            ..quick(6)
        },
    )
    .unwrap();
    let kl = |r: &loraens::train::MemberRun| r.history.last().unwrap().val_kl;
    assert!(kl(&tied) < kl(&free), "{} vs {}", kl(&tied), kl(&free));
}

proptest! {
    #[test]
    fn first_step_is_bounded_by_step_size(theta0 in -5.0f64..5.0, g in -10.0f64..10.0, lambda in 0.0f64..10.0) {
        let name = "layers.0.query.lora_a";
        let gamma = 1e-2;
        let cfg = AdamWConfig {
            step_size: gamma,
            weight_decay: lambda,
            decay_target: DecayTarget::AOnly,
            ..Default::default()
        };
        let mut theta = single(name, theta0);
        let mut state = OptimizerState::default();
        adamw_step(&mut state, &single(name, g), &mut theta, &cfg).unwrap();
        let moved = theta[name][(0, 0)] - theta0 + gamma * lambda * theta0;
        prop_assert!(moved.abs() <= gamma * (1.0 + 1e-12));
        prop_assert!(moved * g <= 0.0);
    }

    #[test]
    fn pure_decay_shrinks_toward_zero(theta0 in -5.0f64..5.0, lambda in 0.0f64..50.0, steps in 1usize..20) {
        let name = "layers.0.value.lora_b";
        let gamma = 1e-2;
        let cfg = AdamWConfig {
            step_size: gamma,
            weight_decay: lambda,
            decay_target: DecayTarget::Both,
            ..Default::default()
        };
        let mut theta = single(name, theta0);
        let mut state = OptimizerState::default();
        for _ in 0..steps {
            adamw_step(&mut state, &single(name, 0.0), &mut theta, &cfg).unwrap();
        }
        let expected = theta0 * (1.0 - gamma * lambda).powi(steps as i32);
        prop_assert!((theta[name][(0, 0)] - expected).abs() < 1e-12);
        prop_assert!(theta[name][(0, 0)].abs() <= theta0.abs());
    }
}
