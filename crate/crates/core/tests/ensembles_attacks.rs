//! Trained-ensemble construction and universal-perturbation crafting checked
//! against hand-computed aggregates, exhaustive enumeration on tiny linear
//! models, and restart bookkeeping.

use jens_core::data::synthetic_blobs;
use jens_core::ensemble::{build_bagging, build_snapshot, build_softvote, Ensemble};
use jens_core::evaluation::clean_accuracy;
use jens_core::models::{init_params, ArchSpec};
use jens_core::training::{JacobianMode, LrSchedule, Optimizer, TrainConfig};
use jens_core::uap::{attack_success_rate, sgd_uap, worst_case_uap, UapConfig};
use jens_core::Tensor;

fn blob_arch() -> ArchSpec {
    ArchSpec::Mlp {
        input_dim: 8,
        hidden: vec![16],
        classes: 3,
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        lambda_jr: 0.0,
        epochs: 25,
        batch_size: 64,
        optimizer: Optimizer::adam(3e-3),
        lr_schedule: LrSchedule::Constant,
        seed: 0,
        jacobian_mode: JacobianMode::Exact,
    }
}

#[test]
fn bagging_members_differ_and_mix_linearly() {
    let ds = synthetic_blobs(400, 8, 3, 1).unwrap();
    let e = build_bagging(&blob_arch(), &ds, &quick_cfg(), 3, 10).unwrap();
    assert_eq!(e.members().len(), 3);
    for a in 0..3 {
        for b in (a + 1)..3 {
            assert!(
                e.members()[a].max_param_diff(&e.members()[b]) > 0.0,
                "bagging members {a} and {b} coincide"
            );
        }
    }

    // Aggregated logits are the weight-mixed member logits.
    let idx: Vec<usize> = (0..5).collect();
    let (bx, _) = ds.batch(&idx);
    let agg = e.forward(&bx).unwrap();
    let per: Vec<Tensor> = e
        .members()
        .iter()
        .map(|m| m.forward_logits(&bx).unwrap())
        .collect();
    for i in 0..agg.len() {
        let want: f64 = per.iter().zip(e.weights()).map(|(t, w)| w * t.data()[i]).sum();
        let got = agg.data()[i];
        assert!(
            (got - want).abs() <= 1e-12 * want.abs().max(1.0),
            "logit {i}: {got} vs {want}"
        );
    }

    let acc = clean_accuracy(&e, &ds).unwrap();
    assert!(acc >= 95.0, "bagging accuracy {acc}%");
}

#[test]
fn snapshot_run_produces_the_requested_member_count() {
    let ds = synthetic_blobs(256, 8, 3, 2).unwrap();
    let mut cfg = quick_cfg();
    cfg.epochs = 9; // 4 steps/epoch, 36 steps, 3 cycles of 12
    cfg.lr_schedule = LrSchedule::CyclicCosine { cycles: 3 };
    let e = build_snapshot(&blob_arch(), &ds, &cfg, 3, 20).unwrap();
    assert_eq!(e.members().len(), 3);
    for a in 0..3 {
        for b in (a + 1)..3 {
            assert!(e.members()[a].max_param_diff(&e.members()[b]) > 0.0);
        }
    }
    // A mismatched cycle count is refused up front.
    let bad = build_snapshot(&blob_arch(), &ds, &quick_cfg(), 3, 20);
    assert!(bad.is_err());
}

#[test]
fn softvote_rows_are_mean_member_probabilities() {
    let ds = synthetic_blobs(400, 8, 3, 3).unwrap();
    let e = build_softvote(&blob_arch(), &ds, &quick_cfg(), 2, 30).unwrap();
    let idx: Vec<usize> = (0..4).collect();
    let (bx, _) = ds.batch(&idx);
    let probs = e.forward(&bx).unwrap();

    for r in 0..4 {
        let mut want = vec![0.0; 3];
        for (m, w) in e.members().iter().zip(e.weights()) {
            let logits = m.forward_logits(&bx).unwrap();
            let row: Vec<f64> = (0..3).map(|c| logits.at2(r, c)).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for c in 0..3 {
                want[c] += w * (row[c] - max).exp() / z;
            }
        }
        let row_sum: f64 = (0..3).map(|c| probs.at2(r, c)).sum();
        assert!((row_sum - 1.0).abs() <= 1e-12);
        for c in 0..3 {
            assert!(
                (probs.at2(r, c) - want[c]).abs() <= 1e-12,
                "row {r} class {c}: {} vs {}",
                probs.at2(r, c),
                want[c]
            );
        }
    }
}

#[test]
fn vanishing_epsilon_reduces_attack_to_clean_error_rate() {
    let ds = synthetic_blobs(400, 8, 3, 4).unwrap();
    let out = jens_core::training::train(init_params(&blob_arch(), 1).unwrap(), &ds, &quick_cfg())
        .unwrap();
    let target = Ensemble::single(out.model);
    let eval = synthetic_blobs(200, 8, 3, 5).unwrap();

    let mut cfg = UapConfig::new(1e-6).unwrap();
    cfg.iterations = 20;
    cfg.seeds = 1;
    let p = worst_case_uap(&target, &ds, &eval, &cfg).unwrap();
    let clean_err = 1.0 - clean_accuracy(&target, &eval).unwrap() / 100.0;
    assert!(
        (p.success_rate - clean_err).abs() <= 0.02,
        "rate {} vs clean error {}",
        p.success_rate,
        clean_err
    );
}

#[test]
fn larger_budgets_do_not_hurt_the_attacker() {
    let ds = synthetic_blobs(400, 8, 3, 6).unwrap();
    let out = jens_core::training::train(init_params(&blob_arch(), 2).unwrap(), &ds, &quick_cfg())
        .unwrap();
    let target = Ensemble::single(out.model);
    let eval = synthetic_blobs(200, 8, 3, 7).unwrap();

    let rate_at = |eps: f64| {
        let mut cfg = UapConfig::new(eps).unwrap();
        cfg.iterations = 60;
        cfg.seeds = 2;
        worst_case_uap(&target, &ds, &eval, &cfg).unwrap().success_rate
    };
    let small = rate_at(0.05);
    let large = rate_at(0.3);
    assert!(
        large >= small,
        "rate at 0.3 ({large}) below rate at 0.05 ({small})"
    );
}

#[test]
fn restart_sweep_keeps_the_strongest_and_breaks_ties_low() {
    let ds = synthetic_blobs(400, 8, 3, 8).unwrap();
    let out = jens_core::training::train(init_params(&blob_arch(), 3).unwrap(), &ds, &quick_cfg())
        .unwrap();
    let target = Ensemble::single(out.model);
    let eval = synthetic_blobs(150, 8, 3, 9).unwrap();

    let mut cfg = UapConfig::new(0.15).unwrap();
    cfg.iterations = 30;
    cfg.seeds = 6;

    let singles: Vec<f64> = (0..6)
        .map(|s| sgd_uap(&target, &ds, &eval, &cfg, s).unwrap().success_rate)
        .collect();
    let best = singles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let best_seed = singles.iter().position(|&r| r == best).unwrap() as u64;

    let picked = worst_case_uap(&target, &ds, &eval, &cfg).unwrap();
    assert_eq!(picked.success_rate.to_bits(), best.to_bits());
    assert_eq!(picked.seed, best_seed);
}

#[test]
fn two_point_linear_attack_matches_exhaustive_enumeration() {
    // Linear two-class model: logits (w.x + b, -(w.x + b)) with w = (1, 0.5)
    // and b = -0.35. Both data points sit at w.x = 0.45, predicted class 0
    // with margin 0.1; a budget of 0.2 can shift the score by up to 0.3, so
    // the corner (-eps, -eps) flips both and nothing clamps.
    let mut m = init_params(
        &ArchSpec::Mlp {
            input_dim: 2,
            hidden: vec![],
            classes: 2,
        },
        0,
    )
    .unwrap();
    {
        let mut ts = m.param_tensors_mut();
        ts[0].data_mut().copy_from_slice(&[1.0, -1.0, 0.5, -0.5]);
        ts[1].data_mut().copy_from_slice(&[-0.35, 0.35]);
    }
    let target = Ensemble::single(m);

    let ds = jens_core::data::Dataset::new(
        "two-points",
        Tensor::new(vec![2, 2], vec![0.3, 0.3, 0.35, 0.2]).unwrap(),
        vec![0, 0],
        2,
        1,
        2,
    )
    .unwrap();

    let eps = 0.2;
    // Exhaustive corner/zero enumeration of the attainable success rates.
    let mut optimal: f64 = 0.0;
    for dx in [-eps, 0.0, eps] {
        for dy in [-eps, 0.0, eps] {
            let delta = Tensor::new(vec![2], vec![dx, dy]).unwrap();
            let r = attack_success_rate(&target, &ds, &delta).unwrap();
            optimal = optimal.max(r);
        }
    }
    assert_eq!(optimal, 1.0, "the corner pattern must flip both points");

    let mut cfg = UapConfig::new(eps).unwrap();
    cfg.iterations = 40;
    cfg.batch_size = 2;
    cfg.seeds = 3;
    let p = worst_case_uap(&target, &ds, &ds, &cfg).unwrap();
    assert_eq!(p.success_rate, optimal);
    // The loss gradient in delta has a fixed sign in both coordinates, so
    // sign ascent saturates at the exact corner.
    assert!((p.delta.data()[0] + eps).abs() <= 1e-12);
    assert!((p.delta.data()[1] + eps).abs() <= 1e-12);
}

#[test]
fn stored_perturbation_reproduces_its_attack_bit_for_bit() {
    let ds = synthetic_blobs(400, 8, 3, 10).unwrap();
    let out = jens_core::training::train(init_params(&blob_arch(), 4).unwrap(), &ds, &quick_cfg())
        .unwrap();
    let target = Ensemble::single(out.model);
    let eval = synthetic_blobs(150, 8, 3, 11).unwrap();

    let mut cfg = UapConfig::new(0.2).unwrap();
    cfg.iterations = 30;
    cfg.seeds = 2;
    let p = worst_case_uap(&target, &ds, &eval, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("delta.juap");
    jens_core::uap::save_perturbation(&p, &path).unwrap();
    let back = jens_core::uap::load_perturbation(&path).unwrap();

    assert_eq!(back.epsilon.to_bits(), p.epsilon.to_bits());
    assert_eq!(back.seed, p.seed);
    for (a, b) in back.delta.data().iter().zip(p.delta.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let replayed = attack_success_rate(&target, &eval, &back.delta).unwrap();
    assert_eq!(replayed.to_bits(), p.success_rate.to_bits());
}
