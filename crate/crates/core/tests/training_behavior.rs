//! End-to-end behavior of the joint objective and the training loop:
//! oracle checks for the loss composition, the regularizer's effect on
//! Jacobian norms, snapshot scheduling, and bitwise reproducibility.

use jens_core::autodiff::Graph;
use jens_core::data::{synthetic_blobs, Dataset};
use jens_core::ensemble::Ensemble;
use jens_core::evaluation::clean_accuracy;
use jens_core::jacobian::{frob_sq, jacobian_exact};
use jens_core::models::{init_params, ArchSpec, ModelParams};
use jens_core::training::{
    build_joint_loss, joint_loss, lr_at, train, JacobianMode, LrSchedule, Optimizer, TrainConfig,
};
use jens_core::tensor::Tensor;
use jens_core::Error;

fn small_arch(d: usize, c: usize) -> ArchSpec {
    ArchSpec::Mlp {
        input_dim: d,
        hidden: vec![10],
        classes: c,
    }
}

/// Cross-entropy computed with plain loops, no graph machinery.
fn ce_oracle(model: &ModelParams, batch: &Tensor, labels: &[usize]) -> f64 {
    let logits = model.forward_logits(batch).unwrap();
    let c = logits.cols();
    let mut total = 0.0;
    for (i, &lab) in labels.iter().enumerate() {
        let row: Vec<f64> = (0..c).map(|j| logits.at2(i, j)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[lab];
    }
    total / labels.len() as f64
}

/// Sum of squared-Frobenius terms via the standalone per-sample Jacobian
/// path, scaled the way the joint objective scales them.
fn jr_oracle(model: &ModelParams, ds: &Dataset, indices: &[usize], lambda: f64) -> f64 {
    let mut total = 0.0;
    for &i in indices {
        let x = ds.image(i);
        total += frob_sq(&jacobian_exact(model, &x).unwrap());
    }
    lambda / (2.0 * indices.len() as f64) * total
}

fn mean_frob(model: &ModelParams, ds: &Dataset, n: usize) -> f64 {
    (0..n)
        .map(|i| frob_sq(&jacobian_exact(model, &ds.image(i)).unwrap()))
        .sum::<f64>()
        / n as f64
}

#[test]
fn lambda_zero_is_plain_cross_entropy() {
    let ds = synthetic_blobs(32, 6, 3, 7).unwrap();
    let model = init_params(&small_arch(6, 3), 1).unwrap();
    let idx: Vec<usize> = (0..32).collect();
    let (bx, labels) = ds.batch(&idx);

    let v = joint_loss(&model, &bx, &labels, 0.0, JacobianMode::Exact).unwrap();
    assert_eq!(v.total, v.ce, "total and ce must be the same number");
    assert_eq!(v.jr, 0.0);
    let oracle = ce_oracle(&model, &bx, &labels);
    let rel = (v.ce - oracle).abs() / oracle.abs().max(1e-12);
    assert!(rel <= 1e-12, "ce {} vs oracle {}", v.ce, oracle);
}

#[test]
fn zeroed_linear_model_has_zero_penalty_and_uniform_ce() {
    let ds = synthetic_blobs(16, 5, 4, 9).unwrap();
    let mut model = init_params(
        &ArchSpec::Mlp {
            input_dim: 5,
            hidden: vec![],
            classes: 4,
        },
        0,
    )
    .unwrap();
    for t in model.param_tensors_mut() {
        for v in t.data_mut() {
            *v = 0.0;
        }
    }
    let idx: Vec<usize> = (0..16).collect();
    let (bx, labels) = ds.batch(&idx);
    let v = joint_loss(&model, &bx, &labels, 3.0, JacobianMode::Exact).unwrap();
    assert_eq!(v.jr, 0.0, "zero weights leave a zero Jacobian");
    assert!((v.ce - 4.0f64.ln()).abs() <= 1e-14, "uniform logits give ln(classes)");
}

#[test]
fn joint_loss_matches_compositional_oracle() {
    let ds = synthetic_blobs(48, 7, 3, 11).unwrap();
    let model = init_params(&small_arch(7, 3), 5).unwrap();
    let idx: Vec<usize> = (0..12).collect();
    let (bx, labels) = ds.batch(&idx);
    let lambda = 0.7;

    let v = joint_loss(&model, &bx, &labels, lambda, JacobianMode::Exact).unwrap();
    let ce = ce_oracle(&model, &bx, &labels);
    let jr = jr_oracle(&model, &ds, &idx, lambda);

    let rel_ce = (v.ce - ce).abs() / ce.abs().max(1e-12);
    let rel_jr = (v.jr - jr).abs() / jr.abs().max(1e-12);
    let rel_tot = (v.total - (ce + jr)).abs() / (ce + jr).abs().max(1e-12);
    assert!(rel_ce <= 1e-10, "ce {} vs {}", v.ce, ce);
    assert!(rel_jr <= 1e-10, "jr {} vs {}", v.jr, jr);
    assert!(rel_tot <= 1e-10, "total {} vs {}", v.total, ce + jr);
}

#[test]
fn penalty_term_is_linear_in_lambda() {
    let ds = synthetic_blobs(24, 6, 3, 13).unwrap();
    let model = init_params(&small_arch(6, 3), 2).unwrap();
    let idx: Vec<usize> = (0..24).collect();
    let (bx, labels) = ds.batch(&idx);

    let a = joint_loss(&model, &bx, &labels, 0.3, JacobianMode::Exact).unwrap();
    let b = joint_loss(&model, &bx, &labels, 0.6, JacobianMode::Exact).unwrap();
    // Doubling lambda scales the term by an exact power of two.
    assert_eq!(b.jr, 2.0 * a.jr);
    assert_eq!(a.ce, b.ce);
}

#[test]
fn projection_penalty_is_unbiased_for_the_exact_one() {
    let ds = synthetic_blobs(20, 6, 4, 17).unwrap();
    let model = init_params(&small_arch(6, 4), 3).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let (bx, labels) = ds.batch(&idx);
    let lambda = 1.0;

    let exact = joint_loss(&model, &bx, &labels, lambda, JacobianMode::Exact)
        .unwrap()
        .jr;

    let runs = 80;
    let samples: Vec<f64> = (0..runs)
        .map(|s| {
            let mut g = Graph::new();
            let am = model.attach_frozen(&mut g);
            let x = g.leaf(bx.clone());
            let parts = build_joint_loss(
                &mut g,
                &am,
                x,
                &labels,
                lambda,
                JacobianMode::Projection { n_projections: 8 },
                9000 + s,
            )
            .unwrap();
            g.value(parts.jr.unwrap()).item()
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / runs as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (runs as f64 - 1.0);
    let se = (var / runs as f64).sqrt();
    assert!(
        (mean - exact).abs() <= 4.0 * se,
        "projection mean {mean} vs exact {exact} (se {se})"
    );
}

#[test]
fn training_fits_separable_blobs() {
    let ds = synthetic_blobs(600, 8, 3, 21).unwrap();
    let init = init_params(&small_arch(8, 3), 4).unwrap();
    let cfg = TrainConfig {
        lambda_jr: 0.0,
        epochs: 20,
        batch_size: 64,
        optimizer: Optimizer::adam(5e-3),
        lr_schedule: LrSchedule::Constant,
        seed: 100,
        jacobian_mode: JacobianMode::Exact,
    };
    let out = train(init.clone(), &ds, &cfg).unwrap();
    let acc = clean_accuracy(&Ensemble::single(out.model), &ds).unwrap();
    assert!(acc >= 99.0, "train accuracy {acc}%");
    assert_eq!(out.record.epochs.len(), 20);
    assert!(out.record.epochs.iter().all(|e| (e.lr - 5e-3).abs() < 1e-16));
    assert!(out.record.epochs.iter().all(|e| e.jr_term == 0.0));
}

#[test]
fn regularization_shrinks_jacobians() {
    let ds = synthetic_blobs(400, 8, 3, 31).unwrap();
    let init = init_params(&small_arch(8, 3), 6).unwrap();
    let base = TrainConfig {
        lambda_jr: 0.0,
        epochs: 8,
        batch_size: 64,
        optimizer: Optimizer::adam(3e-3),
        lr_schedule: LrSchedule::Constant,
        seed: 200,
        jacobian_mode: JacobianMode::Exact,
    };
    let mut reg = base.clone();
    reg.lambda_jr = 2.0;

    let plain = train(init.clone(), &ds, &base).unwrap().model;
    let damped = train(init.clone(), &ds, &reg).unwrap().model;

    let probe = synthetic_blobs(40, 8, 3, 32).unwrap();
    let f_plain = mean_frob(&plain, &probe, 40);
    let f_damped = mean_frob(&damped, &probe, 40);
    assert!(
        f_damped < 0.8 * f_plain,
        "regularized Frobenius {f_damped} vs plain {f_plain}"
    );
}

#[test]
fn cyclic_schedule_snapshots_at_cycle_ends() {
    let ds = synthetic_blobs(256, 6, 3, 41).unwrap();
    let init = init_params(&small_arch(6, 3), 7).unwrap();
    // 4 steps per epoch, 6 epochs, 3 cycles of length 8.
    let cfg = TrainConfig {
        lambda_jr: 0.0,
        epochs: 6,
        batch_size: 64,
        optimizer: Optimizer::adam(2e-3),
        lr_schedule: LrSchedule::CyclicCosine { cycles: 3 },
        seed: 300,
        jacobian_mode: JacobianMode::Exact,
    };
    let out = train(init.clone(), &ds, &cfg).unwrap();
    assert_eq!(out.snapshots.len(), 3);
    for a in 0..3 {
        for b in (a + 1)..3 {
            assert!(
                out.snapshots[a].max_param_diff(&out.snapshots[b]) > 0.0,
                "snapshots {a} and {b} coincide"
            );
        }
    }
    // The run ends exactly on a cycle boundary, so the last snapshot is the
    // final model.
    assert_eq!(out.snapshots[2].max_param_diff(&out.model), 0.0);

    // Epoch-mean learning rates in the record match the schedule.
    let total = 24;
    for (e, row) in out.record.epochs.iter().enumerate() {
        let want: f64 = (0..4)
            .map(|bi| lr_at(cfg.lr_schedule, 2e-3, e * 4 + bi, total))
            .sum::<f64>()
            / 4.0;
        assert!((row.lr - want).abs() <= 1e-15, "epoch {e}: {} vs {want}", row.lr);
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let ds = synthetic_blobs(200, 6, 3, 51).unwrap();
    let init = init_params(&small_arch(6, 3), 8).unwrap();
    let cfg = TrainConfig {
        lambda_jr: 0.1,
        epochs: 4,
        batch_size: 32,
        optimizer: Optimizer::adam(2e-3),
        lr_schedule: LrSchedule::Constant,
        seed: 400,
        jacobian_mode: JacobianMode::Exact,
    };
    let a = train(init.clone(), &ds, &cfg).unwrap();
    let b = train(init.clone(), &ds, &cfg).unwrap();
    assert_eq!(a.model.max_param_diff(&b.model), 0.0);
    for (ra, rb) in a.record.epochs.iter().zip(&b.record.epochs) {
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        assert_eq!(ra.jr_term.to_bits(), rb.jr_term.to_bits());
    }
}

#[test]
fn projection_mode_trains_and_reports_positive_penalty() {
    let ds = synthetic_blobs(128, 6, 3, 61).unwrap();
    let init = init_params(&small_arch(6, 3), 9).unwrap();
    let cfg = TrainConfig {
        lambda_jr: 0.5,
        epochs: 3,
        batch_size: 32,
        optimizer: Optimizer::adam(2e-3),
        lr_schedule: LrSchedule::Constant,
        seed: 500,
        jacobian_mode: JacobianMode::Projection { n_projections: 4 },
    };
    let out = train(init.clone(), &ds, &cfg).unwrap();
    assert!(out.record.epochs.iter().all(|e| e.jr_term > 0.0));
    assert!(out.record.epochs.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn runaway_learning_rate_is_reported_not_propagated_as_nan() {
    let ds = synthetic_blobs(128, 6, 3, 71).unwrap();
    let init = init_params(&small_arch(6, 3), 10).unwrap();
    // The first update flings both layers to ~1e160; the next forward pass
    // multiplies them and overflows f64.
    let cfg = TrainConfig {
        lambda_jr: 0.0,
        epochs: 3,
        batch_size: 32,
        optimizer: Optimizer::sgd(1e160, 0.0),
        lr_schedule: LrSchedule::Constant,
        seed: 600,
        jacobian_mode: JacobianMode::Exact,
    };
    match train(init, &ds, &cfg) {
        Err(Error::Divergence { .. }) | Err(Error::NonFinite(_)) => {}
        Err(e) => panic!("unexpected error kind: {e}"),
        Ok(_) => panic!("training succeeded despite a runaway learning rate"),
    }
}
