//! Joint cross-entropy / Jacobian-norm training loop with SGD and Adam,
//! constant and cyclic-cosine schedules, and per-epoch CSV records.
//!
//! The loss is `CE + (lambda/2) * mean_i ||J(x_i)||_F^2` over the batch. The
//! penalty is built with `create_graph = true`, so its parameter gradient
//! flows through the inner backward pass (a double backward per step).

use crate::autodiff::{Graph, NodeId};
use crate::data::{BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::models::{AttachedModel, ModelParams};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Optimizer {
        Optimizer::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Optimizer {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn base_lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Learning rate follows `(base/2) * (cos(pi * pos / len) + 1)` within
    /// each cycle of `len = ceil(total_steps / cycles)` steps. A model
    /// snapshot is taken at every cycle end.
    CyclicCosine { cycles: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JacobianMode {
    /// One backward pass per class.
    Exact,
    /// Random-projection estimate with this many sphere directions.
    Projection { n_projections: usize },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lambda_jr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub jacobian_mode: JacobianMode,
}

impl TrainConfig {
    pub fn default_mlp() -> TrainConfig {
        TrainConfig {
            lambda_jr: 0.0,
            epochs: 10,
            batch_size: 128,
            optimizer: Optimizer::adam(1e-3),
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            jacobian_mode: JacobianMode::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "epochs {} and batch_size {} must be positive",
                self.epochs, self.batch_size
            )));
        }
        if !self.lambda_jr.is_finite() || self.lambda_jr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_jr {} must be finite and nonnegative",
                self.lambda_jr
            )));
        }
        if let LrSchedule::CyclicCosine { cycles } = self.lr_schedule {
            if cycles == 0 {
                return Err(Error::InvalidArgument("cycles must be positive".into()));
            }
        }
        if let JacobianMode::Projection { n_projections } = self.jacobian_mode {
            if n_projections == 0 {
                return Err(Error::InvalidArgument(
                    "projection mode needs at least one direction".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Loss graph nodes; with `lambda = 0` the total IS the cross-entropy node
/// and `jr` is absent.
pub struct LossParts {
    pub total: NodeId,
    pub ce: NodeId,
    /// Scaled penalty term `(lambda/2) * mean_i ||J_i||^2`, when active.
    pub jr: Option<NodeId>,
}

/// Build the joint loss for a batch. `x` must be a differentiable leaf when
/// `lambda > 0`, because the penalty differentiates the logits along it.
pub fn build_joint_loss(
    g: &mut Graph,
    model: &AttachedModel,
    x: NodeId,
    labels: &[usize],
    lambda: f64,
    mode: JacobianMode,
    direction_seed: u64,
) -> Result<LossParts> {
    let batch = g.value(x).rows();
    if labels.len() != batch {
        return Err(Error::shape(
            "joint_loss",
            format!("{} labels for batch {batch}", labels.len()),
        ));
    }
    let logits = model.forward(g, x)?;
    let classes = g.value(logits).cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside 0..{classes}"
        )));
    }

    let log_probs = g.log_softmax(logits)?;
    let picked = g.gather_row(log_probs, labels)?;
    let mean_lp = g.mean(picked)?;
    let ce = g.scale(mean_lp, -1.0)?;

    if lambda == 0.0 {
        return Ok(LossParts {
            total: ce,
            ce,
            jr: None,
        });
    }
    if !g.requires_grad(x) {
        return Err(Error::InvalidArgument(
            "jacobian penalty needs a differentiable input leaf".into(),
        ));
    }

    // Sum over the batch of squared row-gradients. Each backward pass here
    // produces d(sum of selected logits)/dx, whose row i is exactly the
    // selected combination's gradient for sample i.
    let mut acc: Option<NodeId> = None;
    let push_term = |g: &mut Graph, combo: NodeId, acc: &mut Option<NodeId>| -> Result<()> {
        let s = g.sum(combo)?;
        let grads = g.backward(s, &[x], true)?;
        let gx = grads.grad_id(x);
        let sq = g.square(gx)?;
        let term = g.sum(sq)?;
        *acc = Some(match *acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
        Ok(())
    };

    let factor = match mode {
        JacobianMode::Exact => {
            for p in 0..classes {
                let mut mask = vec![0.0; batch * classes];
                for b in 0..batch {
                    mask[b * classes + p] = 1.0;
                }
                let mask = g.constant(Tensor::from_parts(vec![batch, classes], mask));
                let picked = g.multiply(logits, mask)?;
                push_term(g, picked, &mut acc)?;
            }
            lambda / (2.0 * batch as f64)
        }
        JacobianMode::Projection { n_projections } => {
            let mut rng = rng::seeded(direction_seed);
            for _ in 0..n_projections {
                let v = rng::unit_sphere(&mut rng, classes);
                let v = g.constant(Tensor::from_parts(vec![1, classes], v));
                let vb = g.bcast_axis0(v, batch)?;
                let picked = g.multiply(logits, vb)?;
                push_term(g, picked, &mut acc)?;
            }
            // E[||v^T J||^2] = ||J||^2 / C on the unit sphere.
            lambda * classes as f64 / (2.0 * batch as f64 * n_projections as f64)
        }
    };

    let jr = g.scale(acc.unwrap(), factor)?;
    let total = g.add(ce, jr)?;
    Ok(LossParts {
        total,
        ce,
        jr: Some(jr),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct JointLossValue {
    pub total: f64,
    pub ce: f64,
    pub jr: f64,
}

/// Evaluate the joint loss at fixed parameters. Projection directions, if
/// any, come from a fixed internal seed; use [`build_joint_loss`] to control
/// them.
pub fn joint_loss(
    model: &ModelParams,
    batch: &Tensor,
    labels: &[usize],
    lambda: f64,
    mode: JacobianMode,
) -> Result<JointLossValue> {
    let mut g = Graph::new();
    let am = model.attach_frozen(&mut g);
    let x = if lambda == 0.0 {
        g.constant(batch.clone())
    } else {
        g.leaf(batch.clone())
    };
    let parts = build_joint_loss(&mut g, &am, x, labels, lambda, mode, 0)?;
    Ok(JointLossValue {
        total: g.value(parts.total).item(),
        ce: g.value(parts.ce).item(),
        jr: parts.jr.map_or(0.0, |id| g.value(id).item()),
    })
}

/// Learning rate at 0-based global step `t`.
pub fn lr_at(schedule: LrSchedule, base_lr: f64, t: usize, total_steps: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base_lr,
        LrSchedule::CyclicCosine { cycles } => {
            let len = total_steps.div_ceil(cycles).max(1);
            let pos = t % len;
            base_lr / 2.0 * ((std::f64::consts::PI * pos as f64 / len as f64).cos() + 1.0)
        }
    }
}

/// Per-parameter-tensor optimizer buffers.
pub struct OptState {
    velocity: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptState {
    pub fn new(model: &ModelParams) -> OptState {
        let sizes: Vec<usize> = model.param_tensors().iter().map(|t| t.len()).collect();
        OptState {
            velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// One in-place update. `lr` is the scheduled rate for this step; the rate
/// stored in the optimizer itself is only the schedule's base.
pub fn optimizer_step(
    model: &mut ModelParams,
    grads: &[Tensor],
    state: &mut OptState,
    opt: &Optimizer,
    lr: f64,
) -> Result<()> {
    {
        let params = model.param_tensors();
        if grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} grads for {} tensors", grads.len(), params.len()),
            ));
        }
        for (p, gr) in params.iter().zip(grads) {
            if p.shape() != gr.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("grad {:?} vs param {:?}", gr.shape(), p.shape()),
                ));
            }
        }
    }

    match *opt {
        Optimizer::Sgd { momentum, .. } => {
            for (ti, t) in model.param_tensors_mut().into_iter().enumerate() {
                let vel = &mut state.velocity[ti];
                for (i, w) in t.data_mut().iter_mut().enumerate() {
                    vel[i] = momentum * vel[i] + grads[ti].data()[i];
                    *w -= lr * vel[i];
                }
            }
        }
        Optimizer::Adam {
            beta1, beta2, eps, ..
        } => {
            state.t += 1;
            let bc1 = 1.0 - beta1.powi(state.t as i32);
            let bc2 = 1.0 - beta2.powi(state.t as i32);
            for (ti, t) in model.param_tensors_mut().into_iter().enumerate() {
                let m = &mut state.m[ti];
                let v = &mut state.v[ti];
                for (i, w) in t.data_mut().iter_mut().enumerate() {
                    let gr = grads[ti].data()[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gr;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gr * gr;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    pub ce_term: f64,
    pub jr_term: f64,
    /// Mean learning rate over the epoch's steps.
    pub lr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
}

impl TrainRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,ce_term,jr_term,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.loss, e.ce_term, e.jr_term, e.lr
            ));
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub record: TrainRecord,
    /// Cycle-end snapshots; empty unless the schedule is cyclic.
    pub snapshots: Vec<ModelParams>,
}

/// Train from the given initial parameters. Deterministic per
/// `(initial params, dataset, config)`. A non-finite loss aborts with a
/// divergence diagnostic.
pub fn train(initial: ModelParams, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.dim() != initial.input_dim() || ds.classes() != initial.classes() {
        return Err(Error::shape(
            "train",
            format!(
                "dataset ({}, {} classes) vs model ({}, {} classes)",
                ds.dim(),
                ds.classes(),
                initial.input_dim(),
                initial.classes()
            ),
        ));
    }

    let plan = BatchPlan::new(cfg.batch_size, cfg.seed);
    let spe = plan.steps_per_epoch(ds.len());
    let total_steps = spe * cfg.epochs;
    let cycle_len = match cfg.lr_schedule {
        LrSchedule::CyclicCosine { cycles } => {
            if total_steps < cycles {
                return Err(Error::InvalidArgument(format!(
                    "{cycles} cycles need at least that many steps, have {total_steps}"
                )));
            }
            Some(total_steps.div_ceil(cycles))
        }
        LrSchedule::Constant => None,
    };

    let mut model = initial;
    let mut state = OptState::new(&model);
    let mut record = TrainRecord::default();
    let mut snapshots = Vec::new();

    for epoch in 0..cfg.epochs {
        let batches = plan.batches(ds.len(), epoch);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for (bi, indices) in batches.iter().enumerate() {
            let t = epoch * spe + bi;
            let lr = lr_at(cfg.lr_schedule, cfg.optimizer.base_lr(), t, total_steps);
            let (bx, blabels) = ds.batch(indices);

            let mut g = Graph::new();
            let am = model.attach(&mut g);
            let x = if cfg.lambda_jr == 0.0 {
                g.constant(bx)
            } else {
                g.leaf(bx)
            };
            let dir_seed = cfg
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(t as u64 + 1));
            let parts = build_joint_loss(
                &mut g,
                &am,
                x,
                &blabels,
                cfg.lambda_jr,
                cfg.jacobian_mode,
                dir_seed,
            )?;
            let loss = g.value(parts.total).item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: t,
                    detail: format!("loss became {loss}"),
                });
            }
            let ce = g.value(parts.ce).item();
            let jr = parts.jr.map_or(0.0, |id| g.value(id).item());

            let grads_map = g.backward(parts.total, &am.params, false)?;
            let grads: Vec<Tensor> = am
                .params
                .iter()
                .map(|p| grads_map.grad(&g, *p).clone())
                .collect();
            drop(g);
            optimizer_step(&mut model, &grads, &mut state, &cfg.optimizer, lr)?;

            sums.0 += loss;
            sums.1 += ce;
            sums.2 += jr;
            sums.3 += lr;

            if let Some(len) = cycle_len {
                if (t + 1) % len == 0 {
                    snapshots.push(model.clone());
                }
            }
        }
        let k = batches.len() as f64;
        record.epochs.push(EpochStats {
            epoch,
            loss: sums.0 / k,
            ce_term: sums.1 / k,
            jr_term: sums.2 / k,
            lr: sums.3 / k,
        });
    }

    // A trailing partial cycle still contributes its end-state snapshot.
    if let Some(len) = cycle_len {
        if total_steps % len != 0 {
            snapshots.push(model.clone());
        }
    }

    Ok(TrainOutcome {
        model,
        record,
        snapshots,
    })
}
