//! Input-space Jacobians of classifier logits, their Frobenius norms, and a
//! finite-difference gradient checker.
//!
//! Everything here returns graph nodes built with `create_graph = true`, so a
//! Jacobian norm can itself be differentiated with respect to parameters. The
//! `*_exact` and value-level helpers evaluate the same constructions and
//! detach the result.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::{AttachedModel, ModelParams};
use crate::rng;
use crate::tensor::Tensor;

/// Stack the gradients of each logit into a C x D Jacobian node.
///
/// `logits` must be `[1, C]` and `x` `[1, D]` with `x` differentiable. Runs
/// one backward pass per class and assembles rows with outer products, so the
/// result stays connected to everything upstream of `logits`.
pub fn jacobian_rows(g: &mut Graph, logits: NodeId, x: NodeId) -> Result<NodeId> {
    let c = {
        let s = g.value(logits).shape();
        if s.len() != 2 || s[0] != 1 {
            return Err(Error::shape("jacobian", format!("logits {s:?}, want [1, C]")));
        }
        s[1]
    };
    {
        let s = g.value(x).shape();
        if s.len() != 2 || s[0] != 1 {
            return Err(Error::shape("jacobian", format!("input {s:?}, want [1, D]")));
        }
    }
    if !g.requires_grad(x) {
        return Err(Error::InvalidArgument(
            "jacobian input must be differentiable".into(),
        ));
    }

    let mut acc: Option<NodeId> = None;
    for p in 0..c {
        let mut mask = vec![0.0; c];
        mask[p] = 1.0;
        let mask = g.constant(Tensor::from_parts(vec![1, c], mask));
        let picked = g.multiply(logits, mask)?;
        let s = g.sum(picked)?;
        let grads = g.backward(s, &[x], true)?;
        let row = grads.grad_id(x); // [1, D]

        let mut basis = vec![0.0; c];
        basis[p] = 1.0;
        let e_col = g.constant(Tensor::from_parts(vec![c, 1], basis));
        let outer = g.matmul(e_col, row)?; // [C, D], row p only
        acc = Some(match acc {
            None => outer,
            Some(a) => g.add(a, outer)?,
        });
    }
    Ok(acc.expect("classes >= 1"))
}

/// Jacobian of an attached model's logits at a single input node.
pub fn jacobian_node(g: &mut Graph, model: &AttachedModel, x: NodeId) -> Result<NodeId> {
    let logits = model.forward(g, x)?;
    jacobian_rows(g, logits, x)
}

/// Evaluate the full Jacobian at `x` and detach it. Accepts `[D]` or `[1, D]`.
pub fn jacobian_exact(model: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let row = as_row(model.input_dim(), x)?;
    let mut g = Graph::new();
    let am = model.attach_frozen(&mut g);
    let xid = g.leaf(row);
    let j = jacobian_node(&mut g, &am, xid)?;
    Ok(g.value(j).clone())
}

/// Sum of squared entries as a graph node.
pub fn frob_sq_node(g: &mut Graph, j: NodeId) -> Result<NodeId> {
    let sq = g.square(j)?;
    g.sum(sq)
}

/// Sum of squared entries of a detached tensor.
pub fn frob_sq(j: &Tensor) -> f64 {
    j.data().iter().map(|v| v * v).sum()
}

/// Hutchinson-style estimate of the squared Frobenius norm:
/// `C * mean_k || v_k^T J ||^2` over unit-sphere directions `v_k`.
///
/// One backward pass per direction instead of one per class. Unbiased because
/// `E[v v^T] = I / C` on the sphere.
pub fn frob_sq_estimate_node(
    g: &mut Graph,
    model: &AttachedModel,
    x: NodeId,
    n_projections: usize,
    seed: u64,
) -> Result<NodeId> {
    if n_projections == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let logits = model.forward(g, x)?;
    let c = g.value(logits).shape()[1];
    let mut rng = rng::seeded(seed);
    let mut acc: Option<NodeId> = None;
    for _ in 0..n_projections {
        let v = rng::unit_sphere(&mut rng, c);
        let v = g.constant(Tensor::from_parts(vec![1, c], v));
        let picked = g.multiply(logits, v)?;
        let s = g.sum(picked)?;
        let grads = g.backward(s, &[x], true)?;
        let vj = grads.grad_id(x);
        let sq = g.square(vj)?;
        let norm = g.sum(sq)?;
        acc = Some(match acc {
            None => norm,
            Some(a) => g.add(a, norm)?,
        });
    }
    g.scale(acc.unwrap(), c as f64 / n_projections as f64)
}

/// Value-level version of [`frob_sq_estimate_node`].
pub fn frob_sq_estimate(
    model: &ModelParams,
    x: &Tensor,
    n_projections: usize,
    seed: u64,
) -> Result<f64> {
    let row = as_row(model.input_dim(), x)?;
    let mut g = Graph::new();
    let am = model.attach_frozen(&mut g);
    let xid = g.leaf(row);
    let est = frob_sq_estimate_node(&mut g, &am, xid, n_projections, seed)?;
    Ok(g.value(est).item())
}

fn as_row(dim: usize, x: &Tensor) -> Result<Tensor> {
    let ok = (x.shape().len() == 1 && x.shape()[0] == dim)
        || (x.shape().len() == 2 && x.shape() == [1, dim]);
    if !ok {
        return Err(Error::shape(
            "jacobian",
            format!("input {:?} vs model dim {dim}", x.shape()),
        ));
    }
    Ok(Tensor::from_parts(vec![1, dim], x.data().to_vec()))
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error between analytic and finite-difference gradient.
    pub max_rel_first: f64,
    /// Worst relative error for the Hessian-vector product (double backward).
    pub max_rel_second: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_first <= self.tol && self.max_rel_second <= self.tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

const FD_STEP: f64 = 1e-4;
const DIRECTION_SEED: u64 = 0x5eed_d12e;

/// Compare analytic first- and second-order derivatives of a scalar loss
/// against central finite differences.
///
/// `loss` rebuilds the loss from scratch in the supplied graph; it is called
/// many times with perturbed copies of `model`, so keep the model small
/// (finite differencing is O(P) rebuilds for first order and O(P) double
/// backwards for second order).
pub fn check_gradients<F>(model: &ModelParams, loss: F, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &AttachedModel) -> Result<NodeId>,
{
    let eval = |m: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let am = m.attach_frozen(&mut g);
        let l = loss(&mut g, &am)?;
        Ok(g.value(l).item())
    };

    // Analytic gradient and Hessian-vector product in one graph.
    let direction: Vec<Tensor> = {
        let mut rng = rng::seeded(DIRECTION_SEED);
        let mut polar = rng::PolarNormal::new();
        model
            .param_tensors()
            .iter()
            .map(|t| {
                let data = (0..t.len()).map(|_| polar.next(&mut rng)).collect();
                Tensor::from_parts(t.shape().to_vec(), data)
            })
            .collect()
    };

    let (analytic_grad, analytic_hv) = {
        let mut g = Graph::new();
        let am = model.attach(&mut g);
        let l = loss(&mut g, &am)?;
        let grads = g.backward(l, &am.params, true)?;

        let mut s: Option<NodeId> = None;
        for (pid, dir) in am.params.iter().zip(&direction) {
            let gid = grads.grad_id(*pid);
            let d = g.constant(dir.clone());
            let prod = g.multiply(gid, d)?;
            let term = g.sum(prod)?;
            s = Some(match s {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let s = s.expect("model has parameters");
        let hv = g.backward(s, &am.params, false)?;

        let grad_vals: Vec<Tensor> =
            am.params.iter().map(|p| grads.grad(&g, *p).clone()).collect();
        let hv_vals: Vec<Tensor> = am.params.iter().map(|p| hv.grad(&g, *p).clone()).collect();
        (grad_vals, hv_vals)
    };

    // s(theta) evaluated at a perturbed model, for second-order differencing.
    let eval_s = |m: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let am = m.attach(&mut g);
        let l = loss(&mut g, &am)?;
        let grads = g.backward(l, &am.params, false)?;
        let mut total = 0.0;
        for (pid, dir) in am.params.iter().zip(&direction) {
            let gv = grads.grad(&g, *pid);
            total += gv
                .data()
                .iter()
                .zip(dir.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        Ok(total)
    };

    let mut max_first: f64 = 0.0;
    let mut max_second: f64 = 0.0;
    let ntensors = model.param_tensors().len();
    for ti in 0..ntensors {
        let len = model.param_tensors()[ti].len();
        for i in 0..len {
            let mut plus = model.clone();
            plus.param_tensors_mut()[ti].data_mut()[i] += FD_STEP;
            let mut minus = model.clone();
            minus.param_tensors_mut()[ti].data_mut()[i] -= FD_STEP;

            let fd_grad = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            max_first = max_first.max(rel_err(analytic_grad[ti].data()[i], fd_grad));

            let fd_hv = (eval_s(&plus)? - eval_s(&minus)?) / (2.0 * FD_STEP);
            max_second = max_second.max(rel_err(analytic_hv[ti].data()[i], fd_hv));
        }
    }

    Ok(GradCheckReport {
        max_rel_first: max_first,
        max_rel_second: max_second,
        tol,
    })
}
