//! Finite-difference oracles for the differentiation engine: every primitive
//! op's gradient, double-backward (gradients of gradient expressions), and
//! the Jacobian helpers, all checked against central differences computed
//! from nothing but forward evaluations.

use jens_core::autodiff::{Graph, NodeId};
use jens_core::jacobian::{frob_sq, frob_sq_estimate, jacobian_exact};
use jens_core::models::{init_params, ArchSpec};
use jens_core::rng;
use jens_core::tensor::Tensor;

use rand::Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;

trait Build: Fn(&mut Graph, &[NodeId]) -> NodeId {}
impl<F: Fn(&mut Graph, &[NodeId]) -> NodeId> Build for F {}

fn eval_scalar(inputs: &[Tensor], build: &impl Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    g.value(out).item()
}

fn analytic_grads(inputs: &[Tensor], build: &impl Build) -> Vec<Tensor> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out, &ids, false).unwrap();
    ids.iter().map(|id| grads.grad(&g, *id).clone()).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences, elementwise.
fn check_grads(inputs: &[Tensor], build: &impl Build, tol: f64) {
    let analytic = analytic_grads(inputs, build);
    for ti in 0..inputs.len() {
        for i in 0..inputs[ti].len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= H;
            let fd = (eval_scalar(&plus, build) - eval_scalar(&minus, build)) / (2.0 * H);
            let an = analytic[ti].data()[i];
            assert!(
                rel(an, fd) <= tol,
                "input {ti} elem {i}: analytic {an} vs fd {fd}"
            );
        }
    }
}

/// Directional-derivative-of-gradient value used by the double-backward
/// oracle: s(x) = sum_t <grad_t f(x), d_t>.
fn eval_s(inputs: &[Tensor], build: &impl Build, dirs: &[Tensor]) -> f64 {
    let grads = analytic_grads(inputs, build);
    grads
        .iter()
        .zip(dirs)
        .map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Check gradients of the gradient: differentiate s(x) (built via a
/// create_graph backward) and compare against finite differences of s.
fn check_double_grads(inputs: &[Tensor], build: &impl Build, tol: f64) {
    let dirs: Vec<Tensor> = {
        let mut rng = rng::seeded(0xD1F);
        inputs
            .iter()
            .map(|t| {
                let data = (0..t.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect()
    };

    // Analytic: build s as a graph expression and differentiate it.
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        let grads = g.backward(out, &ids, true).unwrap();
        let mut s: Option<NodeId> = None;
        for (id, d) in ids.iter().zip(&dirs) {
            let gid = grads.grad_id(*id);
            let dc = g.constant(d.clone());
            let prod = g.multiply(gid, dc).unwrap();
            let term = g.sum(prod).unwrap();
            s = Some(match s {
                None => term,
                Some(acc) => g.add(acc, term).unwrap(),
            });
        }
        let hv = g.backward(s.unwrap(), &ids, false).unwrap();
        ids.iter().map(|id| hv.grad(&g, *id).clone()).collect()
    };

    for ti in 0..inputs.len() {
        for i in 0..inputs[ti].len() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= H;
            let fd = (eval_s(&plus, build, &dirs) - eval_s(&minus, build, &dirs)) / (2.0 * H);
            let an = analytic[ti].data()[i];
            assert!(
                rel(an, fd) <= tol,
                "double: input {ti} elem {i}: analytic {an} vs fd {fd}"
            );
        }
    }
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Pseudorandom tensor with entries in [lo, hi], deterministic per seed.
fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = rng::seeded(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn elementwise_and_scaling_ops() {
    let a = t(&[2, 3], &[0.31, -0.72, 1.4, 0.55, -1.2, 0.8]);
    let b = t(&[2, 3], &[0.9, 0.41, -0.33, 1.21, 0.57, -0.66]);
    let pair = [a.clone(), b.clone()];

    check_grads(&pair, &|g, ids| {
        let x = g.add(ids[0], ids[1]).unwrap();
        g.sum(x).unwrap()
    }, TOL);
    check_grads(&pair, &|g, ids| {
        let x = g.subtract(ids[0], ids[1]).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&pair, &|g, ids| {
        let x = g.multiply(ids[0], ids[1]).unwrap();
        g.sum(x).unwrap()
    }, TOL);
    check_grads(&[a.clone()], &|g, ids| {
        let x = g.scale(ids[0], -2.5).unwrap();
        let s = g.square(x).unwrap();
        g.mean(s).unwrap()
    }, TOL);
    // Inputs are all at least 0.3 away from the ReLU kink.
    check_grads(&[a.clone()], &|g, ids| {
        let x = g.relu(ids[0]).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
}

#[test]
fn transcendental_ops() {
    let pos = t(&[1, 4], &[0.4, 1.3, 2.2, 0.75]);
    check_grads(&[pos.clone()], &|g, ids| {
        let x = g.exp(ids[0]).unwrap();
        g.sum(x).unwrap()
    }, TOL);
    check_grads(&[pos.clone()], &|g, ids| {
        let x = g.log(ids[0]).unwrap();
        g.sum(x).unwrap()
    }, TOL);
    check_grads(&[pos], &|g, ids| {
        let x = g.recip(ids[0]).unwrap();
        g.sum(x).unwrap()
    }, TOL);
}

#[test]
fn matmul_and_transpose() {
    let a = rand_t(&[3, 4], -1.0, 1.0, 11);
    let b = rand_t(&[4, 2], -1.0, 1.0, 12);
    check_grads(&[a.clone(), b.clone()], &|g, ids| {
        let x = g.matmul(ids[0], ids[1]).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&[a], &|g, ids| {
        let x = g.transpose(ids[0]).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
}

#[test]
fn reductions_and_broadcasts() {
    let a = rand_t(&[3, 4], -1.0, 1.0, 21);
    let row = rand_t(&[1, 4], -1.0, 1.0, 22);
    let col = rand_t(&[3, 1], -1.0, 1.0, 23);
    let scalar = Tensor::scalar(0.37).unwrap();

    check_grads(&[a.clone()], &|g, ids| {
        let x = g.sum_axis0(ids[0]).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&[a.clone()], &|g, ids| {
        let x = g.sum_axis1(ids[0]).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&[row], &|g, ids| {
        let x = g.bcast_axis0(ids[0], 3).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&[col], &|g, ids| {
        let x = g.bcast_axis1(ids[0], 5).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&[scalar], &|g, ids| {
        let x = g.bcast_scalar(ids[0], &[2, 3]).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&[a], &|g, ids| {
        let x = g.mean(ids[0]).unwrap();
        g.square(x).unwrap()
    }, TOL);
}

#[test]
fn gather_scatter_and_softmax() {
    let a = rand_t(&[3, 4], -1.5, 1.5, 31);
    let picked_idx = vec![2, 0, 3];
    check_grads(&[a.clone()], &|g, ids| {
        let x = g.gather_row(ids[0], &picked_idx).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);

    let slim = rand_t(&[3, 1], -1.0, 1.0, 32);
    let scatter_idx = vec![1, 3, 0];
    check_grads(&[slim], &|g, ids| {
        let x = g.scatter_row(ids[0], &scatter_idx, 5).unwrap();
        let s = g.square(x).unwrap();
        g.sum(s).unwrap()
    }, TOL);

    check_grads(&[a.clone()], &|g, ids| {
        let lp = g.log_softmax(ids[0]).unwrap();
        let x = g.gather_row(lp, &picked_idx).unwrap();
        let m = g.mean(x).unwrap();
        g.scale(m, -1.0).unwrap()
    }, TOL);
}

#[test]
fn shape_ops() {
    let a = rand_t(&[2, 6], -1.0, 1.0, 41);
    check_grads(&[a.clone()], &|g, ids| {
        let r = g.reshape(ids[0], &[3, 4]).unwrap();
        let s = g.square(r).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    let img = rand_t(&[2, 3, 2, 2], -1.0, 1.0, 42);
    check_grads(&[img], &|g, ids| {
        let f = g.flatten(ids[0]).unwrap();
        let s = g.square(f).unwrap();
        g.sum(s).unwrap()
    }, TOL);
}

#[test]
fn conv_family() {
    let x = rand_t(&[1, 2, 4, 4], -1.0, 1.0, 51);
    let k = rand_t(&[2, 2, 2, 2], -1.0, 1.0, 52);
    check_grads(&[x.clone(), k.clone()], &|g, ids| {
        let c = g.conv2d(ids[0], ids[1]).unwrap();
        let s = g.square(c).unwrap();
        g.sum(s).unwrap()
    }, TOL);

    check_grads(&[x.clone()], &|g, ids| {
        let p = g.pad2d(ids[0], 1, 2).unwrap();
        let s = g.square(p).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    let padded = rand_t(&[1, 2, 6, 6], -1.0, 1.0, 53);
    check_grads(&[padded], &|g, ids| {
        let c = g.crop2d(ids[0], 1, 1).unwrap();
        let s = g.square(c).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&[k.clone()], &|g, ids| {
        let f = g.flip_hw(ids[0]).unwrap();
        let s = g.square(f).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    check_grads(&[k], &|g, ids| {
        let f = g.swap_io(ids[0]).unwrap();
        let s = g.square(f).unwrap();
        g.sum(s).unwrap()
    }, TOL);

    let pool_in = rand_t(&[1, 2, 4, 4], -1.0, 1.0, 54);
    check_grads(&[pool_in], &|g, ids| {
        let p = g.avgpool2d(ids[0]).unwrap();
        let s = g.square(p).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    let small = rand_t(&[1, 2, 2, 2], -1.0, 1.0, 55);
    check_grads(&[small], &|g, ids| {
        let u = g.upsample2d(ids[0]).unwrap();
        let s = g.square(u).unwrap();
        g.sum(s).unwrap()
    }, TOL);

    let chan = rand_t(&[3], -1.0, 1.0, 56);
    check_grads(&[chan], &|g, ids| {
        let b = g.bcast_chan(ids[0], 2, 2, 2).unwrap();
        let s = g.square(b).unwrap();
        g.sum(s).unwrap()
    }, TOL);
    let vol = rand_t(&[2, 3, 2, 2], -1.0, 1.0, 57);
    check_grads(&[vol], &|g, ids| {
        let c = g.sum_chan(ids[0]).unwrap();
        let s = g.square(c).unwrap();
        g.sum(s).unwrap()
    }, TOL);
}

#[test]
fn clamp_away_from_its_kinks() {
    // Values clear of 0 and 1 where the clamp is differentiable.
    let a = t(&[1, 5], &[0.2, 0.8, -0.4, 1.5, 0.55]);
    check_grads(&[a], &|g, ids| {
        let c = g.clamp01(ids[0]).unwrap();
        let s = g.square(c).unwrap();
        g.sum(s).unwrap()
    }, TOL);
}

#[test]
fn double_backward_of_dense_net_loss() {
    // MLP forward + cross-entropy + squared-gradient penalty exercises the
    // adjoints of matmul, bias broadcast, relu, log_softmax, gather, square,
    // sum, and scale inside a differentiated backward pass.
    let w1 = rand_t(&[4, 3], -0.8, 0.8, 61);
    let b1 = rand_t(&[1, 3], -0.2, 0.2, 62);
    let w2 = rand_t(&[3, 2], -0.8, 0.8, 63);
    let x = rand_t(&[2, 4], 0.1, 0.9, 64);
    let labels = vec![0, 1];
    let inputs = [w1, b1, w2, x];
    let build = |g: &mut Graph, ids: &[NodeId]| -> NodeId {
        let (w1, b1, w2, x) = (ids[0], ids[1], ids[2], ids[3]);
        let lin = g.matmul(x, w1).unwrap();
        let bb = g.bcast_axis0(b1, 2).unwrap();
        let pre = g.add(lin, bb).unwrap();
        let h = g.relu(pre).unwrap();
        let logits = g.matmul(h, w2).unwrap();
        let lp = g.log_softmax(logits).unwrap();
        let picked = g.gather_row(lp, &labels).unwrap();
        let m = g.mean(picked).unwrap();
        g.scale(m, -1.0).unwrap()
    };
    check_grads(&inputs, &build, TOL);
    check_double_grads(&inputs, &build, 1e-4);
}

#[test]
fn double_backward_of_conv_loss() {
    // Conv + bias + relu + pool + flatten; its backward uses pad, crop,
    // flip, swap, and upsample, and the double backward differentiates all
    // of those adjoint constructions.
    let x = rand_t(&[1, 1, 4, 4], 0.1, 0.9, 71);
    let k = rand_t(&[2, 1, 2, 2], -0.7, 0.7, 72);
    let bias = rand_t(&[2], -0.2, 0.2, 73);
    let inputs = [x, k, bias];
    let build = |g: &mut Graph, ids: &[NodeId]| -> NodeId {
        let c = g.conv2d(ids[0], ids[1]).unwrap();
        let b = g.bcast_chan(ids[2], 1, 3, 3).unwrap();
        let pre = g.add(c, b).unwrap();
        let h = g.relu(pre).unwrap();
        let s = g.square(h).unwrap();
        g.sum(s).unwrap()
    };
    check_grads(&inputs, &build, TOL);
    check_double_grads(&inputs, &build, 1e-4);

    let pool_x = rand_t(&[1, 2, 4, 4], -1.0, 1.0, 74);
    let pool = |g: &mut Graph, ids: &[NodeId]| -> NodeId {
        let p = g.avgpool2d(ids[0]).unwrap();
        let s = g.square(p).unwrap();
        g.sum(s).unwrap()
    };
    check_double_grads(&[pool_x], &pool, 1e-4);
}

#[test]
fn double_backward_of_transcendentals() {
    let a = t(&[1, 3], &[0.6, 1.4, 2.1]);
    check_double_grads(&[a.clone()], &|g, ids| {
        let e = g.exp(ids[0]).unwrap();
        let s = g.square(e).unwrap();
        g.sum(s).unwrap()
    }, 1e-4);
    check_double_grads(&[a.clone()], &|g, ids| {
        let l = g.log(ids[0]).unwrap();
        let s = g.square(l).unwrap();
        g.sum(s).unwrap()
    }, 1e-4);
    check_double_grads(&[a], &|g, ids| {
        let r = g.recip(ids[0]).unwrap();
        let s = g.square(r).unwrap();
        g.sum(s).unwrap()
    }, 1e-4);
}

#[test]
fn mlp_jacobian_matches_finite_differences() {
    let spec = ArchSpec::Mlp {
        input_dim: 5,
        hidden: vec![4],
        classes: 3,
    };
    let m = init_params(&spec, 17).unwrap();
    let x = rand_t(&[5], 0.2, 0.8, 81);
    let j = jacobian_exact(&m, &x).unwrap();
    assert_eq!(j.shape(), &[3, 5]);
    for d in 0..5 {
        let mut plus = x.clone();
        plus.data_mut()[d] += H;
        let mut minus = x.clone();
        minus.data_mut()[d] -= H;
        let lp = m
            .forward_logits(&Tensor::new(vec![1, 5], plus.data().to_vec()).unwrap())
            .unwrap();
        let lm = m
            .forward_logits(&Tensor::new(vec![1, 5], minus.data().to_vec()).unwrap())
            .unwrap();
        for c in 0..3 {
            let fd = (lp.data()[c] - lm.data()[c]) / (2.0 * H);
            assert!(
                rel(j.at2(c, d), fd) <= TOL,
                "J[{c},{d}] = {} vs fd {fd}",
                j.at2(c, d)
            );
        }
    }
}

#[test]
fn lenet_jacobian_matches_directional_derivatives() {
    let m = init_params(&ArchSpec::lenet(), 3).unwrap();
    let x = rand_t(&[784], 0.2, 0.8, 91);
    let j = jacobian_exact(&m, &x).unwrap();
    assert_eq!(j.shape(), &[10, 784]);

    let mut rng = rng::seeded(92);
    for _ in 0..4 {
        let u: Vec<f64> = (0..784).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        for i in 0..784 {
            plus[i] += H * u[i];
            minus[i] -= H * u[i];
        }
        let lp = m.forward_logits(&Tensor::new(vec![1, 784], plus).unwrap()).unwrap();
        let lm = m.forward_logits(&Tensor::new(vec![1, 784], minus).unwrap()).unwrap();
        for c in 0..10 {
            let fd = (lp.data()[c] - lm.data()[c]) / (2.0 * H);
            let ju: f64 = (0..784).map(|d| j.at2(c, d) * u[d]).sum();
            assert!(rel(ju, fd) <= 1e-4, "class {c}: Ju {ju} vs fd {fd}");
        }
    }
}

#[test]
fn frob_estimator_is_unbiased() {
    let spec = ArchSpec::Mlp {
        input_dim: 6,
        hidden: vec![5],
        classes: 3,
    };
    let m = init_params(&spec, 23).unwrap();
    let x = rand_t(&[6], 0.2, 0.8, 24);
    let exact = frob_sq(&jacobian_exact(&m, &x).unwrap());

    let runs = 200;
    let estimates: Vec<f64> = (0..runs)
        .map(|s| frob_sq_estimate(&m, &x, 32, 1000 + s).unwrap())
        .collect();
    let mean = estimates.iter().sum::<f64>() / runs as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (runs as f64 - 1.0);
    let se = (var / runs as f64).sqrt();
    assert!(
        (mean - exact).abs() <= 4.0 * se,
        "estimator mean {mean} vs exact {exact}, se {se}"
    );
}

#[test]
fn graph_rebuild_is_bit_identical() {
    let build = |seed: u64| -> Vec<f64> {
        let x = rand_t(&[3, 4], -1.0, 1.0, seed);
        let mut g = Graph::new();
        let xid = g.leaf(x);
        let sq = g.square(xid).unwrap();
        let lp = g.log_softmax(sq).unwrap();
        let s = g.sum(lp).unwrap();
        let grads = g.backward(s, &[xid], false).unwrap();
        grads.grad(&g, xid).data().to_vec()
    };
    assert_eq!(build(5), build(5));
}
