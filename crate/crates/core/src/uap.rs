//! Universal adversarial perturbations: a single input-space offset, bounded
//! in the l-infinity norm, optimized by sign ascent to flip a model's
//! predictions across an entire dataset at once.
//!
//! The objective is the summed cross-entropy of perturbed inputs against the
//! target's own clean predictions, so crafting never sees true labels.
//! Success is then measured against true labels on an evaluation set.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::models::argmax_rows;
use crate::rng;
use crate::tensor::Tensor;

const UAP_MAGIC: &[u8; 4] = b"JUAP";
const UAP_VERSION: u16 = 1;
/// Slack for feasibility checks on stored perturbations.
pub const LINF_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct UapConfig {
    /// Attack budget, in (0, 1] pixel units.
    pub epsilon: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// Restarts tried by [`worst_case_uap`].
    pub seeds: usize,
    /// Clamp perturbed inputs to [0, 1] inside the attack loss.
    pub clip_inputs: bool,
}

impl UapConfig {
    pub fn new(epsilon: f64) -> Result<UapConfig> {
        let cfg = UapConfig {
            epsilon,
            iterations: 100,
            batch_size: 200,
            step_size: epsilon / 10.0,
            seeds: 50,
            clip_inputs: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same knobs at a different budget; the step size follows to eps/10.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<UapConfig> {
        let cfg = UapConfig {
            epsilon,
            step_size: epsilon / 10.0,
            ..*self
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 || self.epsilon > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} outside (0, 1]",
                self.epsilon
            )));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.seeds == 0 {
            return Err(Error::InvalidArgument(
                "iterations, batch_size, and seeds must be positive".into(),
            ));
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "step_size {} must be positive",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// One crafted perturbation with its provenance and measured strength.
#[derive(Clone, Debug)]
pub struct Perturbation {
    /// `[D]`, with every entry in `[-epsilon, epsilon]`.
    pub delta: Tensor,
    pub epsilon: f64,
    pub seed: u64,
    /// Fraction of the evaluation set misclassified under this delta.
    pub success_rate: f64,
}

impl Perturbation {
    pub fn linf(&self) -> f64 {
        self.delta.max_abs()
    }

    fn check_feasible(&self, context: &str) -> Result<()> {
        if self.linf() > self.epsilon + LINF_TOL {
            return Err(Error::InvalidArgument(format!(
                "{context}: perturbation norm {} exceeds budget {}",
                self.linf(),
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Clamp every coordinate into `[-eps, eps]`. Idempotent; `eps = 0` zeroes
/// the vector.
pub fn project_linf(delta: &mut Tensor, eps: f64) {
    assert!(eps >= 0.0 && eps.is_finite(), "bad projection radius {eps}");
    for v in delta.data_mut() {
        *v = v.clamp(-eps, eps);
    }
}

fn check_dims(target: &Ensemble, ds: &Dataset, what: &'static str) -> Result<()> {
    if target.input_dim() != ds.dim() || target.classes() != ds.classes() {
        return Err(Error::shape(
            what,
            format!(
                "target ({}, {} classes) vs dataset ({}, {} classes)",
                target.input_dim(),
                target.classes(),
                ds.dim(),
                ds.classes()
            ),
        ));
    }
    Ok(())
}

/// Craft one perturbation by projected sign ascent from a seeded uniform
/// start. Deterministic per `(target, datasets, config, seed)`. A non-finite
/// attack loss aborts this seed with a divergence error; sweeps treat that
/// as a skipped restart.
pub fn sgd_uap(
    target: &Ensemble,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &UapConfig,
    seed: u64,
) -> Result<Perturbation> {
    cfg.validate()?;
    check_dims(target, train_ds, "sgd_uap train set")?;
    check_dims(target, eval_ds, "sgd_uap eval set")?;

    let d = train_ds.dim();
    let n = train_ds.len();
    let mut rng = rng::seeded(seed);
    let mut delta: Vec<f64> = (0..d)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * cfg.epsilon)
        .collect();

    for it in 0..cfg.iterations {
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let (bx, _) = train_ds.batch(&indices);
        let clean_labels = target.predict(&bx)?;

        let mut g = Graph::new();
        let att = target.attach_frozen(&mut g);
        let xb = g.constant(bx);
        let dleaf = g.leaf(Tensor::from_parts(vec![1, d], delta.clone()));
        let db = g.bcast_axis0(dleaf, indices.len())?;
        let mut xp = g.add(xb, db)?;
        if cfg.clip_inputs {
            xp = g.clamp01(xp)?;
        }
        let lp = att.log_probs(&mut g, xp)?;
        let picked = g.gather_row(lp, &clean_labels)?;
        let s = g.sum(picked)?;
        let loss = g.scale(s, -1.0)?;

        let loss_val = g.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Divergence {
                epoch: 0,
                step: it,
                detail: format!("attack loss became {loss_val} at seed {seed}"),
            });
        }

        let grads = g.backward(loss, &[dleaf], false)?;
        let gd = grads.grad(&g, dleaf).data().to_vec();
        for (v, gv) in delta.iter_mut().zip(gd) {
            *v += cfg.step_size * sign(gv);
            *v = v.clamp(-cfg.epsilon, cfg.epsilon);
        }
    }

    let dt = Tensor::from_parts(vec![d], delta);
    let success_rate = attack_success_rate(target, eval_ds, &dt)?;
    Ok(Perturbation {
        delta: dt,
        epsilon: cfg.epsilon,
        seed,
        success_rate,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Run `cfg.seeds` restarts and keep the strongest perturbation, breaking
/// rate ties toward the lowest seed. Restarts whose loss diverged are
/// dropped; only a sweep with zero survivors is an error.
pub fn worst_case_uap(
    target: &Ensemble,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    cfg: &UapConfig,
) -> Result<Perturbation> {
    cfg.validate()?;
    let runs: Vec<Result<Perturbation>> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|seed| sgd_uap(target, train_ds, eval_ds, cfg, seed))
        .collect();

    let mut best: Option<Perturbation> = None;
    for run in runs {
        match run {
            Ok(p) => {
                let better = match &best {
                    None => true,
                    Some(b) => p.success_rate > b.success_rate,
                };
                if better {
                    best = Some(p);
                }
            }
            Err(Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    best.ok_or_else(|| {
        Error::InvalidArgument(format!("all {} attack restarts diverged", cfg.seeds))
    })
}

/// Fraction of `ds` the target misclassifies under `delta`. Perturbed inputs
/// are always clamped back to [0, 1]; with a zero delta this is exactly one
/// minus the clean accuracy.
pub fn attack_success_rate(target: &Ensemble, ds: &Dataset, delta: &Tensor) -> Result<f64> {
    check_dims(target, ds, "attack_success_rate")?;
    let d = ds.dim();
    let ok = (delta.shape().len() == 1 && delta.shape()[0] == d)
        || (delta.shape().len() == 2 && delta.shape() == [1, d]);
    if !ok {
        return Err(Error::shape(
            "attack_success_rate",
            format!("delta {:?} vs dim {d}", delta.shape()),
        ));
    }

    let mut wrong = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(512) {
        let (bx, labels) = ds.batch(chunk);
        let mut data = bx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = (*v + delta.data()[i % d]).clamp(0.0, 1.0);
        }
        let perturbed = Tensor::from_parts(vec![chunk.len(), d], data);
        let pred = argmax_rows(&target.forward(&perturbed)?);
        wrong += pred.iter().zip(&labels).filter(|(p, l)| p != l).count();
    }
    Ok(wrong as f64 / ds.len() as f64)
}

pub fn save_perturbation(p: &Perturbation, path: &Path) -> Result<()> {
    p.check_feasible("save")?;
    let mut buf = Vec::new();
    buf.extend_from_slice(UAP_MAGIC);
    buf.extend_from_slice(&UAP_VERSION.to_le_bytes());
    buf.extend_from_slice(&p.epsilon.to_le_bytes());
    buf.extend_from_slice(&p.seed.to_le_bytes());
    buf.extend_from_slice(&p.success_rate.to_le_bytes());
    buf.extend_from_slice(&(p.delta.len() as u64).to_le_bytes());
    for &v in p.delta.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Load and re-check feasibility, so a tampered file cannot smuggle in an
/// out-of-budget perturbation.
pub fn load_perturbation(path: &Path) -> Result<Perturbation> {
    let name = path.display().to_string();
    let buf = fs::read(path)?;
    let need = |pos: usize, n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(Error::Truncated {
                path: name.clone(),
                expected: pos + n,
                found: buf.len(),
            });
        }
        Ok(&buf[pos..pos + n])
    };
    if need(0, 4)? != UAP_MAGIC {
        return Err(Error::format(&name, "bad perturbation magic"));
    }
    let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
    if version != UAP_VERSION {
        return Err(Error::format(&name, format!("unsupported version {version}")));
    }
    let f = |pos: usize| -> Result<f64> {
        Ok(f64::from_le_bytes(need(pos, 8)?.try_into().unwrap()))
    };
    let epsilon = f(6)?;
    let seed = u64::from_le_bytes(need(14, 8)?.try_into().unwrap());
    let success_rate = f(22)?;
    let dim = u64::from_le_bytes(need(30, 8)?.try_into().unwrap()) as usize;
    let mut data = Vec::with_capacity(dim);
    for i in 0..dim {
        data.push(f(38 + 8 * i)?);
    }
    if buf.len() != 38 + 8 * dim {
        return Err(Error::format(&name, "trailing bytes"));
    }
    if data.iter().any(|v| !v.is_finite()) || !epsilon.is_finite() {
        return Err(Error::format(&name, "non-finite payload"));
    }
    let p = Perturbation {
        delta: Tensor::from_parts(vec![dim], data),
        epsilon,
        seed,
        success_rate,
    };
    p.check_feasible(&name)
        .map_err(|e| Error::format(&name, e.to_string()))?;
    Ok(p)
}

/// Render the perturbation as a grayscale PNG, mapping `[-eps, eps]`
/// linearly onto `[0, 255]` (so zero is mid-gray).
pub fn save_png(p: &Perturbation, rows: usize, cols: usize, path: &Path) -> Result<()> {
    if rows * cols != p.delta.len() {
        return Err(Error::shape(
            "save_png",
            format!("{rows}x{cols} grid vs {} entries", p.delta.len()),
        ));
    }
    let bytes: Vec<u8> = p
        .delta
        .data()
        .iter()
        .map(|&v| (((v + p.epsilon) / (2.0 * p.epsilon) * 255.0).round()).clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::GrayImage::from_raw(cols as u32, rows as u32, bytes)
        .expect("sized to rows*cols");
    img.save(path)
        .map_err(|e| Error::format(&path.display().to_string(), format!("png: {e}")))
}
