//! Analytic moments of squared Frobenius norms of random-entry Jacobians,
//! Monte Carlo verification of those moments, and monotonicity sweeps over
//! the ensemble size.
//!
//! Model: each of M member matrices has C*D iid Normal(mu, sigma^2) entries,
//! and the ensemble matrix is the weighted sum with simplex weights c. Every
//! entry of the ensemble matrix is then Normal(mu, q * sigma^2) with
//! q = sum c_i^2, which gives closed forms for the mean and variance of the
//! squared norm. With q in [1/M, 1) the ensemble norm concentrates below the
//! single-member norm; the uniform-weight case attains the 1/M floor.
//!
//! All six analytic quantities are computed through one shared expression
//! shape, so algebraically equal cases (uniform weights, M = 1) are equal
//! bitwise, not merely approximately.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::ensemble::{ensemble_jacobian, Ensemble};
use crate::error::{Error, Result};
use crate::jacobian::frob_sq;
use crate::rng::{self, PolarNormal, NORMAL_METHOD};

/// Simplex slack used by all weight checks here.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Samples drawn per RNG stream; chunk i uses stream i of the seed.
pub const CHUNK: usize = 4096;

#[derive(Clone, Debug)]
pub struct McConfig {
    pub members: usize,
    pub classes: usize,
    pub dim: usize,
    pub mu: f64,
    pub sigma: f64,
    /// `None` means exactly uniform weights 1/members.
    pub weights: Option<Vec<f64>>,
    pub samples: usize,
    pub seed: u64,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 || self.classes == 0 || self.dim == 0 {
            return Err(Error::InvalidArgument(
                "members, classes, and dim must be positive".into(),
            ));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 || !self.mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need finite mu and positive sigma, got mu={} sigma={}",
                self.mu, self.sigma
            )));
        }
        if self.samples < 1000 {
            return Err(Error::InvalidArgument(format!(
                "{} samples is below the 1000 floor for stable moment estimates",
                self.samples
            )));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.members {
                return Err(Error::InvalidArgument(format!(
                    "{} weights for {} members",
                    w.len(),
                    self.members
                )));
            }
            sum_sq_weights(w)?;
        }
        Ok(())
    }

    /// `sum c_i^2` for this configuration; the uniform case is computed as
    /// exactly `1/members` rather than by summation.
    pub fn weight_sum_sq(&self) -> Result<f64> {
        match &self.weights {
            None => Ok(1.0 / self.members as f64),
            Some(w) => sum_sq_weights(w),
        }
    }

    fn weight_at(&self, i: usize) -> f64 {
        match &self.weights {
            None => 1.0 / self.members as f64,
            Some(w) => w[i],
        }
    }
}

/// Sum of squared simplex weights. Rejects anything off the open simplex
/// (a nonpositive weight, a sum away from one, or a weight of one alongside
/// other members), then asserts the provable range `1/M <= sum < 1` with
/// [`SIMPLEX_TOL`] slack on the closed end.
pub fn sum_sq_weights(w: &[f64]) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::InvalidArgument("empty weight vector".into()));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidArgument(format!("weights sum to {sum}, not 1")));
    }
    for &c in w {
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::InvalidArgument(format!("weight {c} not in (0, 1]")));
        }
        if w.len() > 1 && c >= 1.0 {
            return Err(Error::InvalidArgument(
                "a weight of 1 requires a single member".into(),
            ));
        }
    }
    let s: f64 = w.iter().map(|c| c * c).sum();
    let m = w.len() as f64;
    if w.len() == 1 {
        assert!((s - 1.0).abs() <= SIMPLEX_TOL, "single weight square {s}");
    } else {
        assert!(s >= 1.0 / m - SIMPLEX_TOL, "sum of squares {s} below 1/{m}");
        assert!(s < 1.0, "sum of squares {s} reached the open bound");
    }
    Ok(s)
}

/// Closed-form moments of the three squared-norm distributions.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticBounds {
    /// Mean for one member.
    pub e_single: f64,
    pub var_single: f64,
    /// Mean at the uniform-weight floor `q = 1/M`.
    pub e_lower: f64,
    pub var_lower: f64,
    /// Mean at the configured weights.
    pub e_exact: f64,
    pub var_exact: f64,
}

/// Mean and variance of `||X||_F^2` when X has CD iid Normal(mu, s2c)
/// entries. The single shared shape keeps equal inputs bitwise equal
/// outputs.
fn norm_moments(cd: f64, mu2: f64, s2c: f64) -> (f64, f64) {
    let mean = cd * (s2c + mu2);
    let var = cd * (4.0 * mu2 * s2c + 2.0 * (s2c * s2c));
    (mean, var)
}

pub fn analytic_bounds(cfg: &McConfig) -> Result<AnalyticBounds> {
    cfg.validate()?;
    let cd = (cfg.classes * cfg.dim) as f64;
    let mu2 = cfg.mu * cfg.mu;
    let s2 = cfg.sigma * cfg.sigma;
    let q_exact = cfg.weight_sum_sq()?;
    let q_lower = 1.0 / cfg.members as f64;

    let (e_single, var_single) = norm_moments(cd, mu2, s2);
    let (e_exact, var_exact) = norm_moments(cd, mu2, q_exact * s2);
    let (e_lower, var_lower) = norm_moments(cd, mu2, q_lower * s2);
    Ok(AnalyticBounds {
        e_single,
        var_single,
        e_lower,
        var_lower,
        e_exact,
        var_exact,
    })
}

/// Moment estimates from the simulated norms, with standard errors.
#[derive(Clone, Copy, Debug)]
pub struct SimulationRecord {
    pub mean_ens: f64,
    pub var_ens: f64,
    pub se_mean_ens: f64,
    pub se_var_ens: f64,
    pub mean_single: f64,
    pub var_single: f64,
    pub se_mean_single: f64,
    pub se_var_single: f64,
    pub samples: usize,
    /// How normal draws were generated, recorded for reproducibility.
    pub normal_method: &'static str,
}

/// Draw `samples` squared norms of the ensemble matrix and of its first
/// member, and estimate their means and variances.
///
/// Determinism contract: sample block `i` (of [`CHUNK`]) uses stream `i` of
/// the seed; within a sample, entries are drawn in row-major order with the
/// M member values consecutive per entry. The result is bit-identical across
/// runs and thread counts.
pub fn simulate_bounds(cfg: &McConfig) -> Result<SimulationRecord> {
    cfg.validate()?;
    let n = cfg.samples;
    let entries = cfg.classes * cfg.dim;
    let weights: Vec<f64> = (0..cfg.members).map(|i| cfg.weight_at(i)).collect();

    let mut ens_vals = vec![0.0f64; n];
    let mut single_vals = vec![0.0f64; n];
    ens_vals
        .par_chunks_mut(CHUNK)
        .zip(single_vals.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(ci, (ens_chunk, single_chunk))| {
            let mut rng = rng::seeded_stream(cfg.seed, ci as u64);
            let mut polar = PolarNormal::new();
            for (ev, sv) in ens_chunk.iter_mut().zip(single_chunk.iter_mut()) {
                let mut ens_ssq = 0.0;
                let mut single_ssq = 0.0;
                for _ in 0..entries {
                    let mut f = 0.0;
                    for (mi, &c) in weights.iter().enumerate() {
                        let a = cfg.mu + cfg.sigma * polar.next(&mut rng);
                        f += c * a;
                        if mi == 0 {
                            single_ssq += a * a;
                        }
                    }
                    ens_ssq += f * f;
                }
                *ev = ens_ssq;
                *sv = single_ssq;
            }
        });

    let (mean_ens, var_ens, se_mean_ens, se_var_ens) = moments_of(&ens_vals);
    let (mean_single, var_single, se_mean_single, se_var_single) = moments_of(&single_vals);
    Ok(SimulationRecord {
        mean_ens,
        var_ens,
        se_mean_ens,
        se_var_ens,
        mean_single,
        var_single,
        se_mean_single,
        se_var_single,
        samples: n,
        normal_method: NORMAL_METHOD,
    })
}

/// Pairwise (cascade) summation: deterministic and far better conditioned
/// than a running sum for large n.
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 64 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// (mean, sample variance, SE of mean, asymptotic SE of the variance).
fn moments_of(vals: &[f64]) -> (f64, f64, f64, f64) {
    let n = vals.len() as f64;
    let mean = pairwise_sum(vals) / n;
    let sq: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1.0);
    let quads: Vec<f64> = sq.iter().map(|s| s * s).collect();
    let m4 = pairwise_sum(&quads) / n;
    let se_mean = (var / n).sqrt();
    let se_var = ((m4 - var * var).max(0.0) / n).sqrt();
    (mean, var, se_mean, se_var)
}

#[derive(Clone, Debug)]
pub struct CheckLine {
    pub name: &'static str,
    pub observed: f64,
    pub reference: f64,
    /// Allowed absolute deviation; zero means a strict inequality check.
    pub band: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct BoundsCheck {
    pub lines: Vec<CheckLine>,
    pub pass: bool,
}

/// Compare simulation against the closed forms: four-standard-error bands
/// on both moments of both streams, plus the analytic and empirical
/// orderings for a true ensemble.
pub fn check_bounds(sim: &SimulationRecord, bounds: &AnalyticBounds, members: usize) -> BoundsCheck {
    let mut lines = Vec::new();
    let mut band_line = |name: &'static str, observed: f64, reference: f64, band: f64| {
        lines.push(CheckLine {
            name,
            observed,
            reference,
            band,
            pass: (observed - reference).abs() <= band,
        });
    };
    band_line(
        "ensemble mean within 4 SE of exact",
        sim.mean_ens,
        bounds.e_exact,
        4.0 * sim.se_mean_ens,
    );
    band_line(
        "ensemble variance within 4 SE of exact",
        sim.var_ens,
        bounds.var_exact,
        4.0 * sim.se_var_ens,
    );
    band_line(
        "single mean within 4 SE of analytic",
        sim.mean_single,
        bounds.e_single,
        4.0 * sim.se_mean_single,
    );
    band_line(
        "single variance within 4 SE of analytic",
        sim.var_single,
        bounds.var_single,
        4.0 * sim.se_var_single,
    );
    if members >= 2 {
        lines.push(CheckLine {
            name: "exact mean at or above uniform floor",
            observed: bounds.e_exact,
            reference: bounds.e_lower,
            band: 0.0,
            pass: bounds.e_exact >= bounds.e_lower * (1.0 - SIMPLEX_TOL),
        });
        lines.push(CheckLine {
            name: "exact mean strictly below single",
            observed: bounds.e_exact,
            reference: bounds.e_single,
            band: 0.0,
            pass: bounds.e_exact < bounds.e_single,
        });
        lines.push(CheckLine {
            name: "observed ensemble mean below single",
            observed: sim.mean_ens,
            reference: sim.mean_single,
            band: 0.0,
            pass: sim.mean_ens < sim.mean_single,
        });
    }
    let pass = lines.iter().all(|l| l.pass);
    BoundsCheck { lines, pass }
}

/// CSV rendering of a bounds check, one line per comparison.
pub fn bounds_check_csv(check: &BoundsCheck) -> String {
    let mut out = String::from("check,observed,reference,band,pass\n");
    for l in &check.lines {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.name, l.observed, l.reference, l.band, l.pass
        ));
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct MonoRow {
    pub members: usize,
    pub e_exact: f64,
    pub var_exact: f64,
    pub observed_mean: f64,
    pub se_mean: f64,
    pub within_band: bool,
}

#[derive(Clone, Debug)]
pub struct MonoSweep {
    pub rows: Vec<MonoRow>,
    /// Analytic moments strictly decrease and every observation sits in its
    /// four-standard-error band.
    pub pass: bool,
}

impl MonoSweep {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("members,e_exact,var_exact,observed_mean,se_mean,within_4se\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.members, r.e_exact, r.var_exact, r.observed_mean, r.se_mean, r.within_band
            ));
        }
        out
    }
}

/// Uniform-weight sweep over ensemble sizes. `ms` must be strictly
/// increasing; the analytic moments must strictly decrease along it.
pub fn monotonicity_sweep(base: &McConfig, ms: &[usize]) -> Result<MonoSweep> {
    if ms.is_empty() || ms.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "member counts must be strictly increasing".into(),
        ));
    }
    let mut rows = Vec::with_capacity(ms.len());
    for &m in ms {
        let cfg = McConfig {
            members: m,
            weights: None,
            ..base.clone()
        };
        let bounds = analytic_bounds(&cfg)?;
        let sim = simulate_bounds(&cfg)?;
        rows.push(MonoRow {
            members: m,
            e_exact: bounds.e_exact,
            var_exact: bounds.var_exact,
            observed_mean: sim.mean_ens,
            se_mean: sim.se_mean_ens,
            within_band: (sim.mean_ens - bounds.e_exact).abs() <= 4.0 * sim.se_mean_ens,
        });
    }
    let decreasing = rows
        .windows(2)
        .all(|w| w[1].e_exact < w[0].e_exact && w[1].var_exact < w[0].var_exact);
    let within = rows.iter().all(|r| r.within_band);
    Ok(MonoSweep {
        rows,
        pass: decreasing && within,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct FrobStats {
    pub mean: f64,
    /// Population variance over the probed inputs.
    pub var: f64,
    pub inputs: usize,
}

/// Mean and variance of the squared Jacobian norm of each target over the
/// first `n_inputs` images of `ds`.
pub fn empirical_model_frob(
    targets: &[&Ensemble],
    ds: &Dataset,
    n_inputs: usize,
) -> Result<Vec<FrobStats>> {
    if n_inputs == 0 || n_inputs > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "n_inputs {n_inputs} outside 1..={}",
            ds.len()
        )));
    }
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let vals: Vec<f64> = (0..n_inputs)
            .map(|i| Ok(frob_sq(&ensemble_jacobian(t, &ds.image(i))?)))
            .collect::<Result<_>>()?;
        let n = vals.len() as f64;
        let mean = pairwise_sum(&vals) / n;
        let sq: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&sq) / n;
        out.push(FrobStats {
            mean,
            var,
            inputs: n_inputs,
        });
    }
    Ok(out)
}
