//! Ensembles over classifier members: bagging, snapshot (cyclic-cosine),
//! and soft voting, with logit-mean or probability-mean aggregation.
//!
//! Weights always form a simplex: they sum to one within 1e-12, every weight
//! is strictly positive, and a weight of exactly one only occurs for a
//! single-member ensemble. The invariant is enforced at construction and
//! again after deserialization.
//!
//! The input-space Jacobian of a logit-mean ensemble is the weighted sum of
//! member Jacobians. No such identity exists for probability mixing, so
//! `ensemble_jacobian` refuses it rather than return something subtly wrong.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::autodiff::{Graph, NodeId};
use crate::data::{bootstrap_resample, Dataset};
use crate::error::{Error, Result};
use crate::jacobian::jacobian_rows;
use crate::models::{argmax_rows, AttachedModel, ArchSpec, ModelParams};
use crate::tensor::Tensor;
use crate::training::{train, LrSchedule, TrainConfig, TrainRecord};

pub const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// Average logits, then softmax once.
    LogitMean,
    /// Softmax each member, then average probabilities.
    ProbMean,
}

impl Aggregation {
    pub fn tag(&self) -> &'static str {
        match self {
            Aggregation::LogitMean => "logit_mean",
            Aggregation::ProbMean => "prob_mean",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Aggregation> {
        match tag {
            "logit_mean" => Ok(Aggregation::LogitMean),
            "prob_mean" => Ok(Aggregation::ProbMean),
            other => Err(Error::InvalidArgument(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMethod {
    Single,
    Bagging,
    Snapshot,
    SoftVote,
}

impl EnsembleMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            EnsembleMethod::Single => "single",
            EnsembleMethod::Bagging => "bagging",
            EnsembleMethod::Snapshot => "snapshot",
            EnsembleMethod::SoftVote => "softvote",
        }
    }

    pub fn from_tag(tag: &str) -> Result<EnsembleMethod> {
        match tag {
            "single" => Ok(EnsembleMethod::Single),
            "bagging" => Ok(EnsembleMethod::Bagging),
            "snapshot" => Ok(EnsembleMethod::Snapshot),
            "softvote" => Ok(EnsembleMethod::SoftVote),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    method: EnsembleMethod,
    members: Vec<ModelParams>,
    weights: Vec<f64>,
    aggregation: Aggregation,
}

fn validate_weights(weights: &[f64], members: usize) -> Result<()> {
    if weights.len() != members {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} members",
            weights.len(),
            members
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidArgument(format!(
            "weights sum to {sum}, not 1"
        )));
    }
    for &w in weights {
        if !w.is_finite() || w <= 0.0 || w > 1.0 {
            return Err(Error::InvalidArgument(format!("weight {w} outside (0, 1]")));
        }
        if members > 1 && w >= 1.0 - WEIGHT_TOL {
            return Err(Error::InvalidArgument(
                "a weight of 1 is only allowed for a single member".into(),
            ));
        }
    }
    Ok(())
}

impl Ensemble {
    pub fn new(
        method: EnsembleMethod,
        members: Vec<ModelParams>,
        weights: Vec<f64>,
        aggregation: Aggregation,
    ) -> Result<Ensemble> {
        if members.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs members".into()));
        }
        validate_weights(&weights, members.len())?;
        let dim = members[0].input_dim();
        let classes = members[0].classes();
        for m in &members {
            if m.input_dim() != dim || m.classes() != classes {
                return Err(Error::shape(
                    "ensemble",
                    format!(
                        "member ({}, {}) vs ({dim}, {classes})",
                        m.input_dim(),
                        m.classes()
                    ),
                ));
            }
        }
        Ok(Ensemble {
            method,
            members,
            weights,
            aggregation,
        })
    }

    /// Wrap one model as a degenerate ensemble.
    pub fn single(model: ModelParams) -> Ensemble {
        Ensemble {
            method: EnsembleMethod::Single,
            members: vec![model],
            weights: vec![1.0],
            aggregation: Aggregation::LogitMean,
        }
    }

    pub fn method(&self) -> EnsembleMethod {
        self.method
    }

    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn classes(&self) -> usize {
        self.members[0].classes()
    }

    pub fn attach_frozen(&self, g: &mut Graph) -> AttachedEnsemble {
        AttachedEnsemble {
            members: self.members.iter().map(|m| m.attach_frozen(g)).collect(),
            weights: self.weights.clone(),
            aggregation: self.aggregation,
        }
    }

    /// Aggregated forward pass: logits under [`Aggregation::LogitMean`],
    /// probabilities under [`Aggregation::ProbMean`]. Argmax works on either.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let att = self.attach_frozen(&mut g);
        let x = g.constant(batch.clone());
        let out = att.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch)?))
    }

    /// Write the ensemble as `manifest.json` plus one model file per member
    /// in `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i}.jens");
            m.save(&dir.join(&name))?;
            files.push(name);
        }
        let manifest = json!({
            "method": self.method.tag(),
            "aggregation": self.aggregation.tag(),
            "weights": self.weights,
            "members": files,
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("static structure"),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Ensemble> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath)?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(&mpath.display().to_string(), format!("json: {e}")))?;
        let get_str = |key: &str| -> Result<&str> {
            v.get(key)
                .and_then(Value::as_str)
                .ok_or_else(|| Error::format(&mpath.display().to_string(), format!("missing {key}")))
        };
        let method = EnsembleMethod::from_tag(get_str("method")?)?;
        let aggregation = Aggregation::from_tag(get_str("aggregation")?)?;
        let weights: Vec<f64> = v
            .get("weights")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::format(&mpath.display().to_string(), "missing weights"))?
            .iter()
            .map(|w| {
                w.as_f64()
                    .ok_or_else(|| Error::format(&mpath.display().to_string(), "bad weight"))
            })
            .collect::<Result<_>>()?;
        let files = v
            .get("members")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::format(&mpath.display().to_string(), "missing members"))?;
        let mut members = Vec::with_capacity(files.len());
        for f in files {
            let name = f
                .as_str()
                .ok_or_else(|| Error::format(&mpath.display().to_string(), "bad member entry"))?;
            members.push(ModelParams::load(&dir.join(name))?);
        }
        // Construction re-checks the simplex invariant, so a hand-edited
        // manifest cannot smuggle invalid weights in.
        Ensemble::new(method, members, weights, aggregation)
    }
}

/// Ensemble members attached to a graph (as constants) for building attack
/// or analysis losses on top of the aggregated output.
pub struct AttachedEnsemble {
    members: Vec<AttachedModel>,
    weights: Vec<f64>,
    aggregation: Aggregation,
}

impl AttachedEnsemble {
    /// Aggregated output node: logits (LogitMean) or probabilities (ProbMean).
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for (m, &w) in self.members.iter().zip(&self.weights) {
            let logits = m.forward(g, x)?;
            let contrib = match self.aggregation {
                Aggregation::LogitMean => logits,
                Aggregation::ProbMean => {
                    let lp = g.log_softmax(logits)?;
                    g.exp(lp)?
                }
            };
            let scaled = g.scale(contrib, w)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => g.add(a, scaled)?,
            });
        }
        Ok(acc.expect("members are nonempty"))
    }

    /// Log-probability node for cross-entropy style losses, valid for both
    /// aggregations.
    pub fn log_probs(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let out = self.forward(g, x)?;
        match self.aggregation {
            Aggregation::LogitMean => g.log_softmax(out),
            Aggregation::ProbMean => g.log(out),
        }
    }
}

/// Jacobian of the aggregated logits at one input, defined only for
/// logit-mean aggregation where it equals the weighted member sum.
pub fn ensemble_jacobian(e: &Ensemble, x: &Tensor) -> Result<Tensor> {
    if e.aggregation() != Aggregation::LogitMean {
        return Err(Error::UnsupportedAggregation(
            "jacobian is only defined for logit_mean aggregation",
        ));
    }
    let dim = e.input_dim();
    let ok = (x.shape().len() == 1 && x.shape()[0] == dim)
        || (x.shape().len() == 2 && x.shape() == [1, dim]);
    if !ok {
        return Err(Error::shape(
            "ensemble_jacobian",
            format!("input {:?} vs dim {dim}", x.shape()),
        ));
    }
    let mut g = Graph::new();
    let att = e.attach_frozen(&mut g);
    let xid = g.leaf(Tensor::from_parts(vec![1, dim], x.data().to_vec()));
    let agg = att.forward(&mut g, xid)?;
    let j = jacobian_rows(&mut g, agg, xid)?;
    Ok(g.value(j).clone())
}

fn uniform_weights(m: usize) -> Vec<f64> {
    vec![1.0 / m as f64; m]
}

/// Train `m` members on independent bootstrap resamples. Member `i` derives
/// everything (resample, init, batching) from `master_seed + i`.
pub fn build_bagging(
    arch: &ArchSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    m: usize,
    master_seed: u64,
) -> Result<Ensemble> {
    Ok(build_bagging_with_records(arch, ds, cfg, m, master_seed)?.0)
}

/// [`build_bagging`] plus each member's per-epoch training record.
pub fn build_bagging_with_records(
    arch: &ArchSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    m: usize,
    master_seed: u64,
) -> Result<(Ensemble, Vec<TrainRecord>)> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one member".into()));
    }
    let outcomes: Vec<(ModelParams, TrainRecord)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let seed = master_seed + i as u64;
            let sample = bootstrap_resample(ds, seed)?;
            let init = crate::models::init_params(arch, seed)?;
            let mut mcfg = cfg.clone();
            mcfg.seed = seed;
            let out = train(init, &sample, &mcfg)?;
            Ok((out.model, out.record))
        })
        .collect::<Result<_>>()?;
    let (members, records): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let e = Ensemble::new(
        EnsembleMethod::Bagging,
        members,
        uniform_weights(m),
        Aggregation::LogitMean,
    )?;
    Ok((e, records))
}

/// One training run under a cyclic-cosine schedule with `m` cycles; the
/// members are the cycle-end snapshots.
pub fn build_snapshot(
    arch: &ArchSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    m: usize,
    master_seed: u64,
) -> Result<Ensemble> {
    Ok(build_snapshot_with_records(arch, ds, cfg, m, master_seed)?.0)
}

/// [`build_snapshot`] plus the record of the single underlying run.
pub fn build_snapshot_with_records(
    arch: &ArchSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    m: usize,
    master_seed: u64,
) -> Result<(Ensemble, Vec<TrainRecord>)> {
    match cfg.lr_schedule {
        LrSchedule::CyclicCosine { cycles } if cycles == m => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "snapshot ensemble of {m} needs a cyclic schedule with {m} cycles, got {other:?}"
            )));
        }
    }
    let init = crate::models::init_params(arch, master_seed)?;
    let mut mcfg = cfg.clone();
    mcfg.seed = master_seed;
    let outcome = train(init, ds, &mcfg)?;
    if outcome.snapshots.len() != m {
        return Err(Error::InvalidArgument(format!(
            "schedule produced {} snapshots for {m} cycles; raise epochs so each cycle has full length",
            outcome.snapshots.len()
        )));
    }
    let e = Ensemble::new(
        EnsembleMethod::Snapshot,
        outcome.snapshots,
        uniform_weights(m),
        Aggregation::LogitMean,
    )?;
    Ok((e, vec![outcome.record]))
}

/// Independent full-data trainings combined by probability averaging.
pub fn build_softvote(
    arch: &ArchSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    m: usize,
    master_seed: u64,
) -> Result<Ensemble> {
    Ok(build_softvote_with_records(arch, ds, cfg, m, master_seed)?.0)
}

/// [`build_softvote`] plus each member's per-epoch training record.
pub fn build_softvote_with_records(
    arch: &ArchSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    m: usize,
    master_seed: u64,
) -> Result<(Ensemble, Vec<TrainRecord>)> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one member".into()));
    }
    let outcomes: Vec<(ModelParams, TrainRecord)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let seed = master_seed + i as u64;
            let init = crate::models::init_params(arch, seed)?;
            let mut mcfg = cfg.clone();
            mcfg.seed = seed;
            let out = train(init, ds, &mcfg)?;
            Ok((out.model, out.record))
        })
        .collect::<Result<_>>()?;
    let (members, records): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let e = Ensemble::new(
        EnsembleMethod::SoftVote,
        members,
        uniform_weights(m),
        Aggregation::ProbMean,
    )?;
    Ok((e, records))
}
