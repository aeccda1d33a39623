//! Subcommand implementations: the resumable train/attack/eval/report
//! pipeline over a (method, learners, lambda) grid, and the analytic-bounds
//! verification suite.
//!
//! Every artifact is written atomically (temp name, then rename) and stamped
//! with the config hash and master seed, so a run can be interrupted, moved,
//! or rerun without producing half-written or mismatched files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use jens_core::data::{blobs_in_noise, load_idx, Dataset};
use jens_core::ensemble::{
    build_bagging_with_records, build_snapshot_with_records, build_softvote_with_records, Ensemble,
    EnsembleMethod,
};
use jens_core::evaluation::{
    best_of_categories, clean_accuracy, emit_report_csv, emit_report_table, fmt1, tradeoff_svg,
    RobustnessReport,
};
use jens_core::models::{init_params, ArchSpec};
use jens_core::theory::{
    analytic_bounds, bounds_check_csv, check_bounds, monotonicity_sweep, simulate_bounds,
    sum_sq_weights, McConfig,
};
use jens_core::training::{train, JacobianMode, LrSchedule, Optimizer, TrainConfig, TrainRecord};
use jens_core::uap::{
    attack_success_rate, load_perturbation, save_perturbation, save_png, worst_case_uap, UapConfig,
};
use jens_core::{rng, Error, Result};
use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{
    derive_seed, grid_points, hash_text, ArchChoice, DatasetChoice, ExperimentConfig, GridPoint,
    JacobianChoice, OptimizerChoice,
};

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::InvalidArgument(format!("no parent for {}", path.display())))?;
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("no file name in {}", path.display())))?;
    let tmp = dir.join(format!(".tmp-{}", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn points_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("points")
}

fn report_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("report")
}

fn eps_key(eps: f64) -> u32 {
    (eps * 100.0).round() as u32
}

fn pert_path(point_dir: &Path, eps: f64) -> PathBuf {
    point_dir.join("uap").join(format!("eps_{:03}.pert", eps_key(eps)))
}

/// Load (train, test) per the config. Synthetic data is one generator draw
/// split in two: the class geometry depends on the seed, so a second draw
/// would pose a different task rather than a held-out set.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetChoice::Synthetic => {
            let ds = blobs_in_noise(
                cfg.synth_train + cfg.synth_test,
                cfg.synth_signal_dims,
                cfg.synth_total_dims,
                cfg.synth_classes,
                derive_seed(cfg.master_seed, "data"),
            )?;
            ds.split_at(cfg.synth_train)
        }
        DatasetChoice::Mnist | DatasetChoice::FashionMnist => {
            let root = std::env::var_os("JENS_DATA_DIR").ok_or_else(|| {
                Error::format(
                    "JENS_DATA_DIR",
                    "environment variable not set; export it to the directory holding the IDX files",
                )
            })?;
            let dir = PathBuf::from(root).join(cfg.dataset.tag());
            let find = |stem: &str| -> Result<PathBuf> {
                let plain = dir.join(stem);
                if plain.exists() {
                    return Ok(plain);
                }
                let gz = dir.join(format!("{stem}.gz"));
                if gz.exists() {
                    return Ok(gz);
                }
                Err(Error::format(
                    plain.display().to_string(),
                    "dataset file not found (also tried .gz)",
                ))
            };
            let train_ds = load_idx(
                &find("train-images-idx3-ubyte")?,
                &find("train-labels-idx1-ubyte")?,
            )?;
            let test_ds = load_idx(
                &find("t10k-images-idx3-ubyte")?,
                &find("t10k-labels-idx1-ubyte")?,
            )?;
            Ok((
                cap(train_ds, cfg.train_limit)?,
                cap(test_ds, cfg.test_limit)?,
            ))
        }
    }
}

fn cap(ds: Dataset, limit: usize) -> Result<Dataset> {
    if limit > 0 && limit < ds.len() {
        ds.take(limit)
    } else {
        Ok(ds)
    }
}

fn arch_for(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ArchSpec> {
    match cfg.arch {
        ArchChoice::Mlp => Ok(ArchSpec::Mlp {
            input_dim: ds.dim(),
            hidden: cfg.hidden.clone(),
            classes: ds.classes(),
        }),
        ArchChoice::Lenet => {
            if ds.img_shape() != (28, 28) {
                return Err(Error::shape(
                    "arch",
                    format!("lenet expects 28x28 images, dataset has {:?}", ds.img_shape()),
                ));
            }
            Ok(ArchSpec::Lenet {
                classes: ds.classes(),
            })
        }
    }
}

/// Single and ensemble points share the optimizer and budget; snapshot
/// points switch to the cyclic schedule (one cycle per member) and, when
/// configured, the hotter restart learning rate the method uses for member
/// diversity.
fn train_config(cfg: &ExperimentConfig, point: &GridPoint) -> TrainConfig {
    let snapshot = matches!(point.method, EnsembleMethod::Snapshot);
    let lr = if snapshot && cfg.snapshot_lr > 0.0 {
        cfg.snapshot_lr
    } else {
        cfg.lr
    };
    let optimizer = match cfg.optimizer {
        OptimizerChoice::Adam => Optimizer::adam(lr),
        OptimizerChoice::Sgd => Optimizer::sgd(lr, cfg.momentum),
    };
    let lr_schedule = if snapshot {
        LrSchedule::CyclicCosine {
            cycles: point.learners,
        }
    } else {
        LrSchedule::Constant
    };
    let jacobian_mode = match cfg.jacobian {
        JacobianChoice::Exact => JacobianMode::Exact,
        JacobianChoice::Projection => JacobianMode::Projection {
            n_projections: cfg.projections,
        },
    };
    TrainConfig {
        lambda_jr: point.lambda,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer,
        lr_schedule,
        seed: point.train_seed(cfg.master_seed),
        jacobian_mode,
    }
}

fn read_point_manifest(path: &Path) -> Option<(String, String)> {
    let text = fs::read_to_string(path).ok()?;
    let v: Value = serde_json::from_str(&text).ok()?;
    Some((
        v.get("status")?.as_str()?.to_string(),
        v.get("point_hash")?.as_str()?.to_string(),
    ))
}

enum TrainOutcomeKind {
    Trained,
    Skipped,
    Diverged,
}

fn train_point(
    cfg: &ExperimentConfig,
    arch: &ArchSpec,
    train_ds: &Dataset,
    point: &GridPoint,
) -> Result<TrainOutcomeKind> {
    let dir = points_dir(cfg).join(point.id());
    let fingerprint = cfg.point_fingerprint(point);
    if let Some((status, hash)) = read_point_manifest(&dir.join("point.json")) {
        if hash == fingerprint {
            match status.as_str() {
                "trained" if dir.join("model").join("manifest.json").exists() => {
                    println!("[skip] {} (up to date)", point.id());
                    return Ok(TrainOutcomeKind::Skipped);
                }
                "diverged" => {
                    println!("[skip] {} (diverged on a previous run)", point.id());
                    return Ok(TrainOutcomeKind::Diverged);
                }
                _ => {}
            }
        }
    }
    println!("[train] {}", point.id());
    let tc = train_config(cfg, point);
    let built: Result<(Ensemble, Vec<TrainRecord>)> = match point.method {
        EnsembleMethod::Single => train(init_params(arch, tc.seed)?, train_ds, &tc)
            .map(|o| (Ensemble::single(o.model), vec![o.record])),
        EnsembleMethod::Bagging => {
            build_bagging_with_records(arch, train_ds, &tc, point.learners, tc.seed)
        }
        EnsembleMethod::Snapshot => {
            build_snapshot_with_records(arch, train_ds, &tc, point.learners, tc.seed)
        }
        EnsembleMethod::SoftVote => {
            build_softvote_with_records(arch, train_ds, &tc, point.learners, tc.seed)
        }
    };
    let manifest_base = |status: &str| {
        json!({
            "id": point.id(),
            "status": status,
            "config_hash": cfg.hash(),
            "master_seed": cfg.master_seed,
            "point_hash": fingerprint,
            "train_seed": tc.seed,
            "method": point.method.tag(),
            "learners": point.learners,
            "lambda": point.lambda,
        })
    };
    match built {
        Ok((ens, records)) => {
            fs::create_dir_all(&dir)?;
            // A fingerprint change invalidates downstream attack artifacts.
            let _ = fs::remove_dir_all(dir.join("uap"));
            let tmp_model = dir.join(".tmp-model");
            if tmp_model.exists() {
                fs::remove_dir_all(&tmp_model)?;
            }
            ens.save(&tmp_model)?;
            let model_dir = dir.join("model");
            if model_dir.exists() {
                fs::remove_dir_all(&model_dir)?;
            }
            fs::rename(&tmp_model, &model_dir)?;
            for (i, record) in records.iter().enumerate() {
                let csv = format!("{}{}", cfg.stamp(), record.to_csv());
                atomic_write(
                    &dir.join("records").join(format!("member_{i}.csv")),
                    csv.as_bytes(),
                )?;
            }
            let mut manifest = manifest_base("trained");
            let extra = manifest.as_object_mut().expect("object literal");
            extra.insert(
                "param_count".into(),
                json!(ens
                    .members()
                    .iter()
                    .map(|m| m.param_count())
                    .sum::<usize>()),
            );
            extra.insert("members".into(), json!(ens.len()));
            extra.insert("records".into(), json!(records.len()));
            atomic_write(
                &dir.join("point.json"),
                format!("{}\n", serde_json::to_string_pretty(&manifest).expect("json")).as_bytes(),
            )?;
            Ok(TrainOutcomeKind::Trained)
        }
        Err(e @ Error::Divergence { .. }) => {
            println!("[diverged] {}: {e}", point.id());
            fs::create_dir_all(&dir)?;
            let _ = fs::remove_dir_all(dir.join("uap"));
            let _ = fs::remove_dir_all(dir.join("model"));
            let mut manifest = manifest_base("diverged");
            let extra = manifest.as_object_mut().expect("object literal");
            extra.insert("error".into(), json!(e.to_string()));
            atomic_write(
                &dir.join("point.json"),
                format!("{}\n", serde_json::to_string_pretty(&manifest).expect("json")).as_bytes(),
            )?;
            Ok(TrainOutcomeKind::Diverged)
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<i32> {
    let started = Instant::now();
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let arch = arch_for(cfg, &train_ds)?;
    fs::create_dir_all(&cfg.out_dir)?;
    atomic_write(
        &cfg.out_dir.join("config.resolved.txt"),
        format!("{}{}", cfg.stamp(), cfg.canonical()).as_bytes(),
    )?;
    let points = grid_points(cfg);
    println!(
        "[plan] {} grid points, {} train / {} test examples, arch {}",
        points.len(),
        train_ds.len(),
        test_ds.len(),
        arch.tag()
    );
    let results: Vec<(String, Result<TrainOutcomeKind>)> = points
        .par_iter()
        .map(|p| (p.id(), train_point(cfg, &arch, &train_ds, p)))
        .collect();
    let (mut trained, mut skipped, mut diverged) = (0usize, 0usize, 0usize);
    let mut statuses = Vec::new();
    for (id, r) in results {
        let kind = r?;
        let tag = match kind {
            TrainOutcomeKind::Trained => {
                trained += 1;
                "trained"
            }
            TrainOutcomeKind::Skipped => {
                skipped += 1;
                "trained"
            }
            TrainOutcomeKind::Diverged => {
                diverged += 1;
                "diverged"
            }
        };
        statuses.push(json!({ "id": id, "status": tag }));
    }
    let manifest = json!({
        "config_hash": cfg.hash(),
        "master_seed": cfg.master_seed,
        "config": "config.resolved.txt",
        "points": statuses,
        "trained": trained,
        "skipped": skipped,
        "diverged": diverged,
    });
    atomic_write(
        &cfg.out_dir.join("manifest.json"),
        format!("{}\n", serde_json::to_string_pretty(&manifest).expect("json")).as_bytes(),
    )?;
    println!(
        "summary: trained {trained}, skipped {skipped}, diverged {diverged} ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
    Ok(if diverged > 0 { 3 } else { 0 })
}

/// Require a grid point that finished training; `None` marks a recorded
/// divergence (skippable downstream), any other state is an error.
fn require_trained(cfg: &ExperimentConfig, point: &GridPoint) -> Result<Option<PathBuf>> {
    let dir = points_dir(cfg).join(point.id());
    let manifest = dir.join("point.json");
    let Some((status, hash)) = read_point_manifest(&manifest) else {
        return Err(Error::format(
            manifest.display().to_string(),
            "grid point has no training manifest; run `jens train` first",
        ));
    };
    if hash != cfg.point_fingerprint(point) {
        return Err(Error::format(
            manifest.display().to_string(),
            "artifacts are stale (config changed since training); run `jens train`",
        ));
    }
    match status.as_str() {
        "trained" => Ok(Some(dir)),
        "diverged" => Ok(None),
        other => Err(Error::format(
            manifest.display().to_string(),
            format!("unexpected status {other:?}"),
        )),
    }
}

fn attack_fingerprint(cfg: &ExperimentConfig, point: &GridPoint, eps: f64) -> String {
    hash_text(&format!(
        "{}\n[attack]\neps = {eps}\niterations = {}\nbatch_size = {}\nseeds = {}\n",
        cfg.point_fingerprint(point),
        cfg.attack_iterations,
        cfg.attack_batch,
        cfg.attack_seeds
    ))
}

enum AttackOutcomeKind {
    Attacked(usize),
    SkippedUpToDate(usize),
    NoModel,
}

fn attack_point(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    point: &GridPoint,
) -> Result<AttackOutcomeKind> {
    let Some(dir) = require_trained(cfg, point)? else {
        println!("[skip] {} (diverged in training)", point.id());
        return Ok(AttackOutcomeKind::NoModel);
    };
    let ens = Ensemble::load(&dir.join("model"))?;
    let mut fresh = 0usize;
    let mut reused = 0usize;
    for &eps in &cfg.epsilons {
        let file = pert_path(&dir, eps);
        let sidecar = file.with_extension("json");
        let fingerprint = attack_fingerprint(cfg, point, eps);
        let up_to_date = fs::read_to_string(&sidecar)
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok())
            .and_then(|v| Some(v.get("attack_hash")?.as_str()? == fingerprint))
            .unwrap_or(false)
            && load_perturbation(&file).is_ok();
        if up_to_date {
            println!("[skip] {} eps {eps} (up to date)", point.id());
            reused += 1;
            continue;
        }
        let mut ucfg = UapConfig::new(eps)?;
        ucfg.iterations = cfg.attack_iterations;
        ucfg.batch_size = cfg.attack_batch;
        ucfg.seeds = cfg.attack_seeds;
        ucfg.validate()?;
        let p = worst_case_uap(&ens, train_ds, test_ds, &ucfg)?;
        let tmp = file.with_extension("pert.tmp");
        fs::create_dir_all(file.parent().expect("uap dir"))?;
        save_perturbation(&p, &tmp)?;
        fs::rename(&tmp, &file)?;
        let (rows, cols) = test_ds.img_shape();
        if rows > 1 {
            save_png(&p, rows, cols, &file.with_extension("png"))?;
        }
        let meta = json!({
            "config_hash": cfg.hash(),
            "master_seed": cfg.master_seed,
            "attack_hash": fingerprint,
            "epsilon": eps,
            "restart_seed": p.seed,
            "success_rate": p.success_rate,
            "linf": p.linf(),
            "file": file.file_name().expect("file name").to_string_lossy(),
        });
        atomic_write(
            &sidecar,
            format!("{}\n", serde_json::to_string_pretty(&meta).expect("json")).as_bytes(),
        )?;
        println!(
            "[attack] {} eps {eps}: success {:.1}% (restart seed {})",
            point.id(),
            100.0 * p.success_rate,
            p.seed
        );
        fresh += 1;
    }
    if fresh == 0 {
        Ok(AttackOutcomeKind::SkippedUpToDate(reused))
    } else {
        Ok(AttackOutcomeKind::Attacked(fresh))
    }
}

pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<i32> {
    let started = Instant::now();
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let points = grid_points(cfg);
    let results: Vec<Result<AttackOutcomeKind>> = points
        .par_iter()
        .map(|p| attack_point(cfg, &train_ds, &test_ds, p))
        .collect();
    let (mut crafted, mut reused, mut skipped_points) = (0usize, 0usize, 0usize);
    for r in results {
        match r? {
            AttackOutcomeKind::Attacked(n) => crafted += n,
            AttackOutcomeKind::SkippedUpToDate(n) => reused += n,
            AttackOutcomeKind::NoModel => skipped_points += 1,
        }
    }
    println!(
        "summary: crafted {crafted} perturbations, reused {reused}, {skipped_points} points without a model ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
    Ok(0)
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<i32> {
    let started = Instant::now();
    let (_train_ds, test_ds) = load_datasets(cfg)?;
    let points = grid_points(cfg);
    let results: Vec<Result<Option<RobustnessReport>>> = points
        .par_iter()
        .map(|point| -> Result<Option<RobustnessReport>> {
            let Some(dir) = require_trained(cfg, point)? else {
                return Ok(None);
            };
            let ens = Ensemble::load(&dir.join("model"))?;
            let clean = clean_accuracy(&ens, &test_ds)?;
            let mut uap = BTreeMap::new();
            for &eps in &cfg.epsilons {
                let file = pert_path(&dir, eps);
                if !file.exists() {
                    return Err(Error::format(
                        file.display().to_string(),
                        "missing perturbation; run `jens attack` first",
                    ));
                }
                let p = load_perturbation(&file)?;
                let rate = attack_success_rate(&ens, &test_ds, &p.delta)?;
                uap.insert(eps_key(eps), 100.0 * (1.0 - rate));
            }
            let report = RobustnessReport::new(
                point.method.tag(),
                point.learners,
                point.lambda,
                clean,
                uap,
                cfg.weight,
            )?;
            Ok(Some(report))
        })
        .collect();
    let mut reports = Vec::new();
    let mut no_model = 0usize;
    for r in results {
        match r? {
            Some(report) => reports.push(report),
            None => no_model += 1,
        }
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument(
            "no grid point produced a model; nothing to evaluate".into(),
        ));
    }
    let csv = format!("{}{}", cfg.stamp(), emit_report_csv(&reports));
    atomic_write(&report_dir(cfg).join("report.csv"), csv.as_bytes())?;
    let text = render_report(cfg, &reports)?;
    print!("{text}");
    if no_model > 0 {
        println!("note: {no_model} grid points had no model (training divergence)");
    }
    println!(
        "report written to {} ({:.1}s)",
        report_dir(cfg).display(),
        started.elapsed().as_secs_f64()
    );
    Ok(0)
}

/// Top-k table, best-of-category rows, and the trade-off scatter; shared by
/// `eval` (fresh scores) and `report` (re-rendered from report.csv).
fn render_report(cfg: &ExperimentConfig, reports: &[RobustnessReport]) -> Result<String> {
    let mut sorted: Vec<&RobustnessReport> = reports.iter().collect();
    sorted.sort_by(|a, b| b.weighted.total_cmp(&a.weighted));
    let k = cfg.top_k.min(sorted.len());
    let top: Vec<RobustnessReport> = sorted.iter().take(k).map(|r| (*r).clone()).collect();
    let mut text = format!("top {k} of {} grid points by weighted accuracy\n", sorted.len());
    text.push_str(&emit_report_table(&top));
    text.push_str("\nbest of category\n");
    for (name, idx) in best_of_categories(reports) {
        let r = &reports[idx];
        text.push_str(&format!(
            "  {:<13} {} M={} lambda={} clean={} meanUAP={} weighted={}\n",
            name,
            r.method,
            r.learners,
            r.lambda_jr,
            fmt1(r.clean),
            fmt1(r.mean_uap),
            fmt1(r.weighted),
        ));
    }
    atomic_write(
        &report_dir(cfg).join("report.txt"),
        format!("{}{}", cfg.stamp(), text).as_bytes(),
    )?;
    let svg = format!(
        "<!-- jens config_hash={} master_seed={} -->\n{}",
        cfg.hash(),
        cfg.master_seed,
        tradeoff_svg(reports)
    );
    atomic_write(&report_dir(cfg).join("tradeoff.svg"), svg.as_bytes())?;
    Ok(text)
}

const REPORT_HEADER: &str =
    "method,learners,lambda_jr,clean,uap_010,uap_015,uap_020,uap_025,mean_uap,weighted,w";

/// Read back our own report.csv. Stored floats round-trip exactly, so the
/// rebuilt rows render the identical table and plot.
fn parse_report_csv(path: &Path, text: &str) -> Result<Vec<RobustnessReport>> {
    let name = path.display().to_string();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        _ => return Err(Error::format(&name, "missing report header")),
    }
    let mut reports = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(Error::format(
                &name,
                format!("expected 11 columns, found {}", cols.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(&name, format!("bad number {s:?}")))
        };
        let mut uap = BTreeMap::new();
        for (i, key) in [(4usize, 10u32), (5, 15), (6, 20), (7, 25)] {
            if !cols[i].is_empty() {
                uap.insert(key, num(cols[i])?);
            }
        }
        if uap.is_empty() {
            return Err(Error::format(&name, "row has no robustness entries"));
        }
        let report = RobustnessReport {
            method: cols[0].to_string(),
            learners: cols[1]
                .parse()
                .map_err(|_| Error::format(&name, format!("bad learners {:?}", cols[1])))?,
            lambda_jr: num(cols[2])?,
            clean: num(cols[3])?,
            uap,
            mean_uap: num(cols[8])?,
            weighted: num(cols[9])?,
            w: num(cols[10])?,
        };
        report.validate()?;
        reports.push(report);
    }
    if reports.is_empty() {
        return Err(Error::format(&name, "no rows"));
    }
    Ok(reports)
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<i32> {
    let path = report_dir(cfg).join("report.csv");
    let text = fs::read_to_string(&path)?;
    let reports = parse_report_csv(&path, &text)?;
    let rendered = render_report(cfg, &reports)?;
    print!("{rendered}");
    Ok(0)
}

pub struct TheoryParams {
    pub members: usize,
    pub classes: usize,
    pub dim: usize,
    pub mu: f64,
    pub sigma: f64,
    pub samples: usize,
    pub seed: u64,
    pub trials: usize,
    pub out: PathBuf,
    pub tamper_lower: bool,
}

/// Exponential-spacings draw from the probability simplex; redraws the rare
/// exact zero so every weight is strictly positive.
fn random_simplex<R: Rng>(m: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..m)
        .map(|_| loop {
            let e = -(1.0 - rng.random::<f64>()).ln();
            if e > 0.0 {
                break e;
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

pub fn cmd_verify_theory(p: &TheoryParams) -> Result<i32> {
    let canonical = format!(
        "[theory]\nmembers = {}\nclasses = {}\ndim = {}\nmu = {}\nsigma = {}\nsamples = {}\nseed = {}\ntrials = {}\n",
        p.members, p.classes, p.dim, p.mu, p.sigma, p.samples, p.seed, p.trials
    );
    let stamp = format!(
        "# jens config_hash={} master_seed={}\n",
        hash_text(&canonical),
        p.seed
    );
    if p.trials == 0 {
        return Err(Error::InvalidArgument("--trials must be positive".into()));
    }
    fs::create_dir_all(&p.out)?;
    let mut all_pass = true;

    println!("weight sum-of-squares: {} simplex draws per member count", p.trials);
    let mut wcsv = String::from("members,trials,min_sum_sq,max_sum_sq,floor,pass\n");
    for (i, &m) in [2usize, 4, 8, 16].iter().enumerate() {
        let mut rng = rng::seeded_stream(p.seed, 7_000 + i as u64);
        let floor = 1.0 / m as f64;
        let mut min_s = f64::INFINITY;
        let mut max_s = f64::NEG_INFINITY;
        let mut ok = true;
        for _ in 0..p.trials {
            let s = sum_sq_weights(&random_simplex(m, &mut rng))?;
            min_s = min_s.min(s);
            max_s = max_s.max(s);
            ok &= s >= floor && s < 1.0;
        }
        all_pass &= ok;
        println!(
            "  [{}] M={m}: sum c^2 in [{min_s:.6}, {max_s:.6}], floor {floor:.6}",
            if ok { "ok" } else { "FAIL" }
        );
        wcsv.push_str(&format!("{m},{},{min_s},{max_s},{floor},{ok}\n", p.trials));
    }
    atomic_write(
        &p.out.join("weights_property.csv"),
        format!("{stamp}{wcsv}").as_bytes(),
    )?;

    let mc = McConfig {
        members: p.members,
        classes: p.classes,
        dim: p.dim,
        mu: p.mu,
        sigma: p.sigma,
        weights: None,
        samples: p.samples,
        seed: p.seed,
    };
    let mut bounds = analytic_bounds(&mc)?;
    let sim = simulate_bounds(&mc)?;
    if p.tamper_lower {
        bounds.e_lower *= 1.1;
        eprintln!("negative control: uniform floor inflated by 10%, the bounds check must fail");
    }
    let check = check_bounds(&sim, &bounds, p.members);
    println!(
        "analytic bounds vs {} samples ({}):",
        sim.samples, sim.normal_method
    );
    for line in &check.lines {
        println!(
            "  [{}] {}: observed {:.6} vs {:.6} (band {:.6})",
            if line.pass { "ok" } else { "FAIL" },
            line.name,
            line.observed,
            line.reference,
            line.band
        );
    }
    all_pass &= check.pass;
    let mc_stamp = format!(
        "# jens config_hash={} master_seed={} normal_method={} samples={}\n",
        hash_text(&canonical),
        p.seed,
        sim.normal_method,
        sim.samples
    );
    atomic_write(
        &p.out.join("bounds_check.csv"),
        format!("{mc_stamp}{}", bounds_check_csv(&check)).as_bytes(),
    )?;

    let mono = monotonicity_sweep(&mc, &[1, 3, 6, 9])?;
    println!("uniform-weight monotonicity across member counts:");
    for row in &mono.rows {
        println!(
            "  [{}] M={}: analytic {:.6}, observed {:.6} (4 SE band)",
            if row.within_band { "ok" } else { "FAIL" },
            row.members,
            row.e_exact,
            row.observed_mean
        );
    }
    all_pass &= mono.pass;
    atomic_write(
        &p.out.join("mono_sweep.csv"),
        format!("{stamp}{}", mono.to_csv()).as_bytes(),
    )?;

    println!("verify-theory: {}", if all_pass { "PASS" } else { "FAIL" });
    Ok(if all_pass { 0 } else { 4 })
}
