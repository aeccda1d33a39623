//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers, CLI overrides applied on top, a canonical rendering, and a
//! content hash that stamps every output and keys resumable sweeps.
//!
//! The hash deliberately excludes the output directory (and anything else
//! that cannot change a result, like worker count), so the same experiment
//! run in two places produces byte-identical reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use jens_core::ensemble::EnsembleMethod;
use jens_core::{Error, Result};
use sha2::{Digest, Sha256};

/// Budgets the report schema can represent, in percent of pixel range.
pub const STANDARD_EPSILONS: [f64; 4] = [0.10, 0.15, 0.20, 0.25];

pub const FULL_LAMBDA_GRID: [f64; 8] = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0];

pub const FULL_LEARNER_GRID: [usize; 4] = [1, 3, 6, 9];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetChoice {
    Mnist,
    FashionMnist,
    Synthetic,
}

impl DatasetChoice {
    pub fn tag(&self) -> &'static str {
        match self {
            DatasetChoice::Mnist => "mnist",
            DatasetChoice::FashionMnist => "fashion_mnist",
            DatasetChoice::Synthetic => "synthetic",
        }
    }

    pub fn from_tag(tag: &str) -> Result<DatasetChoice> {
        match tag {
            "mnist" => Ok(DatasetChoice::Mnist),
            "fashion_mnist" => Ok(DatasetChoice::FashionMnist),
            "synthetic" => Ok(DatasetChoice::Synthetic),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset {other:?} (expected mnist, fashion_mnist, or synthetic)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchChoice {
    Mlp,
    Lenet,
}

impl ArchChoice {
    pub fn tag(&self) -> &'static str {
        match self {
            ArchChoice::Mlp => "mlp",
            ArchChoice::Lenet => "lenet",
        }
    }

    pub fn from_tag(tag: &str) -> Result<ArchChoice> {
        match tag {
            "mlp" => Ok(ArchChoice::Mlp),
            "lenet" => Ok(ArchChoice::Lenet),
            other => Err(Error::InvalidArgument(format!(
                "unknown arch {other:?} (expected mlp or lenet)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JacobianChoice {
    Exact,
    Projection,
}

/// Everything a sweep needs, resolved to concrete values. Field groups
/// mirror the config file sections.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    // [experiment]
    pub dataset: DatasetChoice,
    pub arch: ArchChoice,
    /// MLP hidden widths; ignored for lenet.
    pub hidden: Vec<usize>,
    /// Excluded from the config hash: storage location is not experiment
    /// identity.
    pub out_dir: PathBuf,
    pub master_seed: u64,
    /// Cap on loaded train/test examples; 0 keeps the full set.
    pub train_limit: usize,
    pub test_limit: usize,
    // [synthetic]
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_signal_dims: usize,
    pub synth_total_dims: usize,
    pub synth_classes: usize,
    // [grid]
    pub methods: Vec<EnsembleMethod>,
    pub learners: Vec<usize>,
    pub lambda_grid: Vec<f64>,
    // [train]
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub momentum: f64,
    /// Restart learning rate for snapshot cycles; 0 inherits `lr`.
    pub snapshot_lr: f64,
    pub jacobian: JacobianChoice,
    pub projections: usize,
    // [attack]
    pub epsilons: Vec<f64>,
    pub attack_iterations: usize,
    pub attack_batch: usize,
    pub attack_seeds: usize,
    // [eval]
    pub weight: f64,
    pub top_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetChoice::Synthetic,
            arch: ArchChoice::Mlp,
            hidden: vec![256, 128],
            out_dir: PathBuf::from("runs"),
            master_seed: 0,
            train_limit: 0,
            test_limit: 0,
            synth_train: 600,
            synth_test: 1200,
            synth_signal_dims: 4,
            synth_total_dims: 32,
            synth_classes: 6,
            methods: vec![
                EnsembleMethod::Single,
                EnsembleMethod::Bagging,
                EnsembleMethod::Snapshot,
                EnsembleMethod::SoftVote,
            ],
            learners: FULL_LEARNER_GRID.to_vec(),
            lambda_grid: FULL_LAMBDA_GRID.to_vec(),
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerChoice::Adam,
            lr: 1e-3,
            momentum: 0.9,
            snapshot_lr: 0.0,
            jacobian: JacobianChoice::Exact,
            projections: 1,
            epsilons: vec![0.10, 0.15, 0.20, 0.25],
            attack_iterations: 100,
            attack_batch: 200,
            attack_seeds: 5,
            weight: 0.5,
            top_k: 3,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
}

impl ExperimentConfig {
    /// Set one value by dotted key, e.g. `train.epochs`. Shared by the file
    /// parser (section + key) and `--set` flags.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "experiment.dataset" => self.dataset = DatasetChoice::from_tag(value)?,
            "experiment.arch" => self.arch = ArchChoice::from_tag(value)?,
            "experiment.hidden" => {
                self.hidden = split_list(value)
                    .map(|v| parse_num(key, v))
                    .collect::<Result<_>>()?
            }
            "experiment.out" => self.out_dir = PathBuf::from(value),
            "experiment.seed" => self.master_seed = parse_num(key, value)?,
            "experiment.train_limit" => self.train_limit = parse_num(key, value)?,
            "experiment.test_limit" => self.test_limit = parse_num(key, value)?,
            "synthetic.train" => self.synth_train = parse_num(key, value)?,
            "synthetic.test" => self.synth_test = parse_num(key, value)?,
            "synthetic.signal_dims" => self.synth_signal_dims = parse_num(key, value)?,
            "synthetic.total_dims" => self.synth_total_dims = parse_num(key, value)?,
            "synthetic.classes" => self.synth_classes = parse_num(key, value)?,
            "grid.methods" => {
                self.methods = split_list(value)
                    .map(EnsembleMethod::from_tag)
                    .collect::<Result<_>>()?
            }
            "grid.learners" => {
                self.learners = split_list(value)
                    .map(|v| parse_num(key, v))
                    .collect::<Result<_>>()?
            }
            "grid.lambdas" => {
                self.lambda_grid = split_list(value)
                    .map(|v| parse_num(key, v))
                    .collect::<Result<_>>()?
            }
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerChoice::Adam,
                    "sgd" => OptimizerChoice::Sgd,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "{key}: unknown optimizer {other:?} (expected adam or sgd)"
                        )))
                    }
                }
            }
            "train.lr" => self.lr = parse_num(key, value)?,
            "train.momentum" => self.momentum = parse_num(key, value)?,
            "train.snapshot_lr" => self.snapshot_lr = parse_num(key, value)?,
            "train.jacobian" => {
                self.jacobian = match value {
                    "exact" => JacobianChoice::Exact,
                    "projection" => JacobianChoice::Projection,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "{key}: unknown jacobian mode {other:?} (expected exact or projection)"
                        )))
                    }
                }
            }
            "train.projections" => self.projections = parse_num(key, value)?,
            "attack.epsilons" => {
                self.epsilons = split_list(value)
                    .map(|v| parse_num(key, v))
                    .collect::<Result<_>>()?
            }
            "attack.iterations" => self.attack_iterations = parse_num(key, value)?,
            "attack.batch_size" => self.attack_batch = parse_num(key, value)?,
            "attack.seeds" => self.attack_seeds = parse_num(key, value)?,
            "eval.weight" => self.weight = parse_num(key, value)?,
            "eval.top_k" => self.top_k = parse_num(key, value)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Restore the full-scale protocol: LeNet, 50 attack seeds, the complete
    /// learner/lambda/budget grids, 100-iteration batch-200 attacks. The
    /// synthetic placeholder dataset switches to MNIST; an explicit
    /// mnist/fashion_mnist choice is kept.
    pub fn apply_paper_scale(&mut self) {
        if self.dataset == DatasetChoice::Synthetic {
            self.dataset = DatasetChoice::Mnist;
        }
        self.arch = ArchChoice::Lenet;
        self.methods = vec![
            EnsembleMethod::Single,
            EnsembleMethod::Bagging,
            EnsembleMethod::Snapshot,
            EnsembleMethod::SoftVote,
        ];
        self.learners = FULL_LEARNER_GRID.to_vec();
        self.lambda_grid = FULL_LAMBDA_GRID.to_vec();
        self.epsilons = STANDARD_EPSILONS.to_vec();
        self.attack_iterations = 100;
        self.attack_batch = 200;
        self.attack_seeds = 50;
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = [
            (!self.methods.is_empty(), "grid.methods"),
            (!self.learners.is_empty(), "grid.learners"),
            (!self.lambda_grid.is_empty(), "grid.lambdas"),
            (!self.epsilons.is_empty(), "attack.epsilons"),
        ];
        for (ok, what) in nonempty {
            if !ok {
                return Err(Error::InvalidArgument(format!("{what} must be nonempty")));
            }
        }
        if self.learners.iter().any(|&m| m == 0) {
            return Err(Error::InvalidArgument(
                "grid.learners entries must be positive".into(),
            ));
        }
        if self
            .lambda_grid
            .iter()
            .any(|&l| !l.is_finite() || l < 0.0)
        {
            return Err(Error::InvalidArgument(
                "grid.lambdas entries must be finite and nonnegative".into(),
            ));
        }
        for &eps in &self.epsilons {
            if !STANDARD_EPSILONS.iter().any(|&s| (eps - s).abs() < 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "attack.epsilons entry {eps} is not one of the report budgets 0.10 0.15 0.20 0.25"
                )));
            }
        }
        if self.epochs == 0
            || self.batch_size == 0
            || self.attack_iterations == 0
            || self.attack_batch == 0
            || self.attack_seeds == 0
            || self.projections == 0
            || self.top_k == 0
        {
            return Err(Error::InvalidArgument(
                "epochs, batch sizes, iterations, seeds, projections, and top_k must be positive"
                    .into(),
            ));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "train.lr {} must be positive",
                self.lr
            )));
        }
        if !self.snapshot_lr.is_finite() || self.snapshot_lr < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "train.snapshot_lr {} must be nonnegative (0 inherits train.lr)",
                self.snapshot_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(Error::InvalidArgument(format!(
                "eval.weight {} outside [0, 1]",
                self.weight
            )));
        }
        if self.arch == ArchChoice::Mlp && self.hidden.is_empty() {
            return Err(Error::InvalidArgument(
                "experiment.hidden must list at least one width for the mlp arch".into(),
            ));
        }
        if self.arch == ArchChoice::Lenet && self.dataset == DatasetChoice::Synthetic {
            return Err(Error::InvalidArgument(
                "lenet expects 28x28 inputs; the synthetic dataset is flat (use arch = mlp)".into(),
            ));
        }
        if self.dataset == DatasetChoice::Synthetic {
            if self.synth_signal_dims == 0 || self.synth_signal_dims > self.synth_total_dims {
                return Err(Error::InvalidArgument(format!(
                    "synthetic.signal_dims {} must lie in 1..=total_dims ({})",
                    self.synth_signal_dims, self.synth_total_dims
                )));
            }
            if self.synth_train == 0 || self.synth_test == 0 {
                return Err(Error::InvalidArgument(
                    "synthetic.train and synthetic.test must be positive".into(),
                ));
            }
            if self.synth_classes < 2 {
                return Err(Error::InvalidArgument(
                    "synthetic.classes must be at least 2".into(),
                ));
            }
        }
        Ok(())
    }

    /// Fixed-order rendering; hashing and the resolved-config artifact both
    /// use it. Parsing it back yields an equal config (modulo `out`, which
    /// is storage, not experiment identity, and is rendered last).
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let lines: &mut String = &mut s;
        let list_u = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let list_f = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(lines, "[experiment]");
        let _ = writeln!(lines, "dataset = {}", self.dataset.tag());
        let _ = writeln!(lines, "arch = {}", self.arch.tag());
        let _ = writeln!(lines, "hidden = {}", list_u(&self.hidden));
        let _ = writeln!(lines, "seed = {}", self.master_seed);
        let _ = writeln!(lines, "train_limit = {}", self.train_limit);
        let _ = writeln!(lines, "test_limit = {}", self.test_limit);
        let _ = writeln!(lines, "[synthetic]");
        let _ = writeln!(lines, "train = {}", self.synth_train);
        let _ = writeln!(lines, "test = {}", self.synth_test);
        let _ = writeln!(lines, "signal_dims = {}", self.synth_signal_dims);
        let _ = writeln!(lines, "total_dims = {}", self.synth_total_dims);
        let _ = writeln!(lines, "classes = {}", self.synth_classes);
        let _ = writeln!(lines, "[grid]");
        let _ = writeln!(
            lines,
            "methods = {}",
            self.methods
                .iter()
                .map(|m| m.tag())
                .collect::<Vec<_>>()
                .join(" ")
        );
        let _ = writeln!(lines, "learners = {}", list_u(&self.learners));
        let _ = writeln!(lines, "lambdas = {}", list_f(&self.lambda_grid));
        let _ = writeln!(lines, "[train]");
        let _ = writeln!(lines, "epochs = {}", self.epochs);
        let _ = writeln!(lines, "batch_size = {}", self.batch_size);
        let _ = writeln!(
            lines,
            "optimizer = {}",
            match self.optimizer {
                OptimizerChoice::Adam => "adam",
                OptimizerChoice::Sgd => "sgd",
            }
        );
        let _ = writeln!(lines, "lr = {}", self.lr);
        let _ = writeln!(lines, "momentum = {}", self.momentum);
        let _ = writeln!(lines, "snapshot_lr = {}", self.snapshot_lr);
        let _ = writeln!(
            lines,
            "jacobian = {}",
            match self.jacobian {
                JacobianChoice::Exact => "exact",
                JacobianChoice::Projection => "projection",
            }
        );
        let _ = writeln!(lines, "projections = {}", self.projections);
        let _ = writeln!(lines, "[attack]");
        let _ = writeln!(lines, "epsilons = {}", list_f(&self.epsilons));
        let _ = writeln!(lines, "iterations = {}", self.attack_iterations);
        let _ = writeln!(lines, "batch_size = {}", self.attack_batch);
        let _ = writeln!(lines, "seeds = {}", self.attack_seeds);
        let _ = writeln!(lines, "[eval]");
        let _ = writeln!(lines, "weight = {}", self.weight);
        let _ = writeln!(lines, "top_k = {}", self.top_k);
        s
    }

    /// Sixteen hex chars of SHA-256 over [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        hash_text(&self.canonical())
    }

    /// Comment line prepended to every emitted text file.
    pub fn stamp(&self) -> String {
        format!(
            "# jens config_hash={} master_seed={}\n",
            self.hash(),
            self.master_seed
        )
    }

    /// The slice of the config a single grid point's artifacts depend on.
    /// Grid-shape edits leave untouched points' keys unchanged, so a rerun
    /// retrains only what the edit affected.
    pub fn point_fingerprint(&self, point: &GridPoint) -> String {
        let mut s = self.canonical();
        let grid_at = s.find("[grid]").expect("canonical always has [grid]");
        let train_at = s.find("[train]").expect("canonical always has [train]");
        s.replace_range(grid_at..train_at, "");
        let _ = writeln!(
            s,
            "[point]\nmethod = {}\nlearners = {}\nlambda = {}\nseed = {}",
            point.method.tag(),
            point.learners,
            point.lambda,
            point.train_seed(self.master_seed)
        );
        hash_text(&s)
    }
}

pub fn hash_text(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Stable u64 derived from the master seed and a role tag; every stage
/// seeds its randomness this way so runs replay exactly.
pub fn derive_seed(master_seed: u64, role: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(role.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One cell of the (method, learners, lambda) sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub method: EnsembleMethod,
    pub learners: usize,
    pub lambda: f64,
}

impl GridPoint {
    /// Directory-safe identity, e.g. `snapshot-m3-lam0.1`.
    pub fn id(&self) -> String {
        format!("{}-m{}-lam{}", self.method.tag(), self.learners, self.lambda)
    }

    pub fn train_seed(&self, master_seed: u64) -> u64 {
        derive_seed(master_seed, &format!("train/{}", self.id()))
    }
}

/// Expand the configured grid. Single models run only at M=1; ensemble
/// methods take the learner counts above 1, so a grid listing 1 alongside
/// ensemble methods does not produce degenerate one-member ensembles.
pub fn grid_points(cfg: &ExperimentConfig) -> Vec<GridPoint> {
    let mut points = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for method in &cfg.methods {
        let ms: Vec<usize> = match method {
            EnsembleMethod::Single => vec![1],
            _ => cfg.learners.iter().copied().filter(|&m| m > 1).collect(),
        };
        for m in ms {
            for &lambda in &cfg.lambda_grid {
                let p = GridPoint {
                    method: method.clone(),
                    learners: m,
                    lambda,
                };
                if seen.insert(p.id()) {
                    points.push(p);
                }
            }
        }
    }
    points
}

/// Parse a config file against the built-in defaults.
pub fn parse_file(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_str(&text).map_err(|e| match e {
        Error::InvalidArgument(msg) => {
            Error::InvalidArgument(format!("{}: {msg}", path.display()))
        }
        other => other,
    })
}

const SECTIONS: [&str; 6] = ["experiment", "synthetic", "grid", "train", "attack", "eval"];

/// Flat key=value text with `[section]` headers; `#` starts a comment.
/// Unknown sections and keys are errors, not silent no-ops.
pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.split_once('#') {
            Some((before, _)) => before.trim(),
            None => raw.trim(),
        };
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("line {lineno}: unterminated section header"))
                })?
                .trim();
            section = Some(
                SECTIONS
                    .iter()
                    .find(|s| **s == name)
                    .copied()
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("line {lineno}: unknown section [{name}]"))
                    })?,
            );
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("line {lineno}: expected key = value, got {line:?}"))
        })?;
        let section = section.ok_or_else(|| {
            Error::InvalidArgument(format!("line {lineno}: key before any [section] header"))
        })?;
        cfg.apply(&format!("{section}.{}", key.trim()), value.trim())
            .map_err(|e| match e {
                Error::InvalidArgument(msg) => {
                    Error::InvalidArgument(format!("line {lineno}: {msg}"))
                }
                other => other,
            })?;
    }
    Ok(cfg)
}
