//! Core data types shared by every other module: hyper-parameter points,
//! fidelity settings, search spaces and the tabular evaluation dataset,
//! together with its CSV interchange format.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use thiserror::Error;

/// Exact CSV header of the dataset interchange format.
pub const CSV_HEADER: [&str; 16] = [
    "st_lr",
    "st_momentum",
    "st_batch",
    "at_lr",
    "at_momentum",
    "at_batch",
    "pgd_alpha",
    "rat_pct",
    "ae_pct",
    "epsilon",
    "epochs",
    "attack_iters",
    "std_error",
    "adv_error",
    "train_time_s",
    "seed",
];

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("candidate set for `{0}` is empty")]
    EmptyCandidates(&'static str),
    #[error("invalid candidate for `{dim}`: {reason}")]
    InvalidCandidate { dim: &'static str, reason: String },
    #[error("invalid hyper-parameter configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid fidelity: {0}")]
    InvalidFidelity(String),
    #[error("invalid record{}: {reason}", fmt_line(*.line))]
    InvalidRecord { line: Option<u64>, reason: String },
    #[error("unexpected CSV header `{found}`")]
    Header { found: String },
    #[error("line {line}, column `{column}`: cannot parse `{value}`")]
    Parse {
        line: u64,
        column: &'static str,
        value: String,
    },
    #[error("line {line}: wrong number of fields ({found}, expected 16)")]
    FieldCount { line: u64, found: usize },
    #[error("duplicate record key{}: {key}", fmt_line(*.line))]
    DuplicateKey { line: Option<u64>, key: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cannot parse epsilon `{0}` (expected a real or `k/255`)")]
    Epsilon(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_line(line: Option<u64>) -> String {
    match line {
        Some(l) => format!(" at line {l}"),
        None => String::new(),
    }
}

/// `f64` wrapper with a total order and bitwise hashing, used for keys.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TotalF64(pub f64);

impl PartialEq for TotalF64 {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}
impl Eq for TotalF64 {}
impl PartialOrd for TotalF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TotalF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}
impl Hash for TotalF64 {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.to_bits().hash(state);
    }
}

/// A point of the 9-dimensional hyper-parameter space.
///
/// The `at_*` fields, `pgd_alpha` and `ae_pct` only matter when `rat_pct > 0`;
/// the `st_*` fields only matter when `rat_pct < 100`.
#[derive(Debug, Clone, Copy)]
pub struct HpConfig {
    pub st_lr: f64,
    pub st_momentum: f64,
    pub st_batch: u32,
    pub at_lr: f64,
    pub at_momentum: f64,
    pub at_batch: u32,
    pub pgd_alpha: f64,
    pub rat_pct: u8,
    pub ae_pct: u8,
}

type ConfigKey = (
    TotalF64,
    TotalF64,
    u32,
    TotalF64,
    TotalF64,
    u32,
    TotalF64,
    u8,
    u8,
);

impl HpConfig {
    fn key(&self) -> ConfigKey {
        (
            TotalF64(self.st_lr),
            TotalF64(self.st_momentum),
            self.st_batch,
            TotalF64(self.at_lr),
            TotalF64(self.at_momentum),
            self.at_batch,
            TotalF64(self.pgd_alpha),
            self.rat_pct,
            self.ae_pct,
        )
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |msg: String| Err(DomainError::InvalidConfig(msg));
        for (name, v) in [
            ("st_lr", self.st_lr),
            ("at_lr", self.at_lr),
            ("pgd_alpha", self.pgd_alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be a positive real, got {v}"));
            }
        }
        for (name, v) in [
            ("st_momentum", self.st_momentum),
            ("at_momentum", self.at_momentum),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0,1), got {v}"));
            }
        }
        if self.st_batch == 0 || self.at_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.rat_pct > 100 || self.ae_pct > 100 {
            return bad("percentages must lie in [0,100]".into());
        }
        Ok(())
    }

    /// True when LR, momentum and batch size coincide across the two phases.
    pub fn is_tied(&self) -> bool {
        self.st_lr.to_bits() == self.at_lr.to_bits()
            && self.st_momentum.to_bits() == self.at_momentum.to_bits()
            && self.st_batch == self.at_batch
    }

    pub fn has_at_phase(&self) -> bool {
        self.rat_pct > 0
    }

    pub fn has_st_phase(&self) -> bool {
        self.rat_pct < 100
    }
}

impl PartialEq for HpConfig {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for HpConfig {}
impl PartialOrd for HpConfig {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HpConfig {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}
impl Hash for HpConfig {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

impl fmt::Display for HpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "st(lr={}, m={}, b={}) at(lr={}, m={}, b={}) alpha={} rat={}% ae={}%",
            self.st_lr,
            self.st_momentum,
            self.st_batch,
            self.at_lr,
            self.at_momentum,
            self.at_batch,
            self.pgd_alpha,
            self.rat_pct,
            self.ae_pct
        )
    }
}

/// Setting of the two fidelity dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FidelityPoint {
    pub epochs: u32,
    /// 1 is FGSM, k > 1 is PGD-k.
    pub attack_iters: u32,
}

impl FidelityPoint {
    pub fn new(epochs: u32, attack_iters: u32) -> Result<Self, DomainError> {
        if epochs == 0 || attack_iters == 0 {
            return Err(DomainError::InvalidFidelity(format!(
                "epochs={epochs}, attack_iters={attack_iters}; both must be >= 1"
            )));
        }
        Ok(Self {
            epochs,
            attack_iters,
        })
    }

    /// Budget fractions `(epochs / max.epochs, iters / max.attack_iters)`.
    pub fn normalized(&self, max: FidelityPoint) -> (f64, f64) {
        (
            f64::from(self.epochs) / f64::from(max.epochs),
            f64::from(self.attack_iters) / f64::from(max.attack_iters),
        )
    }
}

impl fmt::Display for FidelityPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ep/{}it", self.epochs, self.attack_iters)
    }
}

/// L-infinity attack parameters. Inputs live in `[0,1]`, so `epsilon` is absolute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub iters: u32,
    pub alpha: f64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<(), DomainError> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(DomainError::InvalidConfig(format!(
                "attack epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.iters == 0 {
            return Err(DomainError::InvalidConfig(
                "attack iters must be >= 1".into(),
            ));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(DomainError::InvalidConfig(format!(
                "attack alpha must be > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// One measured outcome of training a configuration at a fidelity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub config: HpConfig,
    pub fidelity: FidelityPoint,
    pub epsilon: f64,
    pub std_error: f64,
    pub adv_error: f64,
    pub train_time: f64,
    pub seed: u64,
}

impl EvalRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            config: self.config,
            fidelity: self.fidelity,
            epsilon: TotalF64(self.epsilon),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.config.validate().map_err(|e| e.to_string())?;
        if self.fidelity.epochs == 0 || self.fidelity.attack_iters == 0 {
            return Err("epochs and attack_iters must be >= 1".into());
        }
        if !(self.epsilon.is_finite() && (0.0..=1.0).contains(&self.epsilon)) {
            return Err(format!("epsilon {} outside [0,1]", self.epsilon));
        }
        for (name, v) in [("std_error", self.std_error), ("adv_error", self.adv_error)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} {v} outside [0,1]"));
            }
        }
        if !(self.train_time.is_finite() && self.train_time >= 0.0) {
            return Err(format!("train_time {} must be >= 0", self.train_time));
        }
        Ok(())
    }
}

/// Uniqueness key of a record: `(config, fidelity, epsilon, seed)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordKey {
    pub config: HpConfig,
    pub fidelity: FidelityPoint,
    epsilon: TotalF64,
    pub seed: u64,
}

impl RecordKey {
    pub fn new(config: HpConfig, fidelity: FidelityPoint, epsilon: f64, seed: u64) -> Self {
        Self {
            config,
            fidelity,
            epsilon: TotalF64(epsilon),
            seed,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.0
    }
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] @ {} eps={} seed={}",
            self.config, self.fidelity, self.epsilon.0, self.seed
        )
    }
}

/// Discrete candidate sets of every hyper-parameter and fidelity dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub st_lr: Vec<f64>,
    pub st_momentum: Vec<f64>,
    pub st_batch: Vec<u32>,
    pub at_lr: Vec<f64>,
    pub at_momentum: Vec<f64>,
    pub at_batch: Vec<u32>,
    pub pgd_alpha: Vec<f64>,
    pub rat_pct: Vec<u8>,
    pub ae_pct: Vec<u8>,
    pub epochs: Vec<u32>,
    pub attack_iters: Vec<u32>,
    pub epsilons: Vec<f64>,
    /// ST and AT share LR, momentum and batch size (the `at_*` sets are ignored).
    pub tie_phases: bool,
    /// Canonicalize inert dimensions at `rat_pct` 0 and 100 so each distinct
    /// training procedure is enumerated once.
    pub collapse_inert: bool,
}

impl SearchSpace {
    /// The hyper-parameter grid of the small-model benchmarks, with
    /// epoch/attack-iteration fidelities and the `{8, 12}/255` bounds.
    pub fn reference_grid() -> Self {
        Self {
            st_lr: vec![0.1, 0.01],
            st_momentum: vec![0.0, 0.9],
            st_batch: vec![128, 256],
            at_lr: vec![0.1, 0.01],
            at_momentum: vec![0.0, 0.9],
            at_batch: vec![128, 256],
            pgd_alpha: vec![1e-2, 1e-3],
            rat_pct: vec![0, 30, 50, 70, 100],
            ae_pct: vec![30, 50, 70, 100],
            epochs: vec![1, 2, 4, 8, 16],
            attack_iters: vec![1, 5, 10, 20],
            epsilons: vec![8.0 / 255.0, 12.0 / 255.0],
            tie_phases: false,
            collapse_inert: false,
        }
    }

    /// A desk-scale grid for toy sweeps: 256 mixed-phase configurations,
    /// one epoch level and four attack-iteration levels.
    pub fn toy_grid() -> Self {
        Self {
            st_lr: vec![0.3, 0.03],
            st_momentum: vec![0.0, 0.9],
            st_batch: vec![32],
            at_lr: vec![1.0, 0.3, 0.1, 0.03],
            at_momentum: vec![0.0, 0.9],
            at_batch: vec![32, 64],
            pgd_alpha: vec![0.01, 0.03],
            rat_pct: vec![30, 70],
            ae_pct: vec![50],
            epochs: vec![8],
            attack_iters: vec![1, 5, 10, 20],
            epsilons: vec![16.0 / 255.0],
            tie_phases: false,
            collapse_inert: false,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        fn check<T: Copy + PartialEq + fmt::Debug>(
            dim: &'static str,
            values: &[T],
            ok: impl Fn(T) -> bool,
        ) -> Result<(), DomainError> {
            if values.is_empty() {
                return Err(DomainError::EmptyCandidates(dim));
            }
            for (i, &v) in values.iter().enumerate() {
                if !ok(v) {
                    return Err(DomainError::InvalidCandidate {
                        dim,
                        reason: format!("value {v:?} out of range"),
                    });
                }
                if values[..i].contains(&v) {
                    return Err(DomainError::InvalidCandidate {
                        dim,
                        reason: format!("duplicate value {v:?}"),
                    });
                }
            }
            Ok(())
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let momentum = |v: f64| (0.0..1.0).contains(&v);
        check("st_lr", &self.st_lr, positive)?;
        check("st_momentum", &self.st_momentum, momentum)?;
        check("st_batch", &self.st_batch, |b| b >= 1)?;
        if !self.tie_phases {
            check("at_lr", &self.at_lr, positive)?;
            check("at_momentum", &self.at_momentum, momentum)?;
            check("at_batch", &self.at_batch, |b| b >= 1)?;
        }
        check("pgd_alpha", &self.pgd_alpha, positive)?;
        check("rat_pct", &self.rat_pct, |p| p <= 100)?;
        check("ae_pct", &self.ae_pct, |p| p <= 100)?;
        check("epochs", &self.epochs, |e| e >= 1)?;
        check("attack_iters", &self.attack_iters, |k| k >= 1)?;
        check("epsilons", &self.epsilons, |e| {
            e.is_finite() && (0.0..=1.0).contains(&e)
        })?;
        Ok(())
    }

    /// Maps fields that cannot influence training onto the first candidate
    /// value, so equivalent procedures share one key.
    pub fn canonicalize(&self, config: &HpConfig) -> HpConfig {
        let mut c = *config;
        if c.rat_pct == 0 {
            if self.tie_phases {
                c.at_lr = c.st_lr;
                c.at_momentum = c.st_momentum;
                c.at_batch = c.st_batch;
            } else {
                c.at_lr = self.at_lr[0];
                c.at_momentum = self.at_momentum[0];
                c.at_batch = self.at_batch[0];
            }
            c.pgd_alpha = self.pgd_alpha[0];
            c.ae_pct = self.ae_pct[0];
        } else if c.rat_pct == 100 && !self.tie_phases {
            c.st_lr = self.st_lr[0];
            c.st_momentum = self.st_momentum[0];
            c.st_batch = self.st_batch[0];
        }
        c
    }

    /// Closed-form size of [`enumerate_space`]'s output.
    pub fn config_count(&self) -> usize {
        let st = self.st_lr.len() * self.st_momentum.len() * self.st_batch.len();
        let at = if self.tie_phases {
            1
        } else {
            self.at_lr.len() * self.at_momentum.len() * self.at_batch.len()
        };
        let adv = self.pgd_alpha.len() * self.ae_pct.len();
        if !self.collapse_inert {
            return st * at * adv * self.rat_pct.len();
        }
        self.rat_pct
            .iter()
            .map(|&r| match r {
                0 => st,
                100 if self.tie_phases => st * adv,
                100 => at * adv,
                _ => st * at * adv,
            })
            .sum()
    }

    /// Epochs x attack-iterations grid, lexicographic.
    pub fn fidelity_grid(&self) -> Vec<FidelityPoint> {
        let mut out = Vec::with_capacity(self.epochs.len() * self.attack_iters.len());
        for &epochs in &self.epochs {
            for &attack_iters in &self.attack_iters {
                out.push(FidelityPoint {
                    epochs,
                    attack_iters,
                });
            }
        }
        out
    }

    /// Full fidelity `s = (1, 1)`.
    pub fn max_fidelity(&self) -> FidelityPoint {
        FidelityPoint {
            epochs: self.epochs.iter().copied().max().unwrap_or(1),
            attack_iters: self.attack_iters.iter().copied().max().unwrap_or(1),
        }
    }

    pub fn min_fidelity(&self) -> FidelityPoint {
        FidelityPoint {
            epochs: self.epochs.iter().copied().min().unwrap_or(1),
            attack_iters: self.attack_iters.iter().copied().min().unwrap_or(1),
        }
    }
}

/// Full Cartesian product of the space in lexicographic candidate order.
///
/// With `collapse_inert`, configurations that differ only in inert fields are
/// emitted once, at the position of their first occurrence.
pub fn enumerate_space(space: &SearchSpace) -> Result<Vec<HpConfig>, DomainError> {
    space.validate()?;
    let (at_lr, at_mom, at_batch): (&[f64], &[f64], &[u32]) = if space.tie_phases {
        (&[0.0], &[0.0], &[0])
    } else {
        (&space.at_lr, &space.at_momentum, &space.at_batch)
    };
    let dims = [
        space.st_lr.len(),
        space.st_momentum.len(),
        space.st_batch.len(),
        at_lr.len(),
        at_mom.len(),
        at_batch.len(),
        space.pgd_alpha.len(),
        space.rat_pct.len(),
        space.ae_pct.len(),
    ];
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(space.config_count());
    let mut seen = HashSet::new();
    let mut idx = [0usize; 9];
    for _ in 0..total {
        let mut c = HpConfig {
            st_lr: space.st_lr[idx[0]],
            st_momentum: space.st_momentum[idx[1]],
            st_batch: space.st_batch[idx[2]],
            at_lr: at_lr[idx[3]],
            at_momentum: at_mom[idx[4]],
            at_batch: at_batch[idx[5]],
            pgd_alpha: space.pgd_alpha[idx[6]],
            rat_pct: space.rat_pct[idx[7]],
            ae_pct: space.ae_pct[idx[8]],
        };
        if space.tie_phases {
            c.at_lr = c.st_lr;
            c.at_momentum = c.st_momentum;
            c.at_batch = c.st_batch;
        }
        if space.collapse_inert {
            c = space.canonicalize(&c);
            if seen.insert(c) {
                out.push(c);
            }
        } else {
            out.push(c);
        }
        // odometer, last dimension fastest
        for d in (0..9).rev() {
            idx[d] += 1;
            if idx[d] < dims[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(out)
}

/// Immutable keyed collection of evaluation records.
#[derive(Debug, Clone, Default)]
pub struct TabularDataset {
    records: BTreeMap<RecordKey, EvalRecord>,
    provenance: String,
}

impl TabularDataset {
    pub fn from_records(
        records: impl IntoIterator<Item = EvalRecord>,
        provenance: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let mut builder = DatasetBuilder::new(provenance);
        for r in records {
            builder.insert(r)?;
        }
        Ok(builder.build())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Records in key order.
    pub fn records(&self) -> impl ExactSizeIterator<Item = &EvalRecord> + '_ {
        self.records.values()
    }

    pub fn get(&self, key: &RecordKey) -> Option<&EvalRecord> {
        self.records.get(key)
    }

    pub fn contains_key(&self, key: &RecordKey) -> bool {
        self.records.contains_key(key)
    }

    /// Distinct epsilon values, ascending.
    pub fn epsilons(&self) -> Vec<f64> {
        let mut eps: Vec<f64> = self.records.keys().map(|k| k.epsilon()).collect();
        eps.sort_by(f64::total_cmp);
        eps.dedup_by(|a, b| a.to_bits() == b.to_bits());
        eps
    }

    pub fn max_fidelity(&self) -> Option<FidelityPoint> {
        let epochs = self.records.keys().map(|k| k.fidelity.epochs).max()?;
        let iters = self.records.keys().map(|k| k.fidelity.attack_iters).max()?;
        Some(FidelityPoint {
            epochs,
            attack_iters: iters,
        })
    }
}

/// Accumulates records while checking invariants and key uniqueness.
#[derive(Debug, Default)]
pub struct DatasetBuilder {
    records: BTreeMap<RecordKey, EvalRecord>,
    provenance: String,
}

impl DatasetBuilder {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            records: BTreeMap::new(),
            provenance: provenance.into(),
        }
    }

    pub fn from_dataset(ds: TabularDataset) -> Self {
        Self {
            records: ds.records,
            provenance: ds.provenance,
        }
    }

    pub fn insert(&mut self, record: EvalRecord) -> Result<(), DomainError> {
        self.insert_at(record, None)
    }

    fn insert_at(&mut self, record: EvalRecord, line: Option<u64>) -> Result<(), DomainError> {
        record
            .validate()
            .map_err(|reason| DomainError::InvalidRecord { line, reason })?;
        let key = record.key();
        if self.records.contains_key(&key) {
            return Err(DomainError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn contains_key(&self, key: &RecordKey) -> bool {
        self.records.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn build(self) -> TabularDataset {
        TabularDataset {
            records: self.records,
            provenance: self.provenance,
        }
    }
}

/// Parses `0.031`, `8/255` or a bare `k/255`-style fraction.
pub fn parse_epsilon(text: &str) -> Result<f64, DomainError> {
    let t = text.trim();
    let value = match t.split_once('/') {
        Some((num, den)) => {
            let n: f64 = num
                .trim()
                .parse()
                .map_err(|_| DomainError::Epsilon(t.into()))?;
            let d: f64 = den
                .trim()
                .parse()
                .map_err(|_| DomainError::Epsilon(t.into()))?;
            if d == 0.0 {
                return Err(DomainError::Epsilon(t.into()));
            }
            n / d
        }
        None => t.parse().map_err(|_| DomainError::Epsilon(t.into()))?,
    };
    if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
        return Err(DomainError::Epsilon(t.into()));
    }
    Ok(value)
}

fn record_fields(r: &EvalRecord) -> [String; 16] {
    let c = &r.config;
    [
        c.st_lr.to_string(),
        c.st_momentum.to_string(),
        c.st_batch.to_string(),
        c.at_lr.to_string(),
        c.at_momentum.to_string(),
        c.at_batch.to_string(),
        c.pgd_alpha.to_string(),
        c.rat_pct.to_string(),
        c.ae_pct.to_string(),
        r.epsilon.to_string(),
        r.fidelity.epochs.to_string(),
        r.fidelity.attack_iters.to_string(),
        r.std_error.to_string(),
        r.adv_error.to_string(),
        r.train_time.to_string(),
        r.seed.to_string(),
    ]
}

/// Streams records as CSV rows (no header). Floats use the shortest
/// representation that parses back to the identical value.
pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(sink: W, write_header: bool) -> Result<Self, DomainError> {
        let mut inner = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(sink);
        if write_header {
            inner.write_record(CSV_HEADER)?;
        }
        Ok(Self { inner })
    }

    pub fn write(&mut self, record: &EvalRecord) -> Result<(), DomainError> {
        self.inner.write_record(record_fields(record))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), DomainError> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Writes the dataset as CSV sorted by record key; output is byte-deterministic.
pub fn save_dataset<W: Write>(ds: &TabularDataset, sink: W) -> Result<(), DomainError> {
    if ds.is_empty() {
        return Err(DomainError::EmptyDataset);
    }
    let mut w = RecordWriter::new(sink, true)?;
    for r in ds.records() {
        w.write(r)?;
    }
    w.flush()
}

/// Parses a dataset from CSV. Rejects bad headers, malformed fields,
/// invariant violations and duplicate keys, reporting the file line.
pub fn load_dataset<R: Read>(source: R) -> Result<TabularDataset, DomainError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(DomainError::Header {
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut builder = DatasetBuilder::new("csv");
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != CSV_HEADER.len() {
            return Err(DomainError::FieldCount {
                line,
                found: row.len(),
            });
        }
        let record = parse_row(&row, line)?;
        builder.insert_at(record, Some(line))?;
    }
    Ok(builder.build())
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<EvalRecord, DomainError> {
    fn field<T: std::str::FromStr>(
        row: &csv::StringRecord,
        col: usize,
        line: u64,
    ) -> Result<T, DomainError> {
        let raw = &row[col];
        raw.trim().parse().map_err(|_| DomainError::Parse {
            line,
            column: CSV_HEADER[col],
            value: raw.to_string(),
        })
    }
    let f64_field = |col: usize| -> Result<f64, DomainError> {
        let v: f64 = field(row, col, line)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(DomainError::Parse {
                line,
                column: CSV_HEADER[col],
                value: row[col].to_string(),
            })
        }
    };
    Ok(EvalRecord {
        config: HpConfig {
            st_lr: f64_field(0)?,
            st_momentum: f64_field(1)?,
            st_batch: field(row, 2, line)?,
            at_lr: f64_field(3)?,
            at_momentum: f64_field(4)?,
            at_batch: field(row, 5, line)?,
            pgd_alpha: f64_field(6)?,
            rat_pct: field(row, 7, line)?,
            ae_pct: field(row, 8, line)?,
        },
        epsilon: f64_field(9)?,
        fidelity: FidelityPoint {
            epochs: field(row, 10, line)?,
            attack_iters: field(row, 11, line)?,
        },
        std_error: f64_field(12)?,
        adv_error: f64_field(13)?,
        train_time: f64_field(14)?,
        seed: field(row, 15, line)?,
    })
}
