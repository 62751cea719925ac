//! Study statistics over evaluation datasets: error reduction from untying
//! the ST and AT hyper-parameters, fidelity correlations, training-time
//! reductions of cheaper attacks, Pareto frontiers and summary means.
//!
//! Reductions are reported in percent.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use thiserror::Error;

use crate::domain::{EvalRecord, FidelityPoint, HpConfig, TabularDataset};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no records in the {0} subspace")]
    EmptySubspace(String),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("reduction undefined against a zero baseline")]
    ZeroBaseline,
    #[error("nothing left after excluding {excluded} non-positive values")]
    NoPositiveValues { excluded: usize },
    #[error("csv output failed: {0}")]
    Output(String),
}

/// Which error a study looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Criterion {
    Error,
    AdvError,
    MeanError,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Error, Criterion::AdvError, Criterion::MeanError];

    pub fn value(&self, std_error: f64, adv_error: f64) -> f64 {
        match self {
            Criterion::Error => std_error,
            Criterion::AdvError => adv_error,
            Criterion::MeanError => 0.5 * (std_error + adv_error),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Error => "error",
            Criterion::AdvError => "adv_error",
            Criterion::MeanError => "mean_error",
        })
    }
}

fn same_eps(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

/// Seed-averaged `(config, std_error, adv_error)` at one fidelity and
/// epsilon, in configuration order.
pub fn seed_averaged(
    ds: &TabularDataset,
    fidelity: FidelityPoint,
    epsilon: f64,
) -> Vec<(HpConfig, f64, f64)> {
    let mut acc: BTreeMap<HpConfig, (f64, f64, usize)> = BTreeMap::new();
    for r in ds.records() {
        if r.fidelity == fidelity && same_eps(r.epsilon, epsilon) {
            let e = acc.entry(r.config).or_insert((0.0, 0.0, 0));
            e.0 += r.std_error;
            e.1 += r.adv_error;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(c, (s, a, n))| (c, s / n as f64, a / n as f64))
        .collect()
}

/// `100 * (same - diff) / same`.
pub fn reduction_pct(same: f64, diff: f64) -> Result<f64, AnalysisError> {
    if same == 0.0 {
        return if diff == 0.0 {
            Ok(0.0)
        } else {
            Err(AnalysisError::ZeroBaseline)
        };
    }
    Ok(100.0 * (same - diff) / same)
}

/// Whether the training procedure of `config` is reachable with shared
/// LR/momentum/batch size. An inert phase imposes no constraint.
pub fn tie_feasible(config: &HpConfig) -> bool {
    config.is_tied() || config.rat_pct == 0 || config.rat_pct == 100
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReductionRow {
    pub criterion: Criterion,
    pub rat_pct: Option<u8>,
    pub epsilon: f64,
    /// Best value with shared ST/AT hyper-parameters.
    pub same: f64,
    /// Best value over the whole space.
    pub diff: f64,
    pub reduction_pct: f64,
}

/// Best tied versus best untied value at full fidelity, optionally for one
/// `%RAT` level.
pub fn error_reduction(
    ds: &TabularDataset,
    criterion: Criterion,
    rat_pct: Option<u8>,
    epsilon: f64,
) -> Result<ReductionRow, AnalysisError> {
    let full = ds
        .max_fidelity()
        .ok_or_else(|| AnalysisError::EmptySubspace("dataset".into()))?;
    let rows = seed_averaged(ds, full, epsilon);
    let mut same = f64::INFINITY;
    let mut diff = f64::INFINITY;
    for (c, s, a) in &rows {
        if rat_pct.is_some_and(|r| r != c.rat_pct) {
            continue;
        }
        let v = criterion.value(*s, *a);
        diff = diff.min(v);
        if tie_feasible(c) {
            same = same.min(v);
        }
    }
    if !diff.is_finite() {
        return Err(AnalysisError::EmptySubspace("untied".into()));
    }
    if !same.is_finite() {
        return Err(AnalysisError::EmptySubspace("tied".into()));
    }
    Ok(ReductionRow {
        criterion,
        rat_pct,
        epsilon,
        same,
        diff,
        reduction_pct: reduction_pct(same, diff)?,
    })
}

/// Empirical distribution function of a finite sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(values: &[f64]) -> Result<Self, AnalysisError> {
        if values.is_empty() {
            return Err(AnalysisError::TooFew { needed: 1, got: 0 });
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `P(X <= x)`; right-continuous.
    pub fn eval(&self, x: f64) -> f64 {
        self.sorted.partition_point(|v| *v <= x) as f64 / self.sorted.len() as f64
    }

    /// Step points `(value, cumulative probability)`, one per distinct value.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.sorted.len() as f64;
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (i, v) in self.sorted.iter().enumerate() {
            let p = (i + 1) as f64 / n;
            match out.last_mut() {
                Some(last) if last.0 == *v => last.1 = p,
                _ => out.push((*v, p)),
            }
        }
        out
    }

    /// Sample median (mean of the two middle values for even sizes).
    pub fn median(&self) -> f64 {
        let n = self.sorted.len();
        if n % 2 == 1 {
            self.sorted[n / 2]
        } else {
            0.5 * (self.sorted[n / 2 - 1] + self.sorted[n / 2])
        }
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.sorted.len() - 1]
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted
    }
}

/// `%RAT` levels where both phases are active and untying can matter.
pub const MIXED_RAT_LEVELS: [u8; 3] = [30, 50, 70];

#[derive(Debug, Clone, PartialEq)]
pub struct StConfigReductions {
    pub criterion: Criterion,
    pub epsilon: f64,
    /// One reduction per ST setting `(lr, momentum, batch)`.
    pub reductions: Vec<((f64, f64, u32), f64)>,
    pub cdf: EmpiricalCdf,
    /// ST settings without any tied completion in the data.
    pub skipped: usize,
}

/// For every ST setting: best completion whose AT phase reuses the ST
/// LR/momentum/batch versus best completion overall, optimizing `%RAT` over
/// the mixed levels, `%AE` and the PGD step at full fidelity.
pub fn per_st_config_reduction_cdf(
    ds: &TabularDataset,
    criterion: Criterion,
    epsilon: f64,
) -> Result<StConfigReductions, AnalysisError> {
    let full = ds
        .max_fidelity()
        .ok_or_else(|| AnalysisError::EmptySubspace("dataset".into()))?;
    type StKey = (u64, u64, u32);
    let mut groups: BTreeMap<StKey, (f64, f64)> = BTreeMap::new();
    for (c, s, a) in seed_averaged(ds, full, epsilon) {
        if !MIXED_RAT_LEVELS.contains(&c.rat_pct) {
            continue;
        }
        let key = (c.st_lr.to_bits(), c.st_momentum.to_bits(), c.st_batch);
        let v = criterion.value(s, a);
        let e = groups.entry(key).or_insert((f64::INFINITY, f64::INFINITY));
        e.1 = e.1.min(v);
        if c.is_tied() {
            e.0 = e.0.min(v);
        }
    }
    let mut reductions = Vec::new();
    let mut skipped = 0;
    for ((lr, mom, batch), (same, diff)) in groups {
        if !same.is_finite() {
            skipped += 1;
            continue;
        }
        reductions.push((
            (f64::from_bits(lr), f64::from_bits(mom), batch),
            reduction_pct(same, diff)?,
        ));
    }
    let values: Vec<f64> = reductions.iter().map(|r| r.1).collect();
    if values.is_empty() {
        return Err(AnalysisError::EmptySubspace("per-ST tied".into()));
    }
    Ok(StConfigReductions {
        criterion,
        epsilon,
        cdf: EmpiricalCdf::new(&values)?,
        reductions,
        skipped,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(AnalysisError::TooFew {
            needed: 2,
            got: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    /// `Error` or `AdvError`.
    pub metric: Criterion,
    pub epsilon: f64,
    pub cheap_iters: u32,
    pub baseline_iters: u32,
    pub r: f64,
    /// `(cheap, baseline)` per configuration.
    pub pairs: Vec<(f64, f64)>,
}

/// Correlation between each cheaper attack-iteration level and the
/// baseline level, across configurations at maximum epochs.
pub fn correlation_report(
    ds: &TabularDataset,
    epsilon: f64,
) -> Result<Vec<CorrelationRow>, AnalysisError> {
    let full = ds
        .max_fidelity()
        .ok_or_else(|| AnalysisError::EmptySubspace("dataset".into()))?;
    let baseline: HashMap<HpConfig, (f64, f64)> = seed_averaged(ds, full, epsilon)
        .into_iter()
        .map(|(c, s, a)| (c, (s, a)))
        .collect();
    let mut levels: Vec<u32> = ds
        .records()
        .filter(|r| r.fidelity.epochs == full.epochs && r.fidelity.attack_iters < full.attack_iters)
        .map(|r| r.fidelity.attack_iters)
        .collect();
    levels.sort_unstable();
    levels.dedup();
    let mut out = Vec::new();
    for metric in [Criterion::Error, Criterion::AdvError] {
        for &iters in &levels {
            let cheap = seed_averaged(
                ds,
                FidelityPoint {
                    epochs: full.epochs,
                    attack_iters: iters,
                },
                epsilon,
            );
            let pairs: Vec<(f64, f64)> = cheap
                .iter()
                .filter_map(|(c, s, a)| {
                    baseline
                        .get(c)
                        .map(|&(bs, ba)| (metric.value(*s, *a), metric.value(bs, ba)))
                })
                .collect();
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let r = pearson(&xs, &ys).unwrap_or(f64::NAN);
            out.push(CorrelationRow {
                metric,
                epsilon,
                cheap_iters: iters,
                baseline_iters: full.attack_iters,
                r,
                pairs,
            });
        }
    }
    Ok(out)
}

/// A cheaper way to train than the baseline attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheapMethod {
    Iters(u32),
    /// Standard training only (`%RAT = 0`).
    StandardOnly,
}

impl fmt::Display for CheapMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheapMethod::Iters(1) => write!(f, "fgsm"),
            CheapMethod::Iters(k) => write!(f, "pgd{k}"),
            CheapMethod::StandardOnly => write!(f, "st_only"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeReduction {
    pub method: CheapMethod,
    pub reductions: Vec<f64>,
    pub cdf: Option<EmpiricalCdf>,
    /// Baseline cells without a matching cheap cell.
    pub unmatched: usize,
}

/// Training-time reduction `100 * (t_base - t_cheap) / t_base` per matched
/// `(config, epochs, epsilon)` for every cheaper attack-iteration level, and
/// for standard-only training matched on ST hyper-parameters and epochs.
pub fn time_reduction_cdf(
    ds: &TabularDataset,
    baseline_iters: u32,
) -> Result<Vec<TimeReduction>, AnalysisError> {
    type Key = (HpConfig, u32, u64, u32);
    let mut times: HashMap<Key, (f64, usize)> = HashMap::new();
    type StKey = (u64, u64, u32, u32, u64);
    let mut st_times: HashMap<StKey, (f64, usize)> = HashMap::new();
    let mut levels = Vec::new();
    for r in ds.records() {
        let e = times
            .entry((
                r.config,
                r.fidelity.epochs,
                r.epsilon.to_bits(),
                r.fidelity.attack_iters,
            ))
            .or_insert((0.0, 0));
        e.0 += r.train_time;
        e.1 += 1;
        if r.config.rat_pct == 0 {
            let e = st_times.entry(st_key(r)).or_insert((0.0, 0));
            e.0 += r.train_time;
            e.1 += 1;
        }
        if r.fidelity.attack_iters < baseline_iters {
            levels.push(r.fidelity.attack_iters);
        }
    }
    levels.sort_unstable();
    levels.dedup();
    let mean = |v: &(f64, usize)| v.0 / v.1 as f64;
    let mut baselines: Vec<(&Key, f64)> = times
        .iter()
        .filter(|(k, _)| k.3 == baseline_iters && k.0.rat_pct > 0)
        .map(|(k, v)| (k, mean(v)))
        .collect();
    baselines.sort_by(|a, b| a.0.cmp(b.0));
    if baselines.is_empty() {
        return Err(AnalysisError::EmptySubspace("baseline".into()));
    }
    let mut methods: Vec<CheapMethod> = levels.into_iter().map(CheapMethod::Iters).collect();
    methods.push(CheapMethod::StandardOnly);
    let mut out = Vec::new();
    for method in methods {
        let mut reductions = Vec::new();
        let mut unmatched = 0;
        for (k, t_base) in &baselines {
            let cheap = match method {
                CheapMethod::Iters(it) => times.get(&(k.0, k.1, k.2, it)).map(mean),
                CheapMethod::StandardOnly => st_times
                    .get(&(
                        k.0.st_lr.to_bits(),
                        k.0.st_momentum.to_bits(),
                        k.0.st_batch,
                        k.1,
                        k.2,
                    ))
                    .map(mean),
            };
            match cheap {
                Some(tc) if *t_base > 0.0 => reductions.push(100.0 * (t_base - tc) / t_base),
                _ => unmatched += 1,
            }
        }
        let cdf = EmpiricalCdf::new(&reductions).ok();
        out.push(TimeReduction {
            method,
            reductions,
            cdf,
            unmatched,
        });
    }
    Ok(out)
}

fn st_key(r: &EvalRecord) -> (u64, u64, u32, u32, u64) {
    (
        r.config.st_lr.to_bits(),
        r.config.st_momentum.to_bits(),
        r.config.st_batch,
        r.fidelity.epochs,
        r.epsilon.to_bits(),
    )
}

/// Indices of points not strictly dominated (lower is better in both
/// coordinates), in ascending index order.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
    });
    let mut keep = Vec::new();
    let mut best_second = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        // points sharing the first coordinate form one group
        let x = points[order[k]].0;
        let mut end = k;
        while end < order.len() && points[order[end]].0 == x {
            end += 1;
        }
        let group_min = points[order[k]].1;
        if group_min < best_second {
            for &i in &order[k..end] {
                if points[i].1 == group_min {
                    keep.push(i);
                }
            }
            best_second = group_min;
        }
        k = end;
    }
    keep.sort_unstable();
    keep
}

/// Whether `a` dominates `b`: no worse in both, better in at least one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 <= b.1 && (a.0 < b.0 || a.1 < b.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoMean {
    pub value: f64,
    pub used: usize,
    pub excluded: usize,
}

/// Geometric mean of the positive values; non-positive ones are counted and
/// left out.
pub fn geomean_reduction(values: &[f64]) -> Result<GeoMean, AnalysisError> {
    let positive: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    let excluded = values.len() - positive.len();
    if positive.is_empty() {
        return Err(AnalysisError::NoPositiveValues { excluded });
    }
    let mean_log = positive.iter().map(|v| v.ln()).sum::<f64>() / positive.len() as f64;
    Ok(GeoMean {
        value: mean_log.exp(),
        used: positive.len(),
        excluded,
    })
}

/// Best configuration of one `(%RAT, %AE)` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatAeCell {
    pub rat_pct: u8,
    pub ae_pct: u8,
    pub config: HpConfig,
    pub std_error: f64,
    pub adv_error: f64,
    pub on_frontier: bool,
}

/// For every `(%RAT, %AE)` pair, the configuration with the lowest mean error
/// at full fidelity, flagged when it sits on the Pareto frontier of the cells.
pub fn rat_ae_grid(ds: &TabularDataset, epsilon: f64) -> Result<Vec<RatAeCell>, AnalysisError> {
    let full = ds
        .max_fidelity()
        .ok_or_else(|| AnalysisError::EmptySubspace("dataset".into()))?;
    let mut best: BTreeMap<(u8, u8), (HpConfig, f64, f64)> = BTreeMap::new();
    for (c, s, a) in seed_averaged(ds, full, epsilon) {
        let v = Criterion::MeanError.value(s, a);
        let e = best.entry((c.rat_pct, c.ae_pct)).or_insert((c, s, a));
        if v < Criterion::MeanError.value(e.1, e.2) {
            *e = (c, s, a);
        }
    }
    if best.is_empty() {
        return Err(AnalysisError::EmptySubspace("full-fidelity".into()));
    }
    let cells: Vec<_> = best.into_iter().collect();
    let points: Vec<(f64, f64)> = cells.iter().map(|(_, (_, s, a))| (*s, *a)).collect();
    let frontier = pareto_frontier(&points);
    Ok(cells
        .into_iter()
        .enumerate()
        .map(|(i, ((rat, ae), (c, s, a)))| RatAeCell {
            rat_pct: rat,
            ae_pct: ae,
            config: c,
            std_error: s,
            adv_error: a,
            on_frontier: frontier.binary_search(&i).is_ok(),
        })
        .collect())
}

fn csv_err(e: impl fmt::Display) -> AnalysisError {
    AnalysisError::Output(e.to_string())
}

pub fn write_reductions<W: Write>(rows: &[ReductionRow], sink: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "criterion",
        "rat_pct",
        "epsilon",
        "same",
        "diff",
        "reduction_pct",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.criterion.to_string(),
            r.rat_pct.map_or("all".into(), |v| v.to_string()),
            r.epsilon.to_string(),
            r.same.to_string(),
            r.diff.to_string(),
            r.reduction_pct.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

/// `series,value,cdf` step points of several named distributions.
pub fn write_cdfs<W: Write>(
    series: &[(String, &EmpiricalCdf)],
    sink: W,
) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["series", "value", "cdf"])
        .map_err(csv_err)?;
    for (name, cdf) in series {
        for (v, p) in cdf.steps() {
            w.write_record([name.clone(), v.to_string(), p.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(csv_err)
}

pub fn write_correlations<W: Write>(rows: &[CorrelationRow], sink: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "metric",
        "epsilon",
        "cheap_iters",
        "baseline_iters",
        "pearson_r",
        "pairs",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.metric.to_string(),
            r.epsilon.to_string(),
            r.cheap_iters.to_string(),
            r.baseline_iters.to_string(),
            r.r.to_string(),
            r.pairs.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}

pub fn write_rat_ae_grid<W: Write>(cells: &[RatAeCell], sink: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "rat_pct",
        "ae_pct",
        "std_error",
        "adv_error",
        "pareto",
        "config",
    ])
    .map_err(csv_err)?;
    for c in cells {
        w.write_record([
            c.rat_pct.to_string(),
            c.ae_pct.to_string(),
            c.std_error.to_string(),
            c.adv_error.to_string(),
            u8::from(c.on_frontier).to_string(),
            c.config.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)
}
