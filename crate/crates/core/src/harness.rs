//! Tabular replay of tuners with simulated cost, multi-seed aggregation and
//! trace emission.
//!
//! A [`ReplayOracle`] turns a dataset into a total lookup over the declared
//! space; replay charges each lookup's training time to a simulated clock.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{
    enumerate_space, DomainError, FidelityPoint, HpConfig, SearchSpace, TabularDataset,
};
use crate::optimizers::{
    Evaluation, Evaluator, ModelSettings, Objective, OptimizerSpec, Problem, TunerError, TunerState,
};

/// Points of the common aggregation grid.
pub const GRID_POINTS: usize = 200;

/// Epsilon values closer than this are the same bound.
const EPS_MATCH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset misses {count} (config, fidelity) cells at epsilon {epsilon}; first ones:\n{listing}")]
    Coverage {
        epsilon: f64,
        count: usize,
        listing: String,
    },
    #[error("no seeds given")]
    NoSeeds,
    #[error("budget must be positive")]
    Budget,
    #[error("malformed trace file: {0}")]
    Trace(String),
    #[error("every seed failed; first error: {0}")]
    AllSeedsFailed(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Tuner(#[from] TunerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Seed-averaged measurement of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleEntry {
    pub std_error: f64,
    pub adv_error: f64,
    pub train_time: f64,
    pub replicates: usize,
}

/// Total lookup `(config, fidelity) -> measurement` at a fixed epsilon.
#[derive(Debug, Clone)]
pub struct ReplayOracle {
    space: SearchSpace,
    epsilon: f64,
    table: HashMap<(HpConfig, FidelityPoint), OracleEntry>,
}

/// Check coverage and average replicate records of `ds` at `epsilon`.
pub fn build_oracle(
    ds: &TabularDataset,
    epsilon: f64,
    space: &SearchSpace,
) -> Result<ReplayOracle, HarnessError> {
    let mut sums: HashMap<(HpConfig, FidelityPoint), (f64, f64, f64, usize)> = HashMap::new();
    for r in ds.records() {
        if (r.epsilon - epsilon).abs() > EPS_MATCH {
            continue;
        }
        let e = sums
            .entry((space.canonicalize(&r.config), r.fidelity))
            .or_insert((0.0, 0.0, 0.0, 0));
        e.0 += r.std_error;
        e.1 += r.adv_error;
        e.2 += r.train_time;
        e.3 += 1;
    }
    let configs = enumerate_space(space)?;
    let fidelities = space.fidelity_grid();
    let mut table = HashMap::with_capacity(configs.len() * fidelities.len());
    let mut missing = Vec::new();
    for c in &configs {
        let canonical = space.canonicalize(c);
        for f in &fidelities {
            match sums.get(&(canonical, *f)) {
                Some(&(s, a, t, n)) => {
                    let k = n as f64;
                    table.insert(
                        (canonical, *f),
                        OracleEntry {
                            std_error: s / k,
                            adv_error: a / k,
                            train_time: t / k,
                            replicates: n,
                        },
                    );
                }
                None => missing.push((canonical, *f)),
            }
        }
    }
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        let mut listing = String::new();
        for (c, f) in missing.iter().take(20) {
            let _ = writeln!(listing, "  [{c}] @ {f}");
        }
        return Err(HarnessError::Coverage {
            epsilon,
            count: missing.len(),
            listing,
        });
    }
    Ok(ReplayOracle {
        space: space.clone(),
        epsilon,
        table,
    })
}

impl ReplayOracle {
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn lookup(&self, config: &HpConfig, fidelity: FidelityPoint) -> Option<OracleEntry> {
        self.table
            .get(&(self.space.canonicalize(config), fidelity))
            .copied()
    }

    /// Scored at full fidelity.
    pub fn full(&self, config: &HpConfig) -> Option<OracleEntry> {
        self.lookup(config, self.space.max_fidelity())
    }
}

impl Evaluator for ReplayOracle {
    fn evaluate(&self, config: &HpConfig, fidelity: FidelityPoint) -> Result<Evaluation, String> {
        self.lookup(config, fidelity)
            .map(|e| Evaluation {
                std_error: e.std_error,
                adv_error: e.adv_error,
                cost: e.train_time,
            })
            .ok_or_else(|| format!("no record for [{config}] @ {fidelity}"))
    }
}

/// How incumbent curves are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    /// Best full-fidelity value the tuner itself observed.
    Observed,
    /// Tuner's current recommendation scored at full fidelity by the oracle
    /// (oracle-assisted; the scoring is not charged).
    Recommendation,
}

impl ReportMode {
    pub fn label(&self) -> &'static str {
        match self {
            ReportMode::Observed => "observed",
            ReportMode::Recommendation => "recommendation (oracle-assisted)",
        }
    }

    /// File-name form of the label.
    pub fn slug(&self) -> &'static str {
        match self {
            ReportMode::Observed => "observed",
            ReportMode::Recommendation => "recommendation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t: f64,
    pub objective: f64,
    pub std_error: f64,
    pub adv_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedTrace {
    pub seed: u64,
    pub points: Vec<TracePoint>,
}

impl SeedTrace {
    /// Last value at or before `t`.
    pub fn value_at(&self, t: f64) -> Option<f64> {
        let k = self.points.partition_point(|p| p.t <= t);
        (k > 0).then(|| self.points[k - 1].objective)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatePoint {
    pub t: f64,
    /// `None` until every seed has reported a value.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub label: String,
    pub mode: ReportMode,
    pub budget: f64,
    pub seeds: Vec<SeedTrace>,
    pub failures: Vec<(u64, String)>,
    pub aggregate: Vec<AggregatePoint>,
}

/// `n` evenly spaced times over `[0, budget]`.
pub fn time_grid(budget: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![budget];
    }
    (0..n).map(|k| budget * k as f64 / (n - 1) as f64).collect()
}

/// Mean and sample standard deviation across seeds at each grid time, with
/// last-observation-carried-forward interpolation.
pub fn aggregate(seeds: &[SeedTrace], grid: &[f64]) -> Vec<AggregatePoint> {
    grid.iter()
        .map(|&t| {
            let values: Option<Vec<f64>> = seeds.iter().map(|s| s.value_at(t)).collect();
            match values {
                Some(v) if !v.is_empty() => {
                    let n = v.len() as f64;
                    let mean = v.iter().sum::<f64>() / n;
                    let std = if v.len() > 1 {
                        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                    } else {
                        0.0
                    };
                    AggregatePoint {
                        t,
                        mean: Some(mean),
                        std: Some(std),
                    }
                }
                _ => AggregatePoint {
                    t,
                    mean: None,
                    std: None,
                },
            }
        })
        .collect()
}

fn push_point(points: &mut Vec<TracePoint>, p: TracePoint) {
    match points.last_mut() {
        Some(last) if last.t >= p.t => *last = TracePoint { t: last.t, ..p },
        _ => points.push(p),
    }
}

/// Per-seed incumbent curve of one tuner run.
pub fn seed_trace(
    state: &TunerState,
    oracle: &ReplayOracle,
    objective: &Objective<'_>,
    mode: ReportMode,
) -> SeedTrace {
    let mut points = Vec::new();
    match mode {
        ReportMode::Observed => {
            for (t, o) in state.incumbent_trace() {
                push_point(
                    &mut points,
                    TracePoint {
                        t,
                        objective: o.objective,
                        std_error: o.std_error,
                        adv_error: o.adv_error,
                    },
                );
            }
        }
        ReportMode::Recommendation => {
            for o in &state.history {
                if let Some(e) = oracle.full(&o.recommendation) {
                    push_point(
                        &mut points,
                        TracePoint {
                            t: o.elapsed,
                            objective: objective.value(e.std_error, e.adv_error),
                            std_error: e.std_error,
                            adv_error: e.adv_error,
                        },
                    );
                }
            }
        }
    }
    SeedTrace {
        seed: state.seed,
        points,
    }
}

/// Everything a replay needs besides the tuner itself.
#[derive(Debug, Clone)]
pub struct ReplaySetup {
    pub seeds: Vec<u64>,
    pub budget: f64,
    pub alpha_weight: f64,
    pub settings: ModelSettings,
}

/// Run one tuner once per seed (concurrently) and collect both report modes.
pub fn replay_states(
    spec: &OptimizerSpec,
    oracle: &ReplayOracle,
    problem: &Problem,
    setup: &ReplaySetup,
) -> Result<Vec<Result<TunerState, String>>, HarnessError> {
    if setup.seeds.is_empty() {
        return Err(HarnessError::NoSeeds);
    }
    if setup.budget.is_nan() || setup.budget <= 0.0 {
        return Err(HarnessError::Budget);
    }
    let objective = Objective::new(setup.alpha_weight, oracle)?;
    Ok(setup
        .seeds
        .par_iter()
        .map(|&seed| {
            spec.run(problem, &objective, setup.budget, seed, &setup.settings)
                .map_err(|e| e.to_string())
        })
        .collect())
}

/// Assemble a [`RunTrace`] from per-seed tuner runs.
pub fn trace_from_states(
    label: &str,
    states: &[Result<TunerState, String>],
    seeds: &[u64],
    oracle: &ReplayOracle,
    alpha_weight: f64,
    budget: f64,
    mode: ReportMode,
) -> Result<RunTrace, HarnessError> {
    let objective = Objective::new(alpha_weight, oracle)?;
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (seed, st) in seeds.iter().zip(states) {
        match st {
            Ok(state) => traces.push(seed_trace(state, oracle, &objective, mode)),
            Err(e) => {
                log::warn!("{label}: seed {seed} failed: {e}");
                failures.push((*seed, e.clone()));
            }
        }
    }
    if traces.is_empty() {
        return Err(HarnessError::AllSeedsFailed(
            failures.first().map(|f| f.1.clone()).unwrap_or_default(),
        ));
    }
    let aggregate = aggregate(&traces, &time_grid(budget, GRID_POINTS));
    Ok(RunTrace {
        label: label.to_string(),
        mode,
        budget,
        seeds: traces,
        failures,
        aggregate,
    })
}

/// Replay one tuner over all seeds and aggregate in the chosen mode.
pub fn replay(
    spec: &OptimizerSpec,
    oracle: &ReplayOracle,
    problem: &Problem,
    setup: &ReplaySetup,
    mode: ReportMode,
) -> Result<RunTrace, HarnessError> {
    let states = replay_states(spec, oracle, problem, setup)?;
    trace_from_states(
        &spec.label(),
        &states,
        &setup.seeds,
        oracle,
        setup.alpha_weight,
        setup.budget,
        mode,
    )
}

impl RunTrace {
    /// Last defined aggregate mean.
    pub fn final_mean(&self) -> Option<f64> {
        self.aggregate.iter().rev().find_map(|p| p.mean)
    }

    /// First grid time where the aggregate mean is at or below `target`.
    pub fn first_time_at_or_below(&self, target: f64) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|p| p.mean.is_some_and(|m| m <= target))
            .map(|p| p.t)
    }
}

/// How much faster `a` reaches the final mean quality of `b`:
/// `T_b / T_a`, where `T_a` is the first grid time `a`'s mean is at or below
/// `b`'s final mean and `T_b` the first grid time `b` itself gets there (its
/// horizon whenever `b` is still improving at the end). `0` when `a`
/// never gets there, `+inf` when it starts there.
pub fn speedup(a: &RunTrace, b: &RunTrace) -> f64 {
    let Some(target) = b.final_mean() else {
        return f64::NAN;
    };
    let t_b = b.first_time_at_or_below(target).unwrap_or(b.budget);
    match a.first_time_at_or_below(target) {
        Some(t_a) if t_a > 0.0 => t_b / t_a,
        Some(_) => f64::INFINITY,
        None => 0.0,
    }
}

/// `seed,t_s,objective,std_error,adv_error`, seeds in run order.
pub fn write_seed_traces<W: Write>(trace: &RunTrace, sink: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["seed", "t_s", "objective", "std_error", "adv_error"])?;
    for s in &trace.seeds {
        for p in &s.points {
            w.write_record([
                s.seed.to_string(),
                p.t.to_string(),
                p.objective.to_string(),
                p.std_error.to_string(),
                p.adv_error.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `t_s,mean,std` for grid times where every seed has a value.
pub fn write_aggregate<W: Write>(trace: &RunTrace, sink: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["t_s", "mean", "std"])?;
    for p in &trace.aggregate {
        if let (Some(m), Some(s)) = (p.mean, p.std) {
            w.write_record([p.t.to_string(), m.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read back per-seed traces written by [`write_seed_traces`].
pub fn read_seed_traces<R: std::io::Read>(source: R) -> Result<Vec<SeedTrace>, HarnessError> {
    let mut r = csv::Reader::from_reader(source);
    let mut out: Vec<SeedTrace> = Vec::new();
    for row in r.records() {
        let row = row?;
        let parse = |i: usize| -> Result<f64, HarnessError> {
            row.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| HarnessError::Trace(format!("bad row {row:?}")))
        };
        let seed: u64 = row
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| HarnessError::Trace(format!("bad row {row:?}")))?;
        let p = TracePoint {
            t: parse(1)?,
            objective: parse(2)?,
            std_error: parse(3)?,
            adv_error: parse(4)?,
        };
        match out.last_mut() {
            Some(s) if s.seed == seed => s.points.push(p),
            _ => out.push(SeedTrace {
                seed,
                points: vec![p],
            }),
        }
    }
    Ok(out)
}

/// Key-value summary: final incumbents per tuner and every ordered speedup.
pub fn summary(traces: &[RunTrace]) -> String {
    let mut out = String::new();
    if let Some(first) = traces.first() {
        let _ = writeln!(out, "mode = {}", first.mode.label());
        let _ = writeln!(out, "budget = {}", first.budget);
    }
    for t in traces {
        let fm = t.final_mean().map_or("nan".to_string(), |v| v.to_string());
        let _ = writeln!(out, "final_mean.{} = {}", t.label, fm);
        let fs = t
            .aggregate
            .iter()
            .rev()
            .find_map(|p| p.std)
            .map_or("nan".to_string(), |v| v.to_string());
        let _ = writeln!(out, "final_std.{} = {}", t.label, fs);
        let _ = writeln!(out, "seeds.{} = {}", t.label, t.seeds.len());
        for (seed, e) in &t.failures {
            let _ = writeln!(
                out,
                "failed.{}.{} = {}",
                t.label,
                seed,
                e.replace('\n', " ")
            );
        }
    }
    for a in traces {
        for b in traces {
            if a.label != b.label {
                let _ = writeln!(
                    out,
                    "speedup.{}.vs.{} = {}",
                    a.label,
                    b.label,
                    speedup(a, b)
                );
            }
        }
    }
    out
}

/// Synthetic tabular benchmarks with known structure.
pub mod synthetic {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use crate::domain::{
        enumerate_space, DatasetBuilder, DomainError, EvalRecord, SearchSpace, TabularDataset,
    };
    use crate::surrogate::{Encoder, CONFIG_DIMS};

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct SyntheticSpec {
        /// Standard deviation of the offset of every lower fidelity.
        pub noise_sd: f64,
        /// Cost of a lower-fidelity evaluation relative to full fidelity.
        pub low_cost_ratio: f64,
        /// Cost of a full-fidelity evaluation.
        pub full_cost: f64,
        pub seed: u64,
    }

    impl Default for SyntheticSpec {
        fn default() -> Self {
            Self {
                noise_sd: 0.01,
                low_cost_ratio: 0.1,
                full_cost: 1.0,
                seed: 0,
            }
        }
    }

    fn bowl(e: &[f64], center: &[f64], weights: &[f64]) -> f64 {
        let total: f64 = weights.iter().sum();
        e.iter()
            .zip(center)
            .zip(weights)
            .map(|((x, c), w)| w * (x - c).powi(2))
            .sum::<f64>()
            / total
    }

    /// One record per canonical configuration, fidelity and epsilon (seed 0).
    ///
    /// Full-fidelity errors are smooth random bowls over the encoded
    /// configuration mapped into `[0.1, 0.9]`; every lower fidelity adds
    /// independent `N(0, noise_sd^2)` offsets and costs `low_cost_ratio`
    /// of the full-fidelity cost.
    pub fn benchmark(
        space: &SearchSpace,
        spec: &SyntheticSpec,
    ) -> Result<TabularDataset, DomainError> {
        let mut canonical = space.clone();
        canonical.collapse_inert = true;
        let configs = enumerate_space(&canonical)?;
        let encoder = Encoder::new(space);
        let full = space.max_fidelity();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut draw = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..hi)).collect()
        };
        let c_std = draw(CONFIG_DIMS, 0.0, 1.0);
        let c_adv = draw(CONFIG_DIMS, 0.0, 1.0);
        let w_std = draw(CONFIG_DIMS, 0.2, 1.0);
        let w_adv = draw(CONFIG_DIMS, 0.2, 1.0);
        let noise = Normal::new(0.0, spec.noise_sd)
            .map_err(|e| DomainError::InvalidConfig(e.to_string()))?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
        let mut builder = DatasetBuilder::new(format!("synthetic benchmark seed {}", spec.seed));
        for cfg in &configs {
            let e = encoder.encode(cfg, full);
            let x = &e.as_slice()[..CONFIG_DIMS];
            let base_std = 0.1 + 0.8 * bowl(x, &c_std, &w_std);
            let base_adv =
                0.1 + 0.8 * (0.5 * bowl(x, &c_adv, &w_adv) + 0.5 * bowl(x, &c_std, &w_std));
            for fid in space.fidelity_grid() {
                for &epsilon in &space.epsilons {
                    let (std_error, adv_error, train_time) = if fid == full {
                        (base_std, base_adv, spec.full_cost)
                    } else {
                        (
                            (base_std + noise.sample(&mut noise_rng)).clamp(0.1, 0.9),
                            (base_adv + noise.sample(&mut noise_rng)).clamp(0.1, 0.9),
                            spec.full_cost * spec.low_cost_ratio,
                        )
                    };
                    builder.insert(EvalRecord {
                        config: *cfg,
                        fidelity: fid,
                        epsilon,
                        std_error,
                        adv_error,
                        train_time,
                        seed: 0,
                    })?;
                }
            }
        }
        Ok(builder.build())
    }
}
