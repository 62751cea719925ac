//! Hyper-parameter optimizers: random search, GP expected improvement,
//! HyperBand over epochs, and a cost-aware multi-fidelity knowledge-gradient
//! tuner that can also lower the number of attack iterations.
//!
//! All tuners run against an [`Evaluator`], minimize the weighted objective
//! `w * std_error + (1 - w) * adv_error` and account cost in the evaluator's
//! units (simulated seconds in replay, wall-clock seconds live).

use nalgebra::DVector;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::domain::{enumerate_space, DomainError, FidelityPoint, HpConfig, SearchSpace};
use crate::surrogate::{
    expected_improvement, CONFIG_DIMS, EncodedPoint, Encoder, FitOptions, GpModel, KernelParams, NoiseModel,
    PosteriorBasis, SurrogateError,
};

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("evaluation of [{config}] @ {fidelity} failed: {message}")]
    Evaluation {
        config: HpConfig,
        fidelity: FidelityPoint,
        message: String,
    },
    #[error("invalid tuner setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Measured outcome of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub std_error: f64,
    pub adv_error: f64,
    pub cost: f64,
}

/// Source of evaluations. Shared across concurrently running tuners.
pub trait Evaluator: Sync {
    fn evaluate(&self, config: &HpConfig, fidelity: FidelityPoint) -> Result<Evaluation, String>;
}

impl<F> Evaluator for F
where
    F: Fn(&HpConfig, FidelityPoint) -> Result<Evaluation, String> + Sync,
{
    fn evaluate(&self, config: &HpConfig, fidelity: FidelityPoint) -> Result<Evaluation, String> {
        self(config, fidelity)
    }
}

/// Weighted error objective to minimize.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub alpha_weight: f64,
    pub evaluator: &'a dyn Evaluator,
}

impl<'a> Objective<'a> {
    pub fn new(alpha_weight: f64, evaluator: &'a dyn Evaluator) -> Result<Self, TunerError> {
        if !(0.0..=1.0).contains(&alpha_weight) {
            return Err(TunerError::Invalid(format!(
                "objective weight {alpha_weight} outside [0,1]"
            )));
        }
        Ok(Self {
            alpha_weight,
            evaluator,
        })
    }

    pub fn value(&self, std_error: f64, adv_error: f64) -> f64 {
        self.alpha_weight * std_error + (1.0 - self.alpha_weight) * adv_error
    }
}

/// One charged evaluation and what the tuner recommended right after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub config: HpConfig,
    pub fidelity: FidelityPoint,
    pub std_error: f64,
    pub adv_error: f64,
    pub objective: f64,
    pub cost: f64,
    /// Cumulative cost including this evaluation.
    pub elapsed: f64,
    pub full_fidelity: bool,
    pub recommendation: HpConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerState {
    pub history: Vec<Observation>,
    pub seed: u64,
    pub budget: f64,
    /// Set when the candidate pool ran out before the budget did.
    pub space_exhausted: bool,
}

impl TunerState {
    fn new(seed: u64, budget: f64) -> Self {
        Self {
            history: Vec::new(),
            seed,
            budget,
            space_exhausted: false,
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.history.last().map_or(0.0, |o| o.elapsed)
    }

    fn budget_left(&self) -> bool {
        self.elapsed() < self.budget
    }

    /// Best full-fidelity observation (earliest on ties).
    pub fn incumbent(&self) -> Option<&Observation> {
        self.history.iter().filter(|o| o.full_fidelity).fold(
            None,
            |best: Option<&Observation>, o| match best {
                Some(b) if b.objective <= o.objective => Some(b),
                _ => Some(o),
            },
        )
    }

    /// Running minimum of full-fidelity observations as `(elapsed, observation)`.
    pub fn incumbent_trace(&self) -> Vec<(f64, Observation)> {
        let mut out: Vec<(f64, Observation)> = Vec::new();
        for o in self.history.iter().filter(|o| o.full_fidelity) {
            if out.last().is_none_or(|(_, b)| o.objective < b.objective) {
                out.push((o.elapsed, *o));
            }
        }
        out
    }

    pub fn recommendation(&self) -> Option<HpConfig> {
        self.history.last().map(|o| o.recommendation)
    }
}

/// Enumerated search problem shared by all tuners.
#[derive(Debug, Clone)]
pub struct Problem {
    pub space: SearchSpace,
    pub configs: Vec<HpConfig>,
    pub fidelities: Vec<FidelityPoint>,
    pub encoder: Encoder,
}

impl Problem {
    pub fn new(space: &SearchSpace) -> Result<Self, TunerError> {
        let configs = enumerate_space(space)?;
        Ok(Self {
            space: space.clone(),
            fidelities: space.fidelity_grid(),
            encoder: Encoder::new(space),
            configs,
        })
    }

    pub fn max_fidelity(&self) -> FidelityPoint {
        self.space.max_fidelity()
    }
}

/// Seeded permutation of `0..n`; the pick order of random search and of the
/// initial designs of the model-based tuners.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Tunables of the model-based tuners.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    /// Random restarts of the first GP fit.
    pub restarts: usize,
    /// Restarts of later fits, which also start from the previous optimum.
    pub refit_restarts: usize,
    pub max_fit_iters: usize,
    /// Hyper-parameters are re-optimized every this many rounds; in between
    /// the GP conditions on new data with the last fitted values.
    pub refit_interval: u64,
    pub noise_floor: f64,
    /// Upper bound on acquisition candidates per round.
    pub max_candidates: usize,
    /// Size of the set of full-fidelity configurations whose minimum the
    /// knowledge gradient tracks.
    pub kg_reference: usize,
    /// Monte-Carlo fantasy draws per candidate (rounded up to even).
    pub fantasies: usize,
    /// Lower bound on the lengthscales of the two fidelity coordinates,
    /// which are encoded in `(0, 1]`. Keeps cheap observations informative
    /// about full fidelity before any full-fidelity data exists.
    pub fidelity_lengthscale_floor: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            restarts: 8,
            refit_restarts: 2,
            max_fit_iters: 40,
            refit_interval: 5,
            noise_floor: 1e-6,
            max_candidates: 4096,
            kg_reference: 64,
            fantasies: 32,
            fidelity_lengthscale_floor: 1.0,
        }
    }
}

struct Runner<'a, 'o> {
    problem: &'a Problem,
    objective: &'a Objective<'o>,
    state: TunerState,
}

impl Runner<'_, '_> {
    fn charge(
        &mut self,
        config: &HpConfig,
        fidelity: FidelityPoint,
    ) -> Result<Observation, TunerError> {
        let ev = self
            .objective
            .evaluator
            .evaluate(config, fidelity)
            .map_err(|message| TunerError::Evaluation {
                config: *config,
                fidelity,
                message,
            })?;
        let obs = Observation {
            config: *config,
            fidelity,
            std_error: ev.std_error,
            adv_error: ev.adv_error,
            objective: self.objective.value(ev.std_error, ev.adv_error),
            cost: ev.cost,
            elapsed: self.state.elapsed() + ev.cost,
            full_fidelity: fidelity == self.problem.max_fidelity(),
            recommendation: *config,
        };
        self.state.history.push(obs);
        Ok(obs)
    }

    fn set_last_recommendation(&mut self, config: HpConfig) {
        if let Some(last) = self.state.history.last_mut() {
            last.recommendation = config;
        }
    }

    fn incumbent_config(&self) -> Option<HpConfig> {
        self.state.incumbent().map(|o| o.config)
    }
}

fn check_budget(budget: f64) -> Result<(), TunerError> {
    if budget > 0.0 && budget.is_finite() {
        Ok(())
    } else {
        Err(TunerError::Invalid(format!(
            "budget must be positive, got {budget}"
        )))
    }
}

/// Full-fidelity evaluations of configurations in seeded random order,
/// without replacement, until the budget is spent.
pub fn random_search(
    problem: &Problem,
    objective: &Objective<'_>,
    budget: f64,
    seed: u64,
) -> Result<TunerState, TunerError> {
    check_budget(budget)?;
    let full = problem.max_fidelity();
    let mut run = Runner {
        problem,
        objective,
        state: TunerState::new(seed, budget),
    };
    let mut order = permutation(problem.configs.len(), seed).into_iter();
    while run.state.budget_left() {
        let Some(i) = order.next() else {
            run.state.space_exhausted = true;
            break;
        };
        run.charge(&problem.configs[i], full)?;
        let inc = run
            .incumbent_config()
            .expect("full-fidelity observation exists");
        run.set_last_recommendation(inc);
    }
    Ok(run.state)
}

fn fit_options(settings: &ModelSettings, seed: u64, warm: Option<KernelParams>) -> FitOptions {
    FitOptions {
        noise: NoiseModel::Learned {
            floor: settings.noise_floor,
        },
        restarts: if warm.is_some() {
            settings.refit_restarts
        } else {
            settings.restarts
        },
        max_iters: settings.max_fit_iters,
        seed,
        warm_start: warm,
        min_lengthscales: vec![
            (CONFIG_DIMS, settings.fidelity_lengthscale_floor),
            (CONFIG_DIMS + 1, settings.fidelity_lengthscale_floor),
        ],
    }
}

/// GP for one round: a full hyper-parameter fit on refit rounds (or without
/// earlier values), else conditioning with the previous hyper-parameters.
fn round_model(
    points: &[EncodedPoint],
    targets: &[f64],
    settings: &ModelSettings,
    seed: u64,
    round: u64,
    warm: &mut Option<KernelParams>,
) -> Result<GpModel, SurrogateError> {
    if let Some(params) = warm.as_ref() {
        if !round.is_multiple_of(settings.refit_interval.max(1)) {
            if let Ok(gp) = GpModel::with_params(points.to_vec(), targets, params.clone()) {
                return Ok(gp);
            }
        }
    }
    let gp = GpModel::fit(
        points.to_vec(),
        targets,
        &fit_options(settings, seed.wrapping_add(round), warm.clone()),
    )?;
    *warm = Some(gp.params().clone());
    Ok(gp)
}

/// Candidate indices for one acquisition round: everything when the pool is
/// small, else a seeded subsample kept in ascending order so ties still go
/// to the lowest index.
fn candidate_subset(pool: usize, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool <= cap {
        (0..pool).collect()
    } else {
        let mut picked = index::sample(rng, pool, cap).into_vec();
        picked.sort_unstable();
        picked
    }
}

/// GP expected-improvement search at full fidelity after a random design.
pub fn bo_ei(
    problem: &Problem,
    objective: &Objective<'_>,
    budget: f64,
    seed: u64,
    init_design: usize,
    settings: &ModelSettings,
) -> Result<TunerState, TunerError> {
    check_budget(budget)?;
    if init_design < 2 {
        return Err(TunerError::Invalid(
            "initial design needs >= 2 points".into(),
        ));
    }
    let full = problem.max_fidelity();
    let n = problem.configs.len();
    let mut run = Runner {
        problem,
        objective,
        state: TunerState::new(seed, budget),
    };
    let order = permutation(n, seed);
    let mut observed = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let encoded: Vec<EncodedPoint> = problem
        .configs
        .iter()
        .map(|c| problem.encoder.encode(c, full))
        .collect();
    let mut points = Vec::new();
    let mut targets = Vec::new();
    let mut warm = None;
    let mut round = 0u64;

    while run.state.budget_left() {
        let unobserved: Vec<usize> = (0..n).filter(|&i| !observed[i]).collect();
        if unobserved.is_empty() {
            run.state.space_exhausted = true;
            break;
        }
        let next = if points.len() < init_design {
            order.iter().copied().find(|&i| !observed[i])
        } else {
            match round_model(&points, &targets, settings, seed, round, &mut warm) {
                Ok(gp) => {
                    let incumbent = targets.iter().copied().fold(f64::INFINITY, f64::min);
                    let subset =
                        candidate_subset(unobserved.len(), settings.max_candidates, &mut rng);
                    let mut best: Option<(usize, f64)> = None;
                    for k in subset {
                        let i = unobserved[k];
                        let ei = expected_improvement(&gp, &encoded[i], incumbent);
                        if best.is_none_or(|(_, b)| ei > b) {
                            best = Some((i, ei));
                        }
                    }
                    best.map(|(i, _)| i)
                }
                Err(e) => {
                    log::warn!("GP fit failed in round {round}, sampling randomly: {e}");
                    order.iter().copied().find(|&i| !observed[i])
                }
            }
        };
        let Some(i) = next else { break };
        observed[i] = true;
        let obs = run.charge(&problem.configs[i], full)?;
        points.push(encoded[i].clone());
        targets.push(obs.objective);
        let inc = run
            .incumbent_config()
            .expect("full-fidelity observation exists");
        run.set_last_recommendation(inc);
        round += 1;
    }
    Ok(run.state)
}

/// One successive-halving bracket: `(configs, epochs)` per rung.
#[derive(Debug, Clone, PartialEq)]
pub struct Bracket {
    pub s: u32,
    pub rungs: Vec<(usize, f64)>,
}

impl Bracket {
    /// Total resource in epochs, `sum n_i * r_i`.
    pub fn resource(&self) -> f64 {
        self.rungs.iter().map(|&(n, r)| n as f64 * r).sum()
    }
}

/// Largest `s` with `eta^s <= r_max`.
pub fn hyperband_s_max(r_max: u32, eta: u32) -> u32 {
    let mut s = 0;
    let mut p = u64::from(eta);
    while p <= u64::from(r_max) {
        s += 1;
        p *= u64::from(eta);
    }
    s
}

/// Bracket schedule for maximum resource `r_max` and reduction factor `eta`,
/// from the most exploratory bracket (`s = s_max`) down to `s = 0`.
pub fn hyperband_schedule(r_max: u32, eta: u32) -> Vec<Bracket> {
    let s_max = hyperband_s_max(r_max, eta);
    let eta_u = u64::from(eta);
    (0..=s_max)
        .rev()
        .map(|s| {
            let eta_s = eta_u.pow(s);
            let n = (u64::from(s_max + 1) * eta_s).div_ceil(u64::from(s + 1));
            let r = f64::from(r_max) / eta_s as f64;
            let rungs = (0..=s)
                .map(|i| {
                    let ni = n / eta_u.pow(i);
                    (ni as usize, r * eta_u.pow(i) as f64)
                })
                .collect();
            Bracket { s, rungs }
        })
        .collect()
}

/// Nearest available epoch level on a log axis (lower level on exact ties).
pub fn snap_epochs(r: f64, levels: &[u32]) -> u32 {
    let mut best = levels[0];
    let mut best_d = f64::INFINITY;
    let mut sorted = levels.to_vec();
    sorted.sort_unstable();
    for &l in &sorted {
        let d = (f64::from(l).ln() - r.ln()).abs();
        if d < best_d - 1e-12 {
            best = l;
            best_d = d;
        }
    }
    best
}

/// HyperBand with epochs as the resource; attack iterations stay at maximum.
/// Every rung trains from scratch and is charged in full.
pub fn hyperband(
    problem: &Problem,
    objective: &Objective<'_>,
    eta: u32,
    budget: f64,
    seed: u64,
) -> Result<TunerState, TunerError> {
    check_budget(budget)?;
    if eta < 2 {
        return Err(TunerError::Invalid(format!("eta must be >= 2, got {eta}")));
    }
    let full = problem.max_fidelity();
    let schedule = hyperband_schedule(full.epochs, eta);
    let mut run = Runner {
        problem,
        objective,
        state: TunerState::new(seed, budget),
    };
    let mut order = permutation(problem.configs.len(), seed).into_iter();
    let mut best_by_level: Option<(FidelityPoint, f64, HpConfig)> = None;

    'outer: loop {
        for bracket in &schedule {
            let mut alive: Vec<usize> = Vec::with_capacity(bracket.rungs[0].0);
            for _ in 0..bracket.rungs[0].0 {
                match order.next() {
                    Some(i) => alive.push(i),
                    None => {
                        run.state.space_exhausted = true;
                        break;
                    }
                }
            }
            if alive.is_empty() {
                break 'outer;
            }
            for (rung, &(_, r)) in bracket.rungs.iter().enumerate() {
                let fidelity = FidelityPoint {
                    epochs: snap_epochs(r, &problem.space.epochs),
                    attack_iters: full.attack_iters,
                };
                let mut scored = Vec::with_capacity(alive.len());
                for &i in &alive {
                    if !run.state.budget_left() {
                        break 'outer;
                    }
                    let obs = run.charge(&problem.configs[i], fidelity)?;
                    let better = match best_by_level {
                        None => true,
                        Some((f, v, _)) => fidelity > f || (fidelity == f && obs.objective < v),
                    };
                    if better {
                        best_by_level = Some((fidelity, obs.objective, obs.config));
                    }
                    run.set_last_recommendation(best_by_level.expect("set above").2);
                    scored.push((i, obs.objective));
                }
                if rung + 1 == bracket.rungs.len() {
                    break;
                }
                // stable sort keeps insertion order among equal objectives
                scored.sort_by(|a, b| a.1.total_cmp(&b.1));
                let keep = alive.len() / eta as usize;
                alive = scored.into_iter().take(keep).map(|(i, _)| i).collect();
                if alive.is_empty() {
                    break;
                }
            }
        }
        if run.state.space_exhausted {
            break;
        }
    }
    Ok(run.state)
}

/// Which fidelity dimensions the multi-fidelity tuner may lower.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FidelityDims {
    pub epochs: bool,
    pub attack_iters: bool,
}

impl FidelityDims {
    pub const BOTH: Self = Self {
        epochs: true,
        attack_iters: true,
    };
    pub const EPOCHS: Self = Self {
        epochs: true,
        attack_iters: false,
    };
    pub const ITERS: Self = Self {
        epochs: false,
        attack_iters: true,
    };
    pub const NONE: Self = Self {
        epochs: false,
        attack_iters: false,
    };

    /// Allowed fidelities, ordered like the space's fidelity grid.
    pub fn allowed(&self, problem: &Problem) -> Vec<FidelityPoint> {
        let full = problem.max_fidelity();
        problem
            .fidelities
            .iter()
            .copied()
            .filter(|f| {
                (self.epochs || f.epochs == full.epochs)
                    && (self.attack_iters || f.attack_iters == full.attack_iters)
            })
            .collect()
    }
}

/// Prior cost shape before any cost is observed:
/// `epochs * (1 + rat/100 * ae/100 * attack_iters)`.
pub fn prior_cost(config: &HpConfig, fidelity: FidelityPoint) -> f64 {
    let adv = f64::from(config.rat_pct) / 100.0 * f64::from(config.ae_pct) / 100.0;
    f64::from(fidelity.epochs) * (1.0 + adv * f64::from(fidelity.attack_iters))
}

/// Prior cost rescaled by the mean observed/prior ratio at each fidelity
/// level, or across all observations for levels not yet seen.
#[derive(Debug, Clone, Default)]
pub struct CostModel {
    per_level: Vec<(FidelityPoint, f64, usize)>,
    total: f64,
    count: usize,
}

impl CostModel {
    pub fn observe(&mut self, config: &HpConfig, fidelity: FidelityPoint, cost: f64) {
        let ratio = cost / prior_cost(config, fidelity);
        self.total += ratio;
        self.count += 1;
        match self.per_level.iter_mut().find(|(f, _, _)| *f == fidelity) {
            Some(entry) => {
                entry.1 += ratio;
                entry.2 += 1;
            }
            None => self.per_level.push((fidelity, ratio, 1)),
        }
    }

    pub fn predict(&self, config: &HpConfig, fidelity: FidelityPoint) -> f64 {
        let scale = match self.per_level.iter().find(|(f, _, _)| *f == fidelity) {
            Some(&(_, sum, n)) => sum / n as f64,
            None if self.count > 0 => self.total / self.count as f64,
            None => 1.0,
        };
        (prior_cost(config, fidelity) * scale).max(f64::MIN_POSITIVE)
    }
}

/// Knowledge gradient of observing a point whose posterior covariance with
/// the reference set is `cov`, with own variance `var` and noise `noise`.
///
/// `means` are the reference set's posterior means; `draws` must be
/// symmetric around zero so the estimate stays non-negative.
pub fn knowledge_gradient(
    means: &[f64],
    cov: &DVector<f64>,
    var: f64,
    noise: f64,
    draws: &[f64],
) -> f64 {
    let denom = (var + noise).sqrt();
    if denom <= 0.0 || draws.is_empty() {
        return 0.0;
    }
    let current = means.iter().copied().fold(f64::INFINITY, f64::min);
    let mut acc = 0.0;
    for &z in draws {
        let mut m = f64::INFINITY;
        for (mu, c) in means.iter().zip(cov.iter()) {
            m = m.min(mu + c / denom * z);
        }
        acc += m;
    }
    (current - acc / draws.len() as f64).max(0.0)
}

/// Acquisition values at or below this count as zero.
const KG_EPS: f64 = 1e-12;

/// Cost-aware multi-fidelity tuner: a joint GP over configuration and
/// fidelity, knowledge gradient of the full-fidelity minimum per unit of
/// predicted cost, and recommendation by posterior mean at full fidelity.
pub fn mf_costaware(
    problem: &Problem,
    objective: &Objective<'_>,
    dims: FidelityDims,
    budget: f64,
    seed: u64,
    init_design: usize,
    settings: &ModelSettings,
) -> Result<TunerState, TunerError> {
    check_budget(budget)?;
    let full = problem.max_fidelity();
    let allowed = dims.allowed(problem);
    let cheapest = *allowed
        .iter()
        .min_by_key(|f| (f.epochs, f.attack_iters))
        .ok_or_else(|| TunerError::Invalid("no allowed fidelity".into()))?;
    let n_cfg = problem.configs.len();
    let n_fid = allowed.len();
    let full_idx = allowed
        .iter()
        .position(|f| *f == full)
        .expect("full fidelity is always allowed");
    let mut run = Runner {
        problem,
        objective,
        state: TunerState::new(seed, budget),
    };
    let order = permutation(n_cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let encoded_full: Vec<EncodedPoint> = problem
        .configs
        .iter()
        .map(|c| problem.encoder.encode(c, full))
        .collect();
    // observed[(config, fidelity level)]
    let mut observed = vec![false; n_cfg * n_fid];
    let mut points: Vec<EncodedPoint> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut costs = CostModel::default();
    let mut warm: Option<KernelParams> = None;
    let mut round = 0u64;
    let half = settings.fantasies.div_ceil(2).max(1);

    let record = |run: &mut Runner<'_, '_>,
                  i: usize,
                  f: usize,
                  observed: &mut Vec<bool>,
                  points: &mut Vec<EncodedPoint>,
                  targets: &mut Vec<f64>,
                  costs: &mut CostModel|
     -> Result<(), TunerError> {
        observed[i * n_fid + f] = true;
        let cfg = problem.configs[i];
        let obs = run.charge(&cfg, allowed[f])?;
        points.push(problem.encoder.encode(&cfg, allowed[f]));
        targets.push(obs.objective);
        costs.observe(&cfg, allowed[f], obs.cost);
        Ok(())
    };

    // best observation so far, preferring higher fidelity, used until a GP exists
    let fallback_recommendation = |state: &TunerState| -> HpConfig {
        let mut best = state.history[0];
        for o in &state.history[1..] {
            if o.fidelity > best.fidelity
                || (o.fidelity == best.fidelity && o.objective < best.objective)
            {
                best = *o;
            }
        }
        best.config
    };

    let cheapest_idx = allowed
        .iter()
        .position(|f| *f == cheapest)
        .expect("cheapest is allowed");
    for &i in order.iter().take(init_design.max(1)) {
        if !run.state.budget_left() {
            break;
        }
        record(
            &mut run,
            i,
            cheapest_idx,
            &mut observed,
            &mut points,
            &mut targets,
            &mut costs,
        )?;
        let rec = fallback_recommendation(&run.state);
        run.set_last_recommendation(rec);
    }

    let fit_and_recommend = |run: &mut Runner<'_, '_>,
                             points: &[EncodedPoint],
                             targets: &[f64],
                             warm: &mut Option<KernelParams>,
                             round: u64|
     -> Option<(GpModel, PosteriorBasis)> {
        if points.len() < 2 {
            return None;
        }
        match round_model(points, targets, settings, seed, round, warm) {
            Ok(gp) => {
                let full_basis = gp.precompute(&encoded_full);
                let mu = &full_basis.means;
                let best = (0..n_cfg)
                    .min_by(|&a, &b| mu[a].total_cmp(&mu[b]).then(a.cmp(&b)))
                    .expect("non-empty space");
                run.set_last_recommendation(problem.configs[best]);
                Some((gp, full_basis))
            }
            Err(e) => {
                log::warn!("GP fit failed in round {round}: {e}");
                None
            }
        }
    };

    while run.state.budget_left() {
        let pool: Vec<usize> = (0..n_cfg * n_fid).filter(|&k| !observed[k]).collect();
        if pool.is_empty() {
            run.state.space_exhausted = true;
            break;
        }
        let fitted = fit_and_recommend(&mut run, &points, &targets, &mut warm, round);
        let choice = match fitted {
            None => {
                // random full-fidelity evaluation
                order
                    .iter()
                    .copied()
                    .find(|&i| !observed[i * n_fid + full_idx])
                    .map(|i| (i, full_idx))
            }
            Some((gp, full_basis)) => {
                let mu = &full_basis.means;
                let mut ranked: Vec<usize> = (0..n_cfg).collect();
                ranked.sort_by(|&a, &b| mu[a].total_cmp(&mu[b]).then(a.cmp(&b)));
                ranked.truncate(settings.kg_reference.max(1));
                let subset = candidate_subset(pool.len(), settings.max_candidates, &mut rng);
                let draws: Vec<f64> = (0..half)
                    .flat_map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        [z, -z]
                    })
                    .collect();
                let basis = full_basis.subset(&ranked);
                let basis_len = basis.len();
                let mut in_reference = vec![false; n_cfg];
                for &i in &ranked {
                    in_reference[i] = true;
                }
                let noise = gp.noise_variance();
                let mut means: Vec<f64> = ranked.iter().map(|&i| mu[i]).collect();
                means.push(0.0);
                let mut best: Option<(usize, f64)> = None;
                let mut cheapest_pick: Option<(usize, f64)> = None;
                for k in subset {
                    let cand = pool[k];
                    let (i, f) = (cand / n_fid, cand % n_fid);
                    let cfg = &problem.configs[i];
                    let x = problem.encoder.encode(cfg, allowed[f]);
                    let cp = gp.cross_point(&x);
                    let mut cov = DVector::from_iterator(
                        basis_len + 1,
                        (0..basis_len)
                            .map(|j| gp.basis_covariance(&basis, j, &cp))
                            .chain(std::iter::once(0.0)),
                    );
                    // the candidate's own configuration at full fidelity joins
                    // the reference set unless it is already in it
                    let kg = if in_reference[i] {
                        knowledge_gradient(
                            &means[..basis_len],
                            &cov.rows(0, basis_len).into_owned(),
                            cp.var,
                            noise,
                            &draws,
                        )
                    } else {
                        cov[basis_len] = gp.basis_covariance(&full_basis, i, &cp);
                        means[basis_len] = mu[i];
                        knowledge_gradient(&means, &cov, cp.var, noise, &draws)
                    };
                    let cost = costs.predict(cfg, allowed[f]);
                    let score = if kg > KG_EPS { kg / cost } else { 0.0 };
                    if best.is_none_or(|(_, b)| score > b) {
                        best = Some((cand, score));
                    }
                    if cheapest_pick.is_none_or(|(_, c)| cost < c) {
                        cheapest_pick = Some((cand, cost));
                    }
                }
                let pick = match best {
                    Some((cand, score)) if score > 0.0 => Some(cand),
                    _ => cheapest_pick.map(|(cand, _)| cand),
                };
                pick.map(|cand| (cand / n_fid, cand % n_fid))
            }
        };
        let Some((i, f)) = choice else { break };
        record(
            &mut run,
            i,
            f,
            &mut observed,
            &mut points,
            &mut targets,
            &mut costs,
        )?;
        let prev = run
            .state
            .history
            .iter()
            .rev()
            .nth(1)
            .map(|o| o.recommendation)
            .unwrap_or(problem.configs[i]);
        run.set_last_recommendation(prev);
        round += 1;
    }
    // refresh the recommendation after the final observation
    if fit_and_recommend(&mut run, &points, &targets, &mut warm, round).is_none()
        && points.len() < 2
        && !run.state.history.is_empty()
    {
        let rec = fallback_recommendation(&run.state);
        run.set_last_recommendation(rec);
    }
    Ok(run.state)
}

/// Which tuner to run, with its own knobs.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerSpec {
    Random,
    BoEi {
        init_design: usize,
    },
    HyperBand {
        eta: u32,
    },
    MultiFidelity {
        dims: FidelityDims,
        init_design: usize,
    },
}

impl OptimizerSpec {
    /// Stable label used in reports and file names.
    pub fn label(&self) -> String {
        match self {
            OptimizerSpec::Random => "random".into(),
            OptimizerSpec::BoEi { .. } => "bo_ei".into(),
            OptimizerSpec::HyperBand { .. } => "hyperband".into(),
            OptimizerSpec::MultiFidelity { dims, .. } => match (dims.epochs, dims.attack_iters) {
                (true, true) => "mf_epochs_iters".into(),
                (true, false) => "mf_epochs".into(),
                (false, true) => "mf_iters".into(),
                (false, false) => "mf_full".into(),
            },
        }
    }

    /// Parse a label produced by [`OptimizerSpec::label`], with default knobs.
    pub fn from_label(label: &str) -> Option<Self> {
        Some(match label {
            "random" => OptimizerSpec::Random,
            "bo_ei" => OptimizerSpec::BoEi { init_design: 5 },
            "hyperband" => OptimizerSpec::HyperBand { eta: 2 },
            "mf_epochs_iters" => OptimizerSpec::MultiFidelity {
                dims: FidelityDims::BOTH,
                init_design: 5,
            },
            "mf_epochs" => OptimizerSpec::MultiFidelity {
                dims: FidelityDims::EPOCHS,
                init_design: 5,
            },
            "mf_iters" => OptimizerSpec::MultiFidelity {
                dims: FidelityDims::ITERS,
                init_design: 5,
            },
            "mf_full" => OptimizerSpec::MultiFidelity {
                dims: FidelityDims::NONE,
                init_design: 5,
            },
            _ => return None,
        })
    }

    /// The six tuners compared by default.
    pub fn standard_set() -> Vec<Self> {
        [
            "mf_epochs_iters",
            "mf_epochs",
            "mf_iters",
            "hyperband",
            "bo_ei",
            "random",
        ]
        .iter()
        .map(|l| Self::from_label(l).expect("known label"))
        .collect()
    }

    pub fn run(
        &self,
        problem: &Problem,
        objective: &Objective<'_>,
        budget: f64,
        seed: u64,
        settings: &ModelSettings,
    ) -> Result<TunerState, TunerError> {
        match *self {
            OptimizerSpec::Random => random_search(problem, objective, budget, seed),
            OptimizerSpec::BoEi { init_design } => {
                bo_ei(problem, objective, budget, seed, init_design, settings)
            }
            OptimizerSpec::HyperBand { eta } => hyperband(problem, objective, eta, budget, seed),
            OptimizerSpec::MultiFidelity { dims, init_design } => mf_costaware(
                problem,
                objective,
                dims,
                budget,
                seed,
                init_design,
                settings,
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_space(n_lr: usize) -> SearchSpace {
        SearchSpace {
            st_lr: (0..n_lr).map(|k| 0.5f64.powi(k as i32 + 1)).collect(),
            st_momentum: vec![0.9],
            st_batch: vec![32],
            at_lr: vec![0.1],
            at_momentum: vec![0.9],
            at_batch: vec![32],
            pgd_alpha: vec![0.01],
            rat_pct: vec![50],
            ae_pct: vec![50],
            epochs: vec![1, 2, 4, 8, 16],
            attack_iters: vec![1, 5, 10, 20],
            epsilons: vec![0.03],
            tie_phases: false,
            collapse_inert: false,
        }
    }

    /// Bowl over the lr index, cheaper at low fidelity.
    fn bowl(c: &HpConfig, f: FidelityPoint) -> Result<Evaluation, String> {
        let k = -c.st_lr.log2() - 1.0;
        let v = ((k - 13.0) / 32.0).powi(2) + 0.05;
        Ok(Evaluation {
            std_error: v,
            adv_error: v,
            cost: f64::from(f.epochs) * f64::from(f.attack_iters) / 320.0,
        })
    }

    #[test]
    fn random_search_budget_for_three() {
        let p = Problem::new(&tiny_space(8)).unwrap();
        let obj = Objective::new(0.5, &bowl).unwrap();
        let st = random_search(&p, &obj, 3.0, 1).unwrap();
        assert_eq!(st.history.len(), 3);
        assert!(!st.space_exhausted);
        let st = random_search(&p, &obj, 100.0, 1).unwrap();
        assert_eq!(st.history.len(), 8);
        assert!(st.space_exhausted);
    }

    #[test]
    fn single_config_space() {
        let p = Problem::new(&tiny_space(1)).unwrap();
        let obj = Objective::new(0.5, &bowl).unwrap();
        let st = random_search(&p, &obj, 10.0, 3).unwrap();
        assert_eq!(st.incumbent().unwrap().config, p.configs[0]);
    }

    #[test]
    fn bo_design_matches_random_search() {
        let p = Problem::new(&tiny_space(32)).unwrap();
        let obj = Objective::new(0.5, &bowl).unwrap();
        let rs = random_search(&p, &obj, 5.0, 9).unwrap();
        let bo = bo_ei(&p, &obj, 5.0, 9, 5, &ModelSettings::default()).unwrap();
        let a: Vec<_> = rs.history.iter().map(|o| o.config).collect();
        let b: Vec<_> = bo.history.iter().map(|o| o.config).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn bo_never_repeats_a_config() {
        let p = Problem::new(&tiny_space(32)).unwrap();
        let obj = Objective::new(0.5, &bowl).unwrap();
        let bo = bo_ei(&p, &obj, 20.0, 4, 5, &ModelSettings::default()).unwrap();
        let mut seen = HashSet::new();
        for o in &bo.history {
            assert!(seen.insert(o.config));
        }
    }

    #[test]
    fn schedule_r16_eta4() {
        let s = hyperband_schedule(16, 4);
        let firsts: Vec<(usize, f64)> = s.iter().map(|b| b.rungs[0]).collect();
        assert_eq!(firsts, vec![(16, 1.0), (6, 4.0), (3, 16.0)]);
        let s = hyperband_schedule(16, 2);
        assert_eq!(s[0].s, 4);
        assert_eq!(s[0].rungs[0], (16, 1.0));
    }

    #[test]
    fn snapping_is_nearest_in_log_space() {
        let levels = [1, 2, 4, 8, 16];
        assert_eq!(snap_epochs(16.0 / 9.0, &levels), 2);
        assert_eq!(snap_epochs(16.0 / 3.0, &levels), 4);
        assert_eq!(snap_epochs(16.0, &levels), 16);
        assert_eq!(snap_epochs(0.3, &levels), 1);
    }

    #[test]
    fn hyperband_survivors_follow_schedule() {
        let p = Problem::new(&tiny_space(32)).unwrap();
        let obj = Objective::new(0.5, &bowl).unwrap();
        let st = hyperband(&p, &obj, 4, 1e9, 2).unwrap();
        // first bracket: 16 at 1 epoch, 4 at 4, 1 at 16
        let ep: Vec<u32> = st
            .history
            .iter()
            .take(21)
            .map(|o| o.fidelity.epochs)
            .collect();
        assert_eq!(&ep[..16], &[1; 16]);
        assert_eq!(&ep[16..20], &[4; 4]);
        assert_eq!(ep[20], 16);
        assert!(st.history.iter().all(|o| o.fidelity.attack_iters == 20));
        assert!(st.space_exhausted);
    }

    #[test]
    fn mf_epochs_only_keeps_iters_at_max() {
        let p = Problem::new(&tiny_space(16)).unwrap();
        let obj = Objective::new(0.5, &bowl).unwrap();
        let st = mf_costaware(
            &p,
            &obj,
            FidelityDims::EPOCHS,
            2.0,
            1,
            5,
            &ModelSettings::default(),
        )
        .unwrap();
        assert!(st.history.len() > 5);
        assert!(st.history.iter().all(|o| o.fidelity.attack_iters == 20));
    }

    #[test]
    fn mf_pinned_only_evaluates_full_fidelity_once_per_config() {
        let p = Problem::new(&tiny_space(16)).unwrap();
        let obj = Objective::new(0.5, &bowl).unwrap();
        let st = mf_costaware(
            &p,
            &obj,
            FidelityDims::NONE,
            8.0,
            1,
            5,
            &ModelSettings::default(),
        )
        .unwrap();
        let mut seen = HashSet::new();
        for o in &st.history {
            assert!(o.full_fidelity);
            assert!(seen.insert(o.config));
        }
    }

    #[test]
    fn flat_posterior_falls_back_to_cheapest() {
        let p = Problem::new(&tiny_space(4)).unwrap();
        let flat = |_: &HpConfig, f: FidelityPoint| -> Result<Evaluation, String> {
            Ok(Evaluation {
                std_error: 0.3,
                adv_error: 0.3,
                cost: f64::from(f.epochs * f.attack_iters),
            })
        };
        let obj = Objective::new(0.5, &flat).unwrap();
        let st = mf_costaware(
            &p,
            &obj,
            FidelityDims::BOTH,
            8.0,
            0,
            2,
            &ModelSettings::default(),
        )
        .unwrap();
        // every post-design pick is the cheapest unobserved point
        for o in &st.history[2..] {
            assert!(
                o.fidelity.epochs * o.fidelity.attack_iters <= 5,
                "{:?}",
                o.fidelity
            );
        }
    }

    #[test]
    fn kg_is_zero_without_covariance() {
        let cov = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(
            knowledge_gradient(&[0.1, 0.2], &cov, 0.0, 0.0, &[1.0, -1.0]),
            0.0
        );
        let cov = DVector::from_vec(vec![0.5, 0.0]);
        assert!(knowledge_gradient(&[0.1, 0.2], &cov, 0.5, 0.0, &[1.0, -1.0]) > 0.0);
    }

    #[test]
    fn cost_model_rescales_prior() {
        let cfg = tiny_space(1);
        let p = Problem::new(&cfg).unwrap();
        let c = p.configs[0];
        let mut m = CostModel::default();
        let f = FidelityPoint::new(2, 5).unwrap();
        assert_eq!(m.predict(&c, f), prior_cost(&c, f));
        m.observe(&c, f, 3.0 * prior_cost(&c, f));
        assert!((m.predict(&c, f) - 3.0 * prior_cost(&c, f)).abs() < 1e-12);
        let g = FidelityPoint::new(4, 5).unwrap();
        assert!((m.predict(&c, g) - 3.0 * prior_cost(&c, g)).abs() < 1e-12);
    }

    #[test]
    fn labels_round_trip() {
        for spec in OptimizerSpec::standard_set() {
            assert_eq!(OptimizerSpec::from_label(&spec.label()), Some(spec));
        }
    }
}
