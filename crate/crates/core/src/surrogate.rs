//! Gaussian-process regression over the joint (configuration, fidelity) space.
//!
//! Inputs are encoded into the unit cube, targets are standardized, and the
//! covariance is a Matérn-5/2 kernel with one length scale per input
//! dimension. Kernel hyper-parameters maximize the log marginal likelihood
//! with a seeded multi-start projected gradient ascent.

use std::f64::consts::LN_10;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::domain::{FidelityPoint, HpConfig, SearchSpace};

pub type EncodedPoint = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("need at least 2 training points, got {0}")]
    TooFewPoints(usize),
    #[error("target {index} is not finite")]
    NonFiniteTarget { index: usize },
    #[error("points have inconsistent dimension")]
    Dimension,
    #[error("covariance is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
}

const SQRT5: f64 = 2.236_067_977_499_79;

/// Number of encoded dimensions for a configuration (fidelity excluded).
pub const CONFIG_DIMS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Range {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Range {
    fn from_values(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Self { lo, hi, log }
    }

    fn scale(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        if self.hi > self.lo {
            ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Maps configurations and fidelities into `[0,1]^(9+2)`.
///
/// Learning rates and PGD step sizes are scaled on a log10 axis, everything
/// else linearly. Fidelities are appended as `epochs/max` and `iters/max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    ranges: [Range; CONFIG_DIMS],
    max_fidelity: FidelityPoint,
}

impl Encoder {
    pub fn new(space: &SearchSpace) -> Self {
        let lin = |v: &[f64]| Range::from_values(v.iter().copied(), false);
        let log = |v: &[f64]| Range::from_values(v.iter().copied(), true);
        let ints = |v: &[u32]| Range::from_values(v.iter().map(|&b| f64::from(b)), false);
        let pct = |v: &[u8]| Range::from_values(v.iter().map(|&b| f64::from(b)), false);
        let (at_lr, at_mom, at_batch) = if space.tie_phases {
            (
                log(&space.st_lr),
                lin(&space.st_momentum),
                ints(&space.st_batch),
            )
        } else {
            (
                log(&space.at_lr),
                lin(&space.at_momentum),
                ints(&space.at_batch),
            )
        };
        Self {
            ranges: [
                log(&space.st_lr),
                lin(&space.st_momentum),
                ints(&space.st_batch),
                at_lr,
                at_mom,
                at_batch,
                log(&space.pgd_alpha),
                pct(&space.rat_pct),
                pct(&space.ae_pct),
            ],
            max_fidelity: space.max_fidelity(),
        }
    }

    pub fn dims(&self) -> usize {
        CONFIG_DIMS + 2
    }

    pub fn max_fidelity(&self) -> FidelityPoint {
        self.max_fidelity
    }

    pub fn encode(&self, config: &HpConfig, fidelity: FidelityPoint) -> EncodedPoint {
        let raw = [
            config.st_lr,
            config.st_momentum,
            f64::from(config.st_batch),
            config.at_lr,
            config.at_momentum,
            f64::from(config.at_batch),
            config.pgd_alpha,
            f64::from(config.rat_pct),
            f64::from(config.ae_pct),
        ];
        let (se, si) = fidelity.normalized(self.max_fidelity);
        let mut out = DVector::zeros(self.dims());
        for (k, (r, v)) in self.ranges.iter().zip(raw).enumerate() {
            out[k] = r.scale(v);
        }
        out[CONFIG_DIMS] = se;
        out[CONFIG_DIMS + 1] = si;
        out
    }
}

/// Kernel hyper-parameters in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_var: f64,
    pub log_noise_var: f64,
}

impl KernelParams {
    pub fn default_for(dims: usize) -> Self {
        Self {
            log_lengthscales: vec![0.5f64.ln(); dims],
            log_signal_var: 0.0,
            log_noise_var: 1e-4f64.ln(),
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_lengthscales.clone();
        v.push(self.log_signal_var);
        v.push(self.log_noise_var);
        v
    }

    fn from_vec(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            log_lengthscales: v[..d].to_vec(),
            log_signal_var: v[d],
            log_noise_var: v[d + 1],
        }
    }
}

/// Matérn-5/2 ARD covariance between two encoded points.
pub fn matern52(a: &[f64], b: &[f64], lengthscales: &[f64], signal_var: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    let r = r2.sqrt();
    signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
}

/// How the observation noise is treated during fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// Noise variance (in standardized target units) held at this value.
    Fixed(f64),
    /// Noise variance optimized, never below `floor`.
    Learned { floor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub noise: NoiseModel,
    pub restarts: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Optional first starting point (e.g. the previous fit's optimum).
    pub warm_start: Option<KernelParams>,
    /// `(dimension, floor)` pairs raising the lower lengthscale bound.
    pub min_lengthscales: Vec<(usize, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            noise: NoiseModel::Learned { floor: 1e-6 },
            restarts: 8,
            max_iters: 60,
            seed: 0,
            warm_start: None,
            min_lengthscales: Vec::new(),
        }
    }
}

const LOG_LS_BOUNDS: (f64, f64) = (-2.0 * LN_10, LN_10); // [0.01, 10]
const LOG_SV_BOUNDS: (f64, f64) = (-2.0 * LN_10, 2.0 * LN_10); // [0.01, 100]
const MAX_JITTER: f64 = 1e-4;

/// Fitted GP posterior. Immutable once built.
#[derive(Debug, Clone)]
pub struct GpModel {
    points: Vec<EncodedPoint>,
    y_mean: f64,
    y_scale: f64,
    params: KernelParams,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    lml: f64,
}

struct Factorized {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

fn covariance(points: &[EncodedPoint], params: &KernelParams) -> DMatrix<f64> {
    let ls: Vec<f64> = params.log_lengthscales.iter().map(|l| l.exp()).collect();
    let sv = params.log_signal_var.exp();
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = sv;
        for j in 0..i {
            let v = matern52(points[i].as_slice(), points[j].as_slice(), &ls, sv);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factorize(mut k: DMatrix<f64>, noise: f64) -> Result<Factorized, SurrogateError> {
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    if let Some(chol) = Cholesky::new(k.clone()) {
        return Ok(Factorized { chol, jitter: 0.0 });
    }
    let mut jitter = 1e-10;
    while jitter <= MAX_JITTER * (1.0 + 1e-9) {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(kj) {
            return Ok(Factorized { chol, jitter });
        }
        jitter *= 10.0;
    }
    Err(SurrogateError::NotPositiveDefinite { jitter: MAX_JITTER })
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Squared coordinate differences of every point pair `j < i`, fixed while
/// hyper-parameters move.
struct PairCache {
    n: usize,
    d: usize,
    sq: Vec<f64>,
}

impl PairCache {
    fn new(points: &[EncodedPoint]) -> Self {
        let n = points.len();
        let d = points.first().map_or(0, |p| p.len());
        let mut sq = Vec::with_capacity(n * n.saturating_sub(1) / 2 * d);
        for i in 0..n {
            for j in 0..i {
                sq.extend(
                    points[i]
                        .iter()
                        .zip(points[j].iter())
                        .map(|(a, b)| (a - b) * (a - b)),
                );
            }
        }
        Self { n, d, sq }
    }

    fn pair(&self, k: usize) -> &[f64] {
        &self.sq[k * self.d..(k + 1) * self.d]
    }

    /// Noise-free covariance and, per pair, the scaled distance `r`.
    fn covariance(&self, inv_ls2: &[f64], sv: f64) -> (DMatrix<f64>, Vec<f64>) {
        let mut k = DMatrix::zeros(self.n, self.n);
        let mut rs = Vec::with_capacity(self.sq.len() / self.d.max(1));
        let mut idx = 0;
        for i in 0..self.n {
            k[(i, i)] = sv;
            for j in 0..i {
                let r2: f64 = self.pair(idx).iter().zip(inv_ls2).map(|(s, w)| s * w).sum();
                let r = r2.sqrt();
                let v = sv * (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp();
                k[(i, j)] = v;
                k[(j, i)] = v;
                rs.push(r);
                idx += 1;
            }
        }
        (k, rs)
    }
}

fn inverse_sq_lengthscales(params: &KernelParams) -> Vec<f64> {
    params
        .log_lengthscales
        .iter()
        .map(|l| (-2.0 * l).exp())
        .collect()
}

fn lml_from(f: &Factorized, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = f.chol.solve(y);
    let lml = -0.5 * y.dot(&alpha)
        - 0.5 * log_det(&f.chol)
        - 0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI).ln();
    (lml, alpha)
}

fn cached_lml(
    cache: &PairCache,
    y: &DVector<f64>,
    params: &KernelParams,
) -> Result<f64, SurrogateError> {
    let (k, _) = cache.covariance(
        &inverse_sq_lengthscales(params),
        params.log_signal_var.exp(),
    );
    let f = factorize(k, params.log_noise_var.exp())?;
    Ok(lml_from(&f, y).0)
}

fn cached_lml_and_gradient(
    cache: &PairCache,
    y: &DVector<f64>,
    params: &KernelParams,
) -> Result<(f64, Vec<f64>), SurrogateError> {
    let inv_ls2 = inverse_sq_lengthscales(params);
    let sv = params.log_signal_var.exp();
    let noise = params.log_noise_var.exp();
    let (k, rs) = cache.covariance(&inv_ls2, sv);
    let f = factorize(k, noise)?;
    let (lml, alpha) = lml_from(&f, y);
    // W = alpha alpha^T - K^-1; dL/dtheta = 0.5 tr(W dK/dtheta)
    let w = &alpha * alpha.transpose() - f.chol.inverse();
    let d = cache.d;
    let mut grad = vec![0.0; d + 2];
    let mut idx = 0;
    for i in 0..cache.n {
        for j in 0..i {
            let r = rs[idx];
            let e = (-SQRT5 * r).exp();
            let common = sv * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e;
            let kij = sv * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e;
            // off-diagonal entries appear twice in the trace
            let wc = w[(i, j)] * common;
            for ((g, s), il) in grad[..d].iter_mut().zip(cache.pair(idx)).zip(&inv_ls2) {
                *g += wc * s * il;
            }
            grad[d] += w[(i, j)] * kij;
            idx += 1;
        }
        grad[d] += 0.5 * w[(i, i)] * sv;
    }
    grad[d + 1] = 0.5 * w.trace() * noise;
    Ok((lml, grad))
}

/// Log marginal likelihood of standardized targets `y` and its gradient with
/// respect to `[log lengthscales.., log signal var, log noise var]`.
pub fn log_marginal_likelihood(
    points: &[EncodedPoint],
    y: &DVector<f64>,
    params: &KernelParams,
) -> Result<(f64, Vec<f64>), SurrogateError> {
    cached_lml_and_gradient(&PairCache::new(points), y, params)
}

fn standardize(targets: &[f64]) -> (DVector<f64>, f64, f64) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let y = DVector::from_iterator(targets.len(), targets.iter().map(|t| (t - mean) / scale));
    (y, mean, scale)
}

fn bounds(dims: usize, noise: NoiseModel, min_lengthscales: &[(usize, f64)]) -> Vec<(f64, f64)> {
    let mut b = vec![LOG_LS_BOUNDS; dims];
    for &(k, floor) in min_lengthscales {
        if let Some(r) = b.get_mut(k) {
            r.0 = r.0.max(floor.ln()).min(r.1);
        }
    }
    b.push(LOG_SV_BOUNDS);
    b.push(match noise {
        NoiseModel::Fixed(v) => {
            let l = if v > 0.0 { v.ln() } else { f64::NEG_INFINITY };
            (l, l)
        }
        NoiseModel::Learned { floor } => (floor.max(1e-12).ln(), 0.0),
    });
    b
}

fn project(theta: &mut [f64], bounds: &[(f64, f64)]) {
    for (t, (lo, hi)) in theta.iter_mut().zip(bounds) {
        if lo == hi {
            *t = *lo;
        } else {
            *t = t.clamp(*lo, *hi);
        }
    }
}

/// Projected gradient ascent with backtracking; returns the best point found.
fn ascend(
    cache: &PairCache,
    y: &DVector<f64>,
    start: Vec<f64>,
    bounds: &[(f64, f64)],
    max_iters: usize,
) -> Option<(f64, Vec<f64>)> {
    let mut theta = start;
    project(&mut theta, bounds);
    let (mut value, mut grad) =
        cached_lml_and_gradient(cache, y, &KernelParams::from_vec(&theta)).ok()?;
    let mut step = 0.5;
    for _ in 0..max_iters {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-6 {
            break;
        }
        let mut improved = false;
        while step > 1e-6 {
            let mut cand: Vec<f64> = theta
                .iter()
                .zip(&grad)
                .map(|(t, g)| t + step * g / gnorm)
                .collect();
            project(&mut cand, bounds);
            let params = KernelParams::from_vec(&cand);
            if cached_lml(cache, y, &params).is_ok_and(|v| v > value) {
                if let Ok((v, g)) = cached_lml_and_gradient(cache, y, &params) {
                    theta = cand;
                    value = v;
                    grad = g;
                    improved = true;
                    step *= 1.5;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some((value, theta))
}

impl GpModel {
    /// Fit kernel hyper-parameters and factorize the training covariance.
    pub fn fit(
        points: Vec<EncodedPoint>,
        targets: &[f64],
        options: &FitOptions,
    ) -> Result<Self, SurrogateError> {
        if points.len() < 2 || points.len() != targets.len() {
            return Err(SurrogateError::TooFewPoints(
                points.len().min(targets.len()),
            ));
        }
        if let Some(index) = targets.iter().position(|t| !t.is_finite()) {
            return Err(SurrogateError::NonFiniteTarget { index });
        }
        let dims = points[0].len();
        if points.iter().any(|p| p.len() != dims) {
            return Err(SurrogateError::Dimension);
        }
        let (y, _, _) = standardize(targets);
        let bounds = bounds(dims, options.noise, &options.min_lengthscales);
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let mut starts = Vec::with_capacity(options.restarts.max(1));
        let mut first = options
            .warm_start
            .clone()
            .filter(|p| p.log_lengthscales.len() == dims)
            .unwrap_or_else(|| KernelParams::default_for(dims))
            .to_vec();
        if let NoiseModel::Learned { floor } = options.noise {
            first[dims + 1] = first[dims + 1].max(floor.max(1e-12).ln());
        }
        starts.push(first);
        while starts.len() < options.restarts.max(1) {
            let s: Vec<f64> = bounds
                .iter()
                .map(|&(lo, hi)| {
                    if lo < hi {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    }
                })
                .collect();
            starts.push(s);
        }
        let cache = PairCache::new(&points);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for start in starts {
            if let Some((v, theta)) = ascend(&cache, &y, start, &bounds, options.max_iters) {
                if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                    best = Some((v, theta));
                }
            }
        }
        let (lml, theta) = match best {
            Some(b) => b,
            None => {
                return Err(SurrogateError::NotPositiveDefinite { jitter: MAX_JITTER });
            }
        };
        Self::with_params(points, targets, KernelParams::from_vec(&theta)).map(|mut m| {
            m.lml = lml;
            m
        })
    }

    /// Condition on data with fixed kernel hyper-parameters.
    pub fn with_params(
        points: Vec<EncodedPoint>,
        targets: &[f64],
        params: KernelParams,
    ) -> Result<Self, SurrogateError> {
        if points.is_empty() || points.len() != targets.len() {
            return Err(SurrogateError::TooFewPoints(
                points.len().min(targets.len()),
            ));
        }
        let (y, y_mean, y_scale) = standardize(targets);
        let k = covariance(&points, &params);
        let f = factorize(k, params.log_noise_var.exp())?;
        let alpha = f.chol.solve(&y);
        let lml = -0.5 * y.dot(&alpha)
            - 0.5 * log_det(&f.chol)
            - 0.5 * points.len() as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(Self {
            points,
            y_mean,
            y_scale,
            params,
            jitter: f.jitter,
            chol: f.chol,
            alpha,
            lml,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Signal variance in target units.
    pub fn signal_variance(&self) -> f64 {
        self.params.log_signal_var.exp() * self.y_scale * self.y_scale
    }

    /// Observation noise variance in target units (jitter included).
    pub fn noise_variance(&self) -> f64 {
        (self.params.log_noise_var.exp() + self.jitter) * self.y_scale * self.y_scale
    }

    pub fn prior_mean(&self) -> f64 {
        self.y_mean
    }

    fn lengthscales(&self) -> Vec<f64> {
        self.params
            .log_lengthscales
            .iter()
            .map(|l| l.exp())
            .collect()
    }

    fn kernel_column(&self, x: &EncodedPoint, ls: &[f64]) -> DVector<f64> {
        let sv = self.params.log_signal_var.exp();
        DVector::from_iterator(
            self.points.len(),
            self.points
                .iter()
                .map(|p| matern52(p.as_slice(), x.as_slice(), ls, sv)),
        )
    }

    /// `L^-1 k(X, x)`, the whitened cross-covariance used by all posterior terms.
    fn whitened(&self, x: &EncodedPoint, ls: &[f64]) -> DVector<f64> {
        let kx = self.kernel_column(x, ls);
        self.chol
            .l_dirty()
            .solve_lower_triangular(&kx)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// Posterior mean and latent-function variance at `x`.
    pub fn predict(&self, x: &EncodedPoint) -> (f64, f64) {
        let ls = self.lengthscales();
        let kx = self.kernel_column(x, &ls);
        let mean = self.y_mean + self.y_scale * kx.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kx)
            .expect("Cholesky factor has a positive diagonal");
        let var = (self.params.log_signal_var.exp() - v.norm_squared()).max(0.0);
        (mean, var * self.y_scale * self.y_scale)
    }

    /// Posterior means and full covariance at a set of points.
    pub fn predict_joint(&self, xs: &[EncodedPoint]) -> (DVector<f64>, DMatrix<f64>) {
        let ls = self.lengthscales();
        let sv = self.params.log_signal_var.exp();
        let ws: Vec<DVector<f64>> = xs.iter().map(|x| self.whitened(x, &ls)).collect();
        let mut mean = DVector::zeros(xs.len());
        let mut cov = DMatrix::zeros(xs.len(), xs.len());
        let s2 = self.y_scale * self.y_scale;
        for i in 0..xs.len() {
            mean[i] = self.y_mean + self.y_scale * self.kernel_column(&xs[i], &ls).dot(&self.alpha);
            for j in 0..=i {
                let prior = matern52(xs[i].as_slice(), xs[j].as_slice(), &ls, sv);
                let mut c = (prior - ws[i].dot(&ws[j])) * s2;
                if i == j {
                    c = c.max(0.0);
                }
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        (mean, cov)
    }

    /// Precomputed whitened cross-covariances for repeated covariance queries.
    pub fn precompute(&self, xs: &[EncodedPoint]) -> PosteriorBasis {
        let ls = self.lengthscales();
        let (whitened, means) = xs
            .iter()
            .map(|x| {
                let kx = self.kernel_column(x, &ls);
                let mean = self.y_mean + self.y_scale * kx.dot(&self.alpha);
                (self.whiten(kx), mean)
            })
            .unzip();
        PosteriorBasis {
            whitened,
            points: xs.to_vec(),
            means,
        }
    }

    fn whiten(&self, kx: DVector<f64>) -> DVector<f64> {
        let mut w = kx;
        self.chol.l_dirty().solve_lower_triangular_mut(&mut w);
        w
    }

    /// Posterior quantities of `x` reused across covariance queries.
    pub fn cross_point(&self, x: &EncodedPoint) -> CrossPoint {
        let ls = self.lengthscales();
        let sv = self.params.log_signal_var.exp();
        let kx = self.kernel_column(x, &ls);
        let mean = self.y_mean + self.y_scale * kx.dot(&self.alpha);
        let whitened = self.whiten(kx);
        let var = (sv - whitened.norm_squared()).max(0.0) * self.y_scale * self.y_scale;
        CrossPoint {
            x: x.clone(),
            whitened,
            mean,
            var,
            lengthscales: ls,
        }
    }

    /// Posterior covariance between basis entry `j` and a cross point.
    pub fn basis_covariance(&self, basis: &PosteriorBasis, j: usize, cp: &CrossPoint) -> f64 {
        let sv = self.params.log_signal_var.exp();
        let prior = matern52(
            basis.points[j].as_slice(),
            cp.x.as_slice(),
            &cp.lengthscales,
            sv,
        );
        (prior - basis.whitened[j].dot(&cp.whitened)) * self.y_scale * self.y_scale
    }

    /// Posterior covariance between each basis point and `x`, plus the
    /// posterior mean and variance of `x` itself.
    pub fn cross_covariance(
        &self,
        basis: &PosteriorBasis,
        x: &EncodedPoint,
    ) -> (DVector<f64>, f64, f64) {
        let cp = self.cross_point(x);
        let cov = DVector::from_iterator(
            basis.len(),
            (0..basis.len()).map(|j| self.basis_covariance(basis, j, &cp)),
        );
        (cov, cp.mean, cp.var)
    }
}

/// A query point with its whitened cross-covariance cached.
#[derive(Debug, Clone)]
pub struct CrossPoint {
    x: EncodedPoint,
    whitened: DVector<f64>,
    lengthscales: Vec<f64>,
    pub mean: f64,
    pub var: f64,
}

/// Reference points with their whitened cross-covariances cached.
#[derive(Debug, Clone)]
pub struct PosteriorBasis {
    points: Vec<EncodedPoint>,
    whitened: Vec<DVector<f64>>,
    pub means: Vec<f64>,
}

impl PosteriorBasis {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The entries at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> PosteriorBasis {
        PosteriorBasis {
            points: indices.iter().map(|&i| self.points[i].clone()).collect(),
            whitened: indices.iter().map(|&i| self.whitened[i].clone()).collect(),
            means: indices.iter().map(|&i| self.means[i]).collect(),
        }
    }
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal parameters are valid")
}

/// Expected improvement below `incumbent` for a Gaussian with the given
/// mean and standard deviation (minimization).
pub fn expected_improvement_gaussian(mean: f64, sd: f64, incumbent: f64) -> f64 {
    if sd < 1e-12 {
        return (incumbent - mean).max(0.0);
    }
    let n = standard_normal();
    let gamma = (incumbent - mean) / sd;
    (sd * (gamma * n.cdf(gamma) + n.pdf(gamma))).max(0.0)
}

pub fn expected_improvement(model: &GpModel, x: &EncodedPoint, incumbent: f64) -> f64 {
    let (m, v) = model.predict(x);
    expected_improvement_gaussian(m, v.sqrt(), incumbent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn pts1(xs: &[f64]) -> Vec<EncodedPoint> {
        xs.iter().map(|&x| DVector::from_vec(vec![x])).collect()
    }

    #[test]
    fn ei_at_mean_with_unit_sd() {
        let ei = expected_improvement_gaussian(0.0, 1.0, 0.0);
        assert!((ei - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert_eq!(expected_improvement_gaussian(0.3, 0.0, 0.3), 0.0);
        assert!((expected_improvement_gaussian(0.1, 0.0, 0.3) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ei_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mu, sd, f) = (0.2, 0.5, 0.4);
        let n = 1_000_000;
        let mc: f64 = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (f - (mu + sd * z)).max(0.0)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mc - expected_improvement_gaussian(mu, sd, f)).abs() < 1e-3);
    }

    #[test]
    fn ei_non_increasing_in_mean() {
        let mut last = f64::INFINITY;
        for k in 0..200 {
            let mu = -2.0 + 0.02 * k as f64;
            let ei = expected_improvement_gaussian(mu, 0.7, 0.0);
            assert!(ei <= last + 1e-15 && ei >= 0.0);
            last = ei;
        }
    }

    #[test]
    fn kernel_is_stationary() {
        let ls = [0.3, 1.2];
        let a = [0.1, 0.2];
        let b = [0.4, 0.9];
        let shift = [0.25, -0.5];
        let a2: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let b2: Vec<f64> = b.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let k1 = matern52(&a, &b, &ls, 1.7);
        let k2 = matern52(&a2, &b2, &ls, 1.7);
        assert!((k1 - k2).abs() < 1e-14);
        assert_eq!(matern52(&a, &a, &ls, 1.7), 1.7);
    }

    #[test]
    fn lengthscale_floor_holds_on_rough_data() {
        let xs: Vec<f64> = (0..12).map(|i| f64::from(i) / 11.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (25.0 * x).sin()).collect();
        let free = GpModel::fit(pts1(&xs), &ys, &FitOptions::default()).unwrap();
        assert!(free.params().log_lengthscales[0] < 0.5f64.ln());
        let opts = FitOptions {
            min_lengthscales: vec![(0, 0.5)],
            ..FitOptions::default()
        };
        let floored = GpModel::fit(pts1(&xs), &ys, &opts).unwrap();
        assert!(floored.params().log_lengthscales[0] >= 0.5f64.ln() - 1e-12);
    }

    #[test]
    fn zero_noise_fit_interpolates() {
        let xs = [0.0, 0.25, 0.5, 0.75, 1.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| (3.0 * x).sin()).collect();
        let opts = FitOptions {
            noise: NoiseModel::Fixed(0.0),
            ..FitOptions::default()
        };
        let gp = GpModel::fit(pts1(&xs), &ys, &opts).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            let (m, v) = gp.predict(&DVector::from_vec(vec![*x]));
            assert!((m - y).abs() < 1e-6, "{m} vs {y}");
            assert!(v < 1e-6);
        }
    }

    #[test]
    fn conflicting_duplicates_are_absorbed_by_noise() {
        let gp = GpModel::fit(pts1(&[0.5, 0.5]), &[0.0, 1.0], &FitOptions::default()).unwrap();
        let (m, _) = gp.predict(&DVector::from_vec(vec![0.5]));
        assert!(m > 0.0 && m < 1.0);
    }

    #[test]
    fn far_points_revert_to_prior() {
        let params = KernelParams {
            log_lengthscales: vec![0.1f64.ln()],
            log_signal_var: 0.0,
            log_noise_var: 1e-6f64.ln(),
        };
        let gp = GpModel::with_params(pts1(&[0.0, 0.1, 0.2]), &[1.0, 2.0, 4.0], params).unwrap();
        let (m, v) = gp.predict(&DVector::from_vec(vec![50.0]));
        assert!((m - gp.prior_mean()).abs() < 1e-9);
        assert!((v - gp.signal_variance()).abs() < 1e-9);
    }

    #[test]
    fn posterior_matches_dense_solve() {
        let xs = [0.0, 0.4, 1.0];
        let ys = [0.3, -0.2, 0.5];
        let noise = 0.01f64;
        let params = KernelParams {
            log_lengthscales: vec![0.5f64.ln()],
            log_signal_var: 0.0,
            log_noise_var: noise.ln(),
        };
        let gp = GpModel::with_params(pts1(&xs), &ys, params).unwrap();
        // independent computation in standardized units
        let mean = ys.iter().sum::<f64>() / 3.0;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        let y = nalgebra::Vector3::from_iterator(ys.iter().map(|v| (v - mean) / sd));
        let k = |a: f64, b: f64| matern52(&[a], &[b], &[0.5], 1.0);
        let km =
            nalgebra::Matrix3::from_fn(|i, j| k(xs[i], xs[j]) + if i == j { noise } else { 0.0 });
        let q = 0.7;
        let ks = nalgebra::Vector3::from_fn(|i, _| k(xs[i], q));
        let inv = km.try_inverse().unwrap();
        let m_ref = mean + sd * (ks.transpose() * inv * y)[0];
        let v_ref = (1.0 - (ks.transpose() * inv * ks)[0]) * sd * sd;
        let (m, v) = gp.predict(&DVector::from_vec(vec![q]));
        assert!((m - m_ref).abs() < 1e-10);
        assert!((v - v_ref).abs() < 1e-10);
        let (jm, jc) = gp.predict_joint(&[DVector::from_vec(vec![q])]);
        assert!((jm[0] - m_ref).abs() < 1e-10 && (jc[(0, 0)] - v_ref).abs() < 1e-10);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<EncodedPoint> = (0..8)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(0.0..1.0)))
            .collect();
        let y = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
        let base = KernelParams {
            log_lengthscales: vec![-0.5, 0.1, -1.0],
            log_signal_var: 0.2,
            log_noise_var: -3.0,
        };
        let (_, grad) = log_marginal_likelihood(&points, &y, &base).unwrap();
        let theta = base.to_vec();
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let fu = log_marginal_likelihood(&points, &y, &KernelParams::from_vec(&up))
                .unwrap()
                .0;
            let fd = log_marginal_likelihood(&points, &y, &KernelParams::from_vec(&dn))
                .unwrap()
                .0;
            let num = (fu - fd) / (2.0 * h);
            let rel = (num - grad[k]).abs() / num.abs().max(grad[k].abs()).max(1e-8);
            assert!(rel < 1e-3, "param {k}: {num} vs {}", grad[k]);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let xs = [0.1, 0.3, 0.35, 0.8, 0.9];
        let ys = [1.0, 0.2, 0.1, 0.7, 0.9];
        let a = GpModel::fit(pts1(&xs), &ys, &FitOptions::default()).unwrap();
        let b = GpModel::fit(pts1(&xs), &ys, &FitOptions::default()).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn too_few_points_rejected() {
        assert!(matches!(
            GpModel::fit(pts1(&[0.1]), &[1.0], &FitOptions::default()),
            Err(SurrogateError::TooFewPoints(1))
        ));
        assert!(matches!(
            GpModel::fit(pts1(&[0.1, 0.2]), &[1.0, f64::NAN], &FitOptions::default()),
            Err(SurrogateError::NonFiniteTarget { index: 1 })
        ));
    }

    #[test]
    fn encoder_is_unit_cube_and_injective() {
        let space = SearchSpace {
            collapse_inert: true,
            ..SearchSpace::reference_grid()
        };
        let enc = Encoder::new(&space);
        let configs = crate::domain::enumerate_space(&space).unwrap();
        let mut seen = std::collections::HashSet::new();
        for c in &configs {
            let e = enc.encode(c, space.max_fidelity());
            assert!(e.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(seen.insert(e.iter().map(|v| v.to_bits()).collect::<Vec<_>>()));
        }
        let e = enc.encode(&configs[0], space.max_fidelity());
        assert_eq!((e[9], e[10]), (1.0, 1.0));
    }
}
