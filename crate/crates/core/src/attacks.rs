//! L-infinity adversarial perturbations (FGSM and PGD) against any classifier
//! that exposes per-example losses and input gradients.
//!
//! Inputs are batches stored as `n x d` matrices, one example per row, with
//! every coordinate in `[0, 1]`. All attacks keep `|delta| <= epsilon`
//! componentwise and clip `x + delta` back into the valid input range.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::domain::AttackSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("non-finite input gradient in row {row} of the attacked batch")]
    NonFiniteGradient { row: usize },
    #[error("non-finite input gradient in row {row} at PGD iteration {iteration}")]
    NonFinitePgdGradient { iteration: u32, row: usize },
    #[error("invalid attack parameters: {0}")]
    InvalidSpec(String),
}

/// A differentiable loss over a batch of inputs.
pub trait GradientModel {
    /// Loss of every example (row) of the batch.
    fn example_losses(&self, inputs: &DMatrix<f64>, labels: &[usize]) -> DVector<f64>;

    /// Gradient of each example's loss with respect to its own input row.
    /// Same shape as `inputs`.
    fn input_gradient(&self, inputs: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64>;

    /// Summed loss over the batch; `input_gradient` is its gradient.
    fn loss(&self, inputs: &DMatrix<f64>, labels: &[usize]) -> f64 {
        self.example_losses(inputs, labels).sum()
    }
}

/// An additive perturbation, same shape as the attacked batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: DMatrix<f64>,
}

impl Perturbation {
    pub fn zeros_like(x: &DMatrix<f64>) -> Self {
        Self {
            delta: DMatrix::zeros(x.nrows(), x.ncols()),
        }
    }

    pub fn linf(&self) -> f64 {
        self.delta.amax()
    }

    /// `x + delta`.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x + &self.delta
    }
}

/// How PGD initializes the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PgdInit {
    #[default]
    Zero,
    /// Uniform in the epsilon ball.
    UniformRandom,
}

/// PGD ascent step: `alpha * sign(g)` (standard L-inf PGD) or `alpha * g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    #[default]
    Sign,
    RawGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PgdOptions {
    pub init: PgdInit,
    pub step: StepRule,
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

/// Componentwise clamp into `[-epsilon, epsilon]`.
pub fn project_linf(delta: &DMatrix<f64>, epsilon: f64) -> DMatrix<f64> {
    delta.map(|d| d.clamp(-epsilon, epsilon))
}

fn project_in_place(delta: &mut DMatrix<f64>, epsilon: f64) {
    delta.apply(|d| *d = d.clamp(-epsilon, epsilon));
}

/// Shrinks `delta` so that `x + delta` stays in `[0, 1]`.
fn clip_to_range(x: &DMatrix<f64>, delta: &mut DMatrix<f64>) {
    delta.zip_apply(x, |d, xi| {
        let moved = xi + *d;
        if moved > 1.0 {
            *d = 1.0 - xi;
        } else if moved < 0.0 {
            *d = -xi;
        }
    });
}

fn first_non_finite_row(g: &DMatrix<f64>) -> Option<usize> {
    g.row_iter()
        .position(|row| row.iter().any(|v| !v.is_finite()))
}

/// Fast gradient sign method: `delta = epsilon * sign(grad_x L(x, y))`,
/// with `sign(0) = 0`, followed by range clipping.
pub fn fgsm<M: GradientModel + ?Sized>(
    model: &M,
    x: &DMatrix<f64>,
    y: &[usize],
    epsilon: f64,
) -> Result<Perturbation, AttackError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(AttackError::InvalidSpec(format!("epsilon {epsilon}")));
    }
    let grad = model.input_gradient(x, y);
    if let Some(row) = first_non_finite_row(&grad) {
        return Err(AttackError::NonFiniteGradient { row });
    }
    let mut delta = grad.map(|g| epsilon * sign(g));
    clip_to_range(x, &mut delta);
    Ok(Perturbation { delta })
}

/// Projected gradient ascent: `spec.iters` rounds of
/// `delta <- P(delta + step)` followed by range clipping.
///
/// With one iteration, zero init and `alpha >= epsilon` the result is
/// bit-identical to [`fgsm`].
pub fn pgd<M: GradientModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &DMatrix<f64>,
    y: &[usize],
    spec: &AttackSpec,
    options: PgdOptions,
    rng: &mut R,
) -> Result<Perturbation, AttackError> {
    spec.validate()
        .map_err(|e| AttackError::InvalidSpec(e.to_string()))?;
    let eps = spec.epsilon;
    let mut delta = match options.init {
        PgdInit::Zero => DMatrix::zeros(x.nrows(), x.ncols()),
        PgdInit::UniformRandom if eps > 0.0 => {
            DMatrix::from_fn(x.nrows(), x.ncols(), |_, _| rng.random_range(-eps..=eps))
        }
        PgdInit::UniformRandom => DMatrix::zeros(x.nrows(), x.ncols()),
    };
    clip_to_range(x, &mut delta);
    for iteration in 0..spec.iters {
        let adv = x + &delta;
        let grad = model.input_gradient(&adv, y);
        if let Some(row) = first_non_finite_row(&grad) {
            return Err(AttackError::NonFinitePgdGradient { iteration, row });
        }
        match options.step {
            StepRule::Sign => delta.zip_apply(&grad, |d, g| *d += spec.alpha * sign(g)),
            StepRule::RawGradient => delta.zip_apply(&grad, |d, g| *d += spec.alpha * g),
        }
        project_in_place(&mut delta, eps);
        clip_to_range(x, &mut delta);
    }
    Ok(Perturbation { delta })
}

/// Largest relative error between `model.input_gradient` and central finite
/// differences of the summed loss with step `h`.
///
/// Entries where both derivatives are below `1e-7` in magnitude are compared
/// in absolute terms instead.
pub fn input_gradient_check<M: GradientModel + ?Sized>(
    model: &M,
    x: &DMatrix<f64>,
    y: &[usize],
    h: f64,
) -> f64 {
    let analytic = model.input_gradient(x, y);
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = model.loss(&probe, y);
            probe[(i, j)] = orig - h;
            let down = model.loss(&probe, y);
            probe[(i, j)] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[(i, j)], numeric));
        }
    }
    worst
}

pub(crate) fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// `L(x) = w . x` per example; labels are ignored.
#[derive(Debug, Clone)]
pub struct LinearLoss {
    pub weights: DVector<f64>,
}

impl GradientModel for LinearLoss {
    fn example_losses(&self, inputs: &DMatrix<f64>, _labels: &[usize]) -> DVector<f64> {
        inputs * &self.weights
    }

    fn input_gradient(&self, inputs: &DMatrix<f64>, _labels: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(inputs.nrows(), inputs.ncols(), |_, j| self.weights[j])
    }
}

/// `L(x) = 0.5 * |x - c|^2` per example; labels are ignored.
#[derive(Debug, Clone)]
pub struct QuadraticLoss {
    pub center: DVector<f64>,
}

impl GradientModel for QuadraticLoss {
    fn example_losses(&self, inputs: &DMatrix<f64>, _labels: &[usize]) -> DVector<f64> {
        DVector::from_iterator(
            inputs.nrows(),
            inputs
                .row_iter()
                .map(|r| 0.5 * (r.transpose() - &self.center).norm_squared()),
        )
    }

    fn input_gradient(&self, inputs: &DMatrix<f64>, _labels: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(inputs.nrows(), inputs.ncols(), |i, j| {
            inputs[(i, j)] - self.center[j]
        })
    }
}
