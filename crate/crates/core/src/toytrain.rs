//! Desk-scale training engine used to generate evaluation datasets.
//!
//! A one-hidden-layer softmax classifier with hand-written backpropagation is
//! trained in two phases: plain momentum SGD on clean data, followed by
//! adversarial training where a prefix of every batch is replaced by PGD
//! examples crafted against the current model. The split between the phases
//! is governed by `rat_pct`, the adversarial share of each batch by `ae_pct`.

use std::collections::HashSet;
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::attacks::{self, AttackError, GradientModel, PgdOptions};
use crate::domain::{
    enumerate_space, AttackSpec, DatasetBuilder, DomainError, EvalRecord, FidelityPoint, HpConfig,
    RecordKey, SearchSpace, TabularDataset,
};

/// Loss values above this abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Standard,
    Adversarial,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Standard => "standard",
            Phase::Adversarial => "adversarial",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training diverged in {phase} phase (epoch {epoch}, batch {batch}, loss {loss})")]
    Diverged {
        phase: Phase,
        epoch: u32,
        batch: usize,
        loss: f64,
    },
    #[error("attack failed in {phase} phase (epoch {epoch}, batch {batch}): {source}")]
    Attack {
        phase: Phase,
        epoch: u32,
        batch: usize,
        source: AttackError,
    },
    #[error("invalid training setup: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("no seeds given")]
    NoSeeds,
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    /// No nonlinearity; the network is then a linear classifier.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden + self.hidden + self.hidden * self.classes + self.classes
    }
}

/// Input -> hidden (activation) -> softmax classifier with flat parameter storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMlp {
    arch: Architecture,
    params: Vec<f64>,
}

/// Intermediate values of a forward pass.
struct Forward {
    pre_hidden: DMatrix<f64>,
    hidden: DMatrix<f64>,
    probs: DMatrix<f64>,
    losses: DVector<f64>,
}

impl ToyMlp {
    /// Scaled-uniform (`+-sqrt(6 / (fan_in + fan_out))`) weights, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut params = vec![0.0; arch.param_count()];
        let a1 = (6.0 / (arch.input_dim + arch.hidden) as f64).sqrt();
        let a2 = (6.0 / (arch.hidden + arch.classes) as f64).sqrt();
        let n_w1 = arch.input_dim * arch.hidden;
        let w2_start = n_w1 + arch.hidden;
        let n_w2 = arch.hidden * arch.classes;
        for p in &mut params[..n_w1] {
            *p = rng.random_range(-a1..=a1);
        }
        for p in &mut params[w2_start..w2_start + n_w2] {
            *p = rng.random_range(-a2..=a2);
        }
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self, TrainError> {
        if params.len() != arch.param_count() {
            return Err(TrainError::Invalid(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offsets(&self) -> [usize; 4] {
        let a = &self.arch;
        let w1 = 0;
        let b1 = w1 + a.input_dim * a.hidden;
        let w2 = b1 + a.hidden;
        let b2 = w2 + a.hidden * a.classes;
        [w1, b1, w2, b2]
    }

    fn w1(&self) -> DMatrixView<'_, f64> {
        let [o, ..] = self.offsets();
        DMatrixView::from_slice(
            &self.params[o..o + self.arch.input_dim * self.arch.hidden],
            self.arch.input_dim,
            self.arch.hidden,
        )
    }

    fn b1(&self) -> DVectorView<'_, f64> {
        let [_, o, ..] = self.offsets();
        DVectorView::from_slice(&self.params[o..o + self.arch.hidden], self.arch.hidden)
    }

    fn w2(&self) -> DMatrixView<'_, f64> {
        let [_, _, o, _] = self.offsets();
        DMatrixView::from_slice(
            &self.params[o..o + self.arch.hidden * self.arch.classes],
            self.arch.hidden,
            self.arch.classes,
        )
    }

    fn b2(&self) -> DVectorView<'_, f64> {
        let [.., o] = self.offsets();
        DVectorView::from_slice(&self.params[o..o + self.arch.classes], self.arch.classes)
    }

    fn forward(&self, x: &DMatrix<f64>, labels: &[usize]) -> Forward {
        let act = self.arch.activation;
        let mut pre_hidden = x * self.w1();
        let b1 = self.b1();
        for mut row in pre_hidden.row_iter_mut() {
            row += b1.transpose();
        }
        let hidden = pre_hidden.map(|z| act.apply(z));
        let mut logits = &hidden * self.w2();
        let b2 = self.b2();
        for mut row in logits.row_iter_mut() {
            row += b2.transpose();
        }
        let n = x.nrows();
        let mut probs = DMatrix::zeros(n, self.arch.classes);
        let mut losses = DVector::zeros(n);
        for i in 0..n {
            let row = logits.row(i);
            let m = row.max();
            let sum: f64 = row.iter().map(|z| (z - m).exp()).sum();
            let lse = m + sum.ln();
            for c in 0..self.arch.classes {
                probs[(i, c)] = (row[c] - lse).exp();
            }
            if let Some(&y) = labels.get(i) {
                losses[i] = lse - row[y];
            }
        }
        Forward {
            pre_hidden,
            hidden,
            probs,
            losses,
        }
    }

    /// Class probabilities, one row per example.
    pub fn predict_proba(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward(x, &[]).probs
    }

    /// Argmax class per example; ties go to the lowest class index.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let probs = self.predict_proba(x);
        probs
            .row_iter()
            .map(|r| {
                let mut best = 0;
                for c in 1..r.len() {
                    if r[c] > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean cross-entropy over the batch.
    pub fn mean_loss(&self, x: &DMatrix<f64>, labels: &[usize]) -> f64 {
        self.forward(x, labels).losses.mean()
    }

    /// `(P - Y)` for the batch, i.e. the gradient of summed loss w.r.t. logits.
    fn logit_residual(&self, fwd: &Forward, labels: &[usize]) -> DMatrix<f64> {
        let mut d = fwd.probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            d[(i, y)] -= 1.0;
        }
        d
    }

    /// Mean loss and its gradient w.r.t. the flat parameter vector.
    pub fn loss_and_param_gradient(&self, x: &DMatrix<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
        let fwd = self.forward(x, labels);
        let n = x.nrows() as f64;
        let d_logits = self.logit_residual(&fwd, labels) / n;
        let d_w2 = fwd.hidden.transpose() * &d_logits;
        let d_b2 = d_logits.row_sum();
        let mut d_pre = &d_logits * self.w2().transpose();
        let act = self.arch.activation;
        d_pre.zip_apply(&fwd.pre_hidden, |g, z| *g *= act.derivative(z));
        let d_w1 = x.transpose() * &d_pre;
        let d_b1 = d_pre.row_sum();
        let mut grad = Vec::with_capacity(self.params.len());
        grad.extend_from_slice(d_w1.as_slice());
        grad.extend(d_b1.iter());
        grad.extend_from_slice(d_w2.as_slice());
        grad.extend(d_b2.iter());
        (fwd.losses.mean(), grad)
    }
}

impl GradientModel for ToyMlp {
    fn example_losses(&self, inputs: &DMatrix<f64>, labels: &[usize]) -> DVector<f64> {
        self.forward(inputs, labels).losses
    }

    fn input_gradient(&self, inputs: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
        let fwd = self.forward(inputs, labels);
        let d_logits = self.logit_residual(&fwd, labels);
        let mut d_pre = &d_logits * self.w2().transpose();
        let act = self.arch.activation;
        d_pre.zip_apply(&fwd.pre_hidden, |g, z| *g *= act.derivative(z));
        d_pre * self.w1().transpose()
    }
}

/// Largest relative error between backprop parameter gradients and central
/// differences of the mean loss.
pub fn parameter_gradient_check(model: &ToyMlp, x: &DMatrix<f64>, labels: &[usize], h: f64) -> f64 {
    let (_, analytic) = model.loss_and_param_gradient(x, labels);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (k, &exact) in analytic.iter().enumerate() {
        let orig = probe.params[k];
        probe.params[k] = orig + h;
        let up = probe.mean_loss(x, labels);
        probe.params[k] = orig - h;
        let down = probe.mean_loss(x, labels);
        probe.params[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(attacks::relative_error(exact, numeric));
    }
    worst
}

/// Classical momentum update: `v <- m*v - lr*g; theta <- theta + v`.
pub fn momentum_step(
    theta: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
) {
    for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *t += *v;
    }
}

/// Momentum buffer of one training phase.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(model: &ToyMlp) -> Self {
        Self {
            velocity: vec![0.0; model.params.len()],
        }
    }
}

/// Where toy inputs come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Generator {
    /// Isotropic Gaussian blobs around seeded centers.
    Blobs { spread: f64 },
    /// Concentric rings in the first two coordinates, one ring per class.
    Rings { noise: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSpec {
    pub generator: Generator,
    pub dim: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            generator: Generator::Blobs { spread: 0.12 },
            dim: 2,
            classes: 3,
            n_train: 240,
            n_test: 240,
            seed: 0,
        }
    }
}

/// Train/test split with inputs in `[0,1]^d` and labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train_x: DMatrix<f64>,
    pub train_y: Vec<usize>,
    pub test_x: DMatrix<f64>,
    pub test_y: Vec<usize>,
    pub classes: usize,
}

impl ToyDataset {
    pub fn generate(spec: &DataSpec) -> Result<Self, TrainError> {
        if !(2..=16).contains(&spec.dim) {
            return Err(TrainError::Invalid(format!(
                "dim {} outside 2..=16",
                spec.dim
            )));
        }
        if spec.classes < 2 || spec.n_train < spec.classes || spec.n_test < spec.classes {
            return Err(TrainError::Invalid(
                "need >= 2 classes and every split at least one example per class".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.n_train + spec.n_test;
        let labels: Vec<usize> = (0..spec.n_train)
            .chain(0..spec.n_test)
            .map(|i| i % spec.classes)
            .collect();
        let mut raw = DMatrix::zeros(n, spec.dim);
        match spec.generator {
            Generator::Blobs { spread } => {
                let centers =
                    DMatrix::from_fn(spec.classes, spec.dim, |_, _| rng.random_range(0.2..0.8));
                let noise =
                    Normal::new(0.0, spread).map_err(|e| TrainError::Invalid(e.to_string()))?;
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..spec.dim {
                        raw[(i, j)] = centers[(y, j)] + noise.sample(&mut rng);
                    }
                }
            }
            Generator::Rings { noise } => {
                let jitter =
                    Normal::new(0.0, noise).map_err(|e| TrainError::Invalid(e.to_string()))?;
                for (i, &y) in labels.iter().enumerate() {
                    let radius = (y + 1) as f64 / spec.classes as f64;
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    raw[(i, 0)] = radius * theta.cos() + jitter.sample(&mut rng);
                    raw[(i, 1)] = radius * theta.sin() + jitter.sample(&mut rng);
                    for j in 2..spec.dim {
                        raw[(i, j)] = jitter.sample(&mut rng);
                    }
                }
            }
        }
        // min-max scale every coordinate into [0, 1]
        for j in 0..spec.dim {
            let col = raw.column(j);
            let (lo, hi) = (col.min(), col.max());
            let span = if hi > lo { hi - lo } else { 1.0 };
            raw.column_mut(j)
                .apply(|v| *v = ((*v - lo) / span).clamp(0.0, 1.0));
        }
        let train_x = raw.rows(0, spec.n_train).into_owned();
        let test_x = raw.rows(spec.n_train, spec.n_test).into_owned();
        Ok(Self {
            train_x,
            train_y: labels[..spec.n_train].to_vec(),
            test_x,
            test_y: labels[spec.n_train..].to_vec(),
            classes: spec.classes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.train_x.ncols()
    }
}

/// Everything needed to train one cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainPlan {
    pub config: HpConfig,
    pub fidelity: FidelityPoint,
    pub epsilon: f64,
    pub seed: u64,
}

impl TrainPlan {
    /// Epochs of the initial clean phase, `round_half_up(epochs * (1 - rat/100))`.
    pub fn st_epochs(&self) -> u32 {
        let e = u64::from(self.fidelity.epochs);
        let st = (e * (100 - u64::from(self.config.rat_pct)) + 50) / 100;
        st as u32
    }

    pub fn at_epochs(&self) -> u32 {
        self.fidelity.epochs - self.st_epochs()
    }

    /// Training-time attack: PGD with the fidelity's iteration count.
    pub fn attack(&self) -> AttackSpec {
        AttackSpec {
            epsilon: self.epsilon,
            iters: self.fidelity.attack_iters,
            alpha: self.config.pgd_alpha,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.config
            .validate()
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        self.attack()
            .validate()
            .map_err(|e| TrainError::Invalid(e.to_string()))?;
        if self.fidelity.epochs == 0 {
            return Err(TrainError::Invalid("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Number of adversarial rows in a batch of `batch_len`, rounded half up.
pub fn adversarial_rows(batch_len: usize, ae_pct: u8) -> usize {
    (batch_len * usize::from(ae_pct) + 50) / 100
}

/// Returns the batch with its first `n_adv` rows replaced by PGD examples.
pub fn mix_adversarial_batch<R: Rng + ?Sized>(
    model: &ToyMlp,
    x: &DMatrix<f64>,
    y: &[usize],
    n_adv: usize,
    attack: &AttackSpec,
    options: PgdOptions,
    rng: &mut R,
) -> Result<DMatrix<f64>, AttackError> {
    let mut mixed = x.clone();
    if n_adv == 0 {
        return Ok(mixed);
    }
    let head = x.rows(0, n_adv).into_owned();
    let delta = attacks::pgd(model, &head, &y[..n_adv], attack, options, rng)?;
    mixed.rows_mut(0, n_adv).copy_from(&delta.apply(&head));
    Ok(mixed)
}

fn gather(x: &DMatrix<f64>, y: &[usize], idx: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
    let bx = DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)]);
    let by = idx.iter().map(|&i| y[i]).collect();
    (bx, by)
}

fn shuffled_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn check_loss(loss: f64, phase: Phase, epoch: u32, batch: usize) -> Result<(), TrainError> {
    if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
        return Err(TrainError::Diverged {
            phase,
            epoch,
            batch,
            loss,
        });
    }
    Ok(())
}

/// One pass of momentum SGD over shuffled batches; returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
pub fn sgd_epoch<R: Rng + ?Sized>(
    model: &mut ToyMlp,
    state: &mut SgdState,
    x: &DMatrix<f64>,
    y: &[usize],
    batch_size: usize,
    lr: f64,
    momentum: f64,
    epoch: u32,
    rng: &mut R,
) -> Result<f64, TrainError> {
    let batches = shuffled_batches(x.nrows(), batch_size, rng);
    let mut total = 0.0;
    for (b, idx) in batches.iter().enumerate() {
        let (bx, by) = gather(x, y, idx);
        let (loss, grad) = model.loss_and_param_gradient(&bx, &by);
        check_loss(loss, Phase::Standard, epoch, b)?;
        momentum_step(&mut model.params, &mut state.velocity, &grad, lr, momentum);
        total += loss;
    }
    Ok(total / batches.len() as f64)
}

/// One adversarial-training pass: every batch gets its first
/// `round(B * ae_pct / 100)` rows replaced by PGD examples against the
/// current model, then takes a momentum step with the AT hyper-parameters.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_epoch<R: Rng + ?Sized>(
    model: &mut ToyMlp,
    state: &mut SgdState,
    x: &DMatrix<f64>,
    y: &[usize],
    plan: &TrainPlan,
    options: PgdOptions,
    epoch: u32,
    rng: &mut R,
) -> Result<f64, TrainError> {
    let cfg = &plan.config;
    if cfg.rat_pct == 0 {
        return Err(TrainError::Invalid(
            "adversarial epoch requested with rat_pct = 0".into(),
        ));
    }
    let attack = plan.attack();
    let batches = shuffled_batches(x.nrows(), cfg.at_batch as usize, rng);
    let mut total = 0.0;
    for (b, idx) in batches.iter().enumerate() {
        let (bx, by) = gather(x, y, idx);
        let n_adv = adversarial_rows(idx.len(), cfg.ae_pct);
        let mixed = mix_adversarial_batch(model, &bx, &by, n_adv, &attack, options, rng).map_err(
            |source| TrainError::Attack {
                phase: Phase::Adversarial,
                epoch,
                batch: b,
                source,
            },
        )?;
        let (loss, grad) = model.loss_and_param_gradient(&mixed, &by);
        check_loss(loss, Phase::Adversarial, epoch, b)?;
        momentum_step(
            &mut model.params,
            &mut state.velocity,
            &grad,
            cfg.at_lr,
            cfg.at_momentum,
        );
        total += loss;
    }
    Ok(total / batches.len() as f64)
}

/// How training cost is measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clock {
    /// Elapsed wall-clock seconds.
    Wall,
    /// Deterministic cost: per-example forward/backward passes times a unit.
    Passes { seconds_per_pass: f64 },
}

/// Evaluation attack: PGD with `iters` steps of `step_scale * epsilon / iters`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalAttack {
    pub iters: u32,
    pub step_scale: f64,
}

impl Default for EvalAttack {
    fn default() -> Self {
        Self {
            iters: 20,
            step_scale: 2.5,
        }
    }
}

impl EvalAttack {
    pub fn spec(&self, epsilon: f64) -> AttackSpec {
        let alpha = if epsilon > 0.0 {
            self.step_scale * epsilon / f64::from(self.iters)
        } else {
            1e-3
        };
        AttackSpec {
            epsilon,
            iters: self.iters,
            alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub hidden: usize,
    pub activation: Activation,
    pub pgd: PgdOptions,
    pub clock: Clock,
    pub eval_attack: EvalAttack,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            hidden: 16,
            activation: Activation::Tanh,
            pgd: PgdOptions::default(),
            clock: Clock::Wall,
            eval_attack: EvalAttack::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub phase: Phase,
    pub epoch: u32,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyMlp,
    pub train_time: f64,
    pub losses: Vec<EpochLoss>,
}

/// Per-example passes one epoch costs under the deterministic clock.
fn epoch_passes(n: usize, plan: &TrainPlan, phase: Phase) -> f64 {
    match phase {
        Phase::Standard => n as f64,
        Phase::Adversarial => {
            let batch = plan.config.at_batch as usize;
            let full = n / batch;
            let rest = n % batch;
            let adv = full * adversarial_rows(batch, plan.config.ae_pct)
                + if rest > 0 {
                    adversarial_rows(rest, plan.config.ae_pct)
                } else {
                    0
                };
            n as f64 + (adv as f64) * f64::from(plan.fidelity.attack_iters)
        }
    }
}

/// Clean phase for `st_epochs`, then adversarial phase for `at_epochs`,
/// each with its own momentum buffer. Deterministic per `plan.seed`.
pub fn train_two_phase(
    plan: &TrainPlan,
    data: &ToyDataset,
    settings: &TrainSettings,
) -> Result<TrainOutcome, TrainError> {
    plan.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let arch = Architecture {
        input_dim: data.input_dim(),
        hidden: settings.hidden,
        classes: data.classes,
        activation: settings.activation,
    };
    let mut model = ToyMlp::new(arch, &mut rng);
    let mut losses = Vec::with_capacity(plan.fidelity.epochs as usize);
    let mut passes = 0.0;
    let n = data.train_x.nrows();
    let cfg = &plan.config;

    let mut st = SgdState::new(&model);
    for epoch in 0..plan.st_epochs() {
        let loss = sgd_epoch(
            &mut model,
            &mut st,
            &data.train_x,
            &data.train_y,
            cfg.st_batch as usize,
            cfg.st_lr,
            cfg.st_momentum,
            epoch,
            &mut rng,
        )?;
        passes += epoch_passes(n, plan, Phase::Standard);
        losses.push(EpochLoss {
            phase: Phase::Standard,
            epoch,
            loss,
        });
    }
    let mut at = SgdState::new(&model);
    for k in 0..plan.at_epochs() {
        let epoch = plan.st_epochs() + k;
        let loss = adversarial_epoch(
            &mut model,
            &mut at,
            &data.train_x,
            &data.train_y,
            plan,
            settings.pgd,
            epoch,
            &mut rng,
        )?;
        passes += epoch_passes(n, plan, Phase::Adversarial);
        losses.push(EpochLoss {
            phase: Phase::Adversarial,
            epoch,
            loss,
        });
    }
    let train_time = match settings.clock {
        Clock::Wall => started.elapsed().as_secs_f64(),
        Clock::Passes { seconds_per_pass } => passes * seconds_per_pass,
    };
    Ok(TrainOutcome {
        model,
        train_time,
        losses,
    })
}

/// Clean and adversarial misclassification rates on a labelled set.
pub fn evaluate(
    model: &ToyMlp,
    x: &DMatrix<f64>,
    y: &[usize],
    attack: &AttackSpec,
    options: PgdOptions,
) -> Result<(f64, f64), AttackError> {
    let n = y.len() as f64;
    let clean = model.predict(x);
    let std_error = clean.iter().zip(y).filter(|(p, t)| p != t).count() as f64 / n;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let delta = attacks::pgd(model, x, y, attack, options, &mut rng)?;
    let adv = model.predict(&delta.apply(x));
    let adv_error = adv.iter().zip(y).filter(|(p, t)| p != t).count() as f64 / n;
    Ok((std_error, adv_error))
}

/// Train one cell and measure it. Divergence yields errors of 1.0.
pub fn run_cell(
    plan: &TrainPlan,
    data: &ToyDataset,
    settings: &TrainSettings,
) -> Result<EvalRecord, TrainError> {
    let started = Instant::now();
    let (std_error, adv_error, train_time) = match train_two_phase(plan, data, settings) {
        Ok(out) => {
            let attack = settings.eval_attack.spec(plan.epsilon);
            let (s, a) = evaluate(
                &out.model,
                &data.test_x,
                &data.test_y,
                &attack,
                settings.pgd,
            )
            .map_err(|source| TrainError::Attack {
                phase: Phase::Adversarial,
                epoch: plan.fidelity.epochs,
                batch: 0,
                source,
            })?;
            (s, a, out.train_time)
        }
        Err(e @ TrainError::Diverged { .. }) | Err(e @ TrainError::Attack { .. }) => {
            log::warn!("cell diverged [{}] @ {}: {e}", plan.config, plan.fidelity);
            let t = match settings.clock {
                Clock::Wall => started.elapsed().as_secs_f64(),
                Clock::Passes { .. } => 0.0,
            };
            (1.0, 1.0, t)
        }
        Err(e) => return Err(e),
    };
    Ok(EvalRecord {
        config: plan.config,
        fidelity: plan.fidelity,
        epsilon: plan.epsilon,
        std_error,
        adv_error,
        train_time,
        seed: plan.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepProgress {
    pub done: usize,
    pub total: usize,
}

/// The cells a sweep covers: canonical configurations x fidelity grid x
/// epsilons x seeds, in deterministic order.
pub fn sweep_cells(space: &SearchSpace, seeds: &[u64]) -> Result<Vec<TrainPlan>, SweepError> {
    if seeds.is_empty() {
        return Err(SweepError::NoSeeds);
    }
    let mut canonical = space.clone();
    canonical.collapse_inert = true;
    let configs = enumerate_space(&canonical)?;
    let fidelities = space.fidelity_grid();
    let mut cells =
        Vec::with_capacity(configs.len() * fidelities.len() * space.epsilons.len() * seeds.len());
    for config in &configs {
        for fidelity in &fidelities {
            for &epsilon in &space.epsilons {
                for &seed in seeds {
                    cells.push(TrainPlan {
                        config: *config,
                        fidelity: *fidelity,
                        epsilon,
                        seed,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Exhaustive sweep. Cells already present in `resume` are skipped, every new
/// record is handed to `on_record` as it completes (single writer), and the
/// returned dataset holds old and new records.
pub fn grid_sweep<F>(
    space: &SearchSpace,
    data: &ToyDataset,
    seeds: &[u64],
    settings: &TrainSettings,
    jobs: usize,
    resume: Option<TabularDataset>,
    mut on_record: F,
) -> Result<TabularDataset, SweepError>
where
    F: FnMut(&EvalRecord, SweepProgress),
{
    let cells = sweep_cells(space, seeds)?;
    let mut builder = match resume {
        Some(ds) => DatasetBuilder::from_dataset(ds),
        None => DatasetBuilder::new("toytrain grid sweep"),
    };
    let todo: Vec<TrainPlan> = cells
        .into_iter()
        .filter(|p| !builder.contains_key(&RecordKey::new(p.config, p.fidelity, p.epsilon, p.seed)))
        .collect();
    let total = todo.len();
    if total == 0 {
        return Ok(builder.build());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
    let (tx, rx) = mpsc::channel::<Result<EvalRecord, TrainError>>();
    let mut first_error = None;
    std::thread::scope(|scope| {
        let todo = &todo;
        scope.spawn(move || {
            pool.install(|| {
                todo.par_iter().for_each_with(tx, |tx, plan| {
                    let _ = tx.send(run_cell(plan, data, settings));
                });
            });
        });
        let mut done = 0;
        let mut seen = HashSet::new();
        for result in rx {
            match result {
                Ok(record) => {
                    done += 1;
                    seen.insert(record.key());
                    on_record(&record, SweepProgress { done, total });
                    if let Err(e) = builder.insert(record) {
                        first_error.get_or_insert(SweepError::Domain(e));
                    }
                }
                Err(e) => {
                    first_error.get_or_insert(SweepError::Train(e));
                }
            }
        }
    });
    match first_error {
        Some(e) => Err(e),
        None => Ok(builder.build()),
    }
}
