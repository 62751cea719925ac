use advtune::attacks::{self, PgdOptions};
use advtune::domain::{enumerate_space, AttackSpec, FidelityPoint, HpConfig, SearchSpace};
use advtune::toytrain::{
    adversarial_epoch, evaluate, grid_sweep, mix_adversarial_batch, sgd_epoch, train_two_phase,
    Activation, Architecture, Clock, DataSpec, SgdState, ToyDataset, ToyMlp, TrainPlan,
    TrainSettings,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(rat_pct: u8, ae_pct: u8) -> HpConfig {
    HpConfig {
        st_lr: 0.1,
        st_momentum: 0.9,
        st_batch: 16,
        at_lr: 0.05,
        at_momentum: 0.5,
        at_batch: 16,
        pgd_alpha: 0.01,
        rat_pct,
        ae_pct,
    }
}

fn small_data(seed: u64) -> ToyDataset {
    ToyDataset::generate(&DataSpec {
        n_train: 64,
        n_test: 64,
        seed,
        ..DataSpec::default()
    })
    .unwrap()
}

fn arch(data: &ToyDataset, activation: Activation) -> Architecture {
    Architecture {
        input_dim: data.input_dim(),
        hidden: 8,
        classes: data.classes,
        activation,
    }
}

fn plan(cfg: HpConfig, epochs: u32, iters: u32, epsilon: f64, seed: u64) -> TrainPlan {
    TrainPlan {
        config: cfg,
        fidelity: FidelityPoint::new(epochs, iters).unwrap(),
        epsilon,
        seed,
    }
}

fn passes_clock() -> TrainSettings {
    TrainSettings {
        hidden: 8,
        clock: Clock::Passes {
            seconds_per_pass: 1e-6,
        },
        ..TrainSettings::default()
    }
}

/// Runs one adversarial epoch and one AT-hyper-parameter SGD epoch from the
/// same state and rng seed; returns both parameter vectors and losses.
fn adversarial_vs_standard(p: &TrainPlan) -> ((Vec<f64>, f64), (Vec<f64>, f64)) {
    let data = small_data(3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = ToyMlp::new(arch(&data, Activation::Tanh), &mut rng);

    let mut a = model.clone();
    let mut sa = SgdState::new(&a);
    let mut ra = ChaCha8Rng::seed_from_u64(5);
    let la = adversarial_epoch(
        &mut a,
        &mut sa,
        &data.train_x,
        &data.train_y,
        p,
        PgdOptions::default(),
        0,
        &mut ra,
    )
    .unwrap();

    let mut b = model;
    let mut sb = SgdState::new(&b);
    let mut rb = ChaCha8Rng::seed_from_u64(5);
    let cfg = &p.config;
    let lb = sgd_epoch(
        &mut b,
        &mut sb,
        &data.train_x,
        &data.train_y,
        cfg.at_batch as usize,
        cfg.at_lr,
        cfg.at_momentum,
        0,
        &mut rb,
    )
    .unwrap();
    ((a.params().to_vec(), la), (b.params().to_vec(), lb))
}

#[test]
fn zero_adversarial_fraction_is_a_standard_epoch() {
    let p = plan(config(50, 0), 4, 5, 0.05, 0);
    let (a, b) = adversarial_vs_standard(&p);
    assert_eq!(a, b);
}

#[test]
fn zero_epsilon_adversarial_epoch_is_a_standard_epoch() {
    for ae in [30, 50, 100] {
        let p = plan(config(50, ae), 4, 5, 0.0, 0);
        let (a, b) = adversarial_vs_standard(&p);
        assert_eq!(a, b, "ae = {ae}");
    }
}

#[test]
fn half_of_a_128_batch_is_perturbed() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = ToyMlp::new(
        Architecture {
            input_dim: 4,
            hidden: 6,
            classes: 3,
            activation: Activation::Tanh,
        },
        &mut rng,
    );
    // interior inputs so range clipping never zeroes a step
    let x = DMatrix::from_fn(128, 4, |_, _| rng.random_range(0.2..0.8));
    let y: Vec<usize> = (0..128).map(|i| i % 3).collect();
    let grad = attacks::GradientModel::input_gradient(&model, &x, &y);
    assert!(
        grad.iter().all(|g| *g != 0.0),
        "gradients must be nowhere zero"
    );
    let attack = AttackSpec {
        epsilon: 0.05,
        iters: 3,
        alpha: 0.02,
    };
    let n_adv = advtune::toytrain::adversarial_rows(128, 50);
    let mixed = mix_adversarial_batch(
        &model,
        &x,
        &y,
        n_adv,
        &attack,
        PgdOptions::default(),
        &mut rng,
    )
    .unwrap();
    let changed: Vec<usize> = (0..128)
        .filter(|&i| (0..4).any(|j| mixed[(i, j)] != x[(i, j)]))
        .collect();
    assert_eq!(changed.len(), 64);
    assert_eq!(changed, (0..64).collect::<Vec<_>>());
}

#[test]
fn pure_standard_training_cost_ignores_attack_iterations() {
    let data = small_data(1);
    let settings = passes_clock();
    let times: Vec<f64> = [1, 5, 20]
        .iter()
        .map(|&k| {
            train_two_phase(&plan(config(0, 50), 4, k, 0.05, 7), &data, &settings)
                .unwrap()
                .train_time
        })
        .collect();
    assert!(times.iter().all(|t| *t == times[0]), "{times:?}");
}

#[test]
fn same_seed_gives_bitwise_identical_models() {
    let data = small_data(4);
    let settings = TrainSettings {
        hidden: 8,
        ..TrainSettings::default()
    };
    let p = plan(config(50, 50), 4, 3, 0.05, 21);
    let a = train_two_phase(&p, &data, &settings).unwrap();
    let b = train_two_phase(&p, &data, &settings).unwrap();
    let bits = |m: &ToyMlp| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.losses, b.losses);
    let c = train_two_phase(&TrainPlan { seed: 22, ..p }, &data, &settings).unwrap();
    assert_ne!(bits(&a.model), bits(&c.model));
}

#[test]
fn sixteen_epochs_at_half_rat_split_evenly() {
    let data = small_data(5);
    let out = train_two_phase(
        &plan(config(50, 50), 16, 1, 0.05, 0),
        &data,
        &passes_clock(),
    )
    .unwrap();
    let phases: Vec<_> = out.losses.iter().map(|l| l.phase).collect();
    assert_eq!(phases.len(), 16);
    assert!(phases[..8]
        .iter()
        .all(|p| *p == advtune::toytrain::Phase::Standard));
    assert!(phases[8..]
        .iter()
        .all(|p| *p == advtune::toytrain::Phase::Adversarial));
}

#[test]
fn constant_model_on_balanced_binary_data_has_half_error() {
    let arch = Architecture {
        input_dim: 3,
        hidden: 4,
        classes: 2,
        activation: Activation::Tanh,
    };
    let model = ToyMlp::from_params(arch, vec![0.0; arch.param_count()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = DMatrix::from_fn(100, 3, |_, _| rng.random_range(0.0..1.0));
    let y: Vec<usize> = (0..100).map(|i| i % 2).collect();
    let preds = model.predict(&x);
    assert!(preds.iter().all(|p| *p == preds[0]));
    let attack = AttackSpec {
        epsilon: 0.0,
        iters: 20,
        alpha: 0.01,
    };
    let (std_error, adv_error) = evaluate(&model, &x, &y, &attack, PgdOptions::default()).unwrap();
    assert_eq!(std_error, 0.5);
    assert_eq!(adv_error, 0.5);
}

#[test]
fn linear_binary_models_keep_clean_mistakes_under_attack() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..50 {
        let arch = Architecture {
            input_dim: 3,
            hidden: 3,
            classes: 2,
            activation: Activation::Identity,
        };
        let params = (0..arch.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let model = ToyMlp::from_params(arch, params).unwrap();
        let x = DMatrix::from_fn(20, 3, |_, _| rng.random_range(0.0..1.0));
        let y: Vec<usize> = (0..20).map(|_| rng.random_range(0..2)).collect();
        let eps = rng.random_range(0.0..0.2);
        let attack = AttackSpec {
            epsilon: eps,
            iters: 10,
            alpha: eps / 4.0 + 1e-3,
        };
        let delta = attacks::pgd(&model, &x, &y, &attack, PgdOptions::default(), &mut rng).unwrap();
        let clean = model.predict(&x);
        let adv = model.predict(&delta.apply(&x));
        for i in 0..20 {
            if clean[i] != y[i] {
                assert_ne!(adv[i], y[i], "case {case}, example {i}");
            }
        }
    }
}

#[test]
fn training_cost_grows_with_attack_iterations() {
    let data = small_data(6);
    // deterministic clock: strictly more passes per extra iteration
    let settings = passes_clock();
    let cost = |k: u32| {
        train_two_phase(&plan(config(50, 50), 4, k, 0.05, 0), &data, &settings)
            .unwrap()
            .train_time
    };
    let passes: Vec<f64> = [1, 5, 10, 20].iter().map(|&k| cost(k)).collect();
    assert!(passes.windows(2).all(|w| w[0] <= w[1]), "{passes:?}");

    // wall clock, mean of 5 repetitions
    let wall = TrainSettings {
        hidden: 8,
        ..TrainSettings::default()
    };
    let mean_wall = |k: u32| {
        (0..5)
            .map(|s| {
                train_two_phase(&plan(config(50, 100), 4, k, 0.05, s), &data, &wall)
                    .unwrap()
                    .train_time
            })
            .sum::<f64>()
            / 5.0
    };
    let (w1, w20) = (mean_wall(1), mean_wall(20));
    assert!(w1 <= w20, "wall-clock means {w1} > {w20}");
}

#[test]
fn sweep_record_count_matches_enumeration() {
    let space = SearchSpace {
        st_lr: vec![0.1, 0.01],
        st_momentum: vec![0.0, 0.9],
        st_batch: vec![16, 32],
        at_lr: vec![0.1, 0.01],
        at_momentum: vec![0.0, 0.9],
        at_batch: vec![16, 32],
        pgd_alpha: vec![1e-2, 1e-3],
        rat_pct: vec![0, 50, 100],
        ae_pct: vec![50, 100],
        epochs: vec![1, 2],
        attack_iters: vec![1, 2],
        epsilons: vec![8.0 / 255.0],
        tie_phases: false,
        collapse_inert: false,
    };
    let data = ToyDataset::generate(&DataSpec {
        n_train: 24,
        n_test: 24,
        ..DataSpec::default()
    })
    .unwrap();
    let ds = grid_sweep(&space, &data, &[0], &passes_clock(), 2, None, |_, _| {}).unwrap();
    // rat 50: 2^7 phase settings x 2 ae; rat 0: 2^3 ST settings;
    // rat 100: 2^3 AT settings x 2 alpha x 2 ae
    let canonical = 128 * 2 + 8 + 8 * 2 * 2;
    let mut collapsed = space.clone();
    collapsed.collapse_inert = true;
    assert_eq!(enumerate_space(&collapsed).unwrap().len(), canonical);
    assert_eq!(ds.len(), canonical * 4);
}
