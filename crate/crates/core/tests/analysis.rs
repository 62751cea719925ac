use advtune::analysis::{
    correlation_report, error_reduction, geomean_reduction, pareto_frontier, pearson,
    per_st_config_reduction_cdf, rat_ae_grid, time_reduction_cdf, CheapMethod, Criterion,
    EmpiricalCdf,
};
use advtune::domain::{
    enumerate_space, DatasetBuilder, EvalRecord, FidelityPoint, HpConfig, SearchSpace,
    TabularDataset,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;

fn space() -> SearchSpace {
    SearchSpace {
        st_lr: vec![0.1, 0.01],
        st_momentum: vec![0.0, 0.9],
        st_batch: vec![32],
        at_lr: vec![0.1, 0.01],
        at_momentum: vec![0.0, 0.9],
        at_batch: vec![32],
        pgd_alpha: vec![0.01],
        rat_pct: vec![0, 30, 50, 70, 100],
        ae_pct: vec![50, 100],
        epochs: vec![1, 2],
        attack_iters: vec![1, 5],
        epsilons: vec![0.03],
        tie_phases: false,
        collapse_inert: false,
    }
}

/// Random errors and times for every cell, with 1 to 3 seed replicates.
fn random_dataset(rng: &mut ChaCha8Rng) -> TabularDataset {
    let sp = space();
    let mut b = DatasetBuilder::new("random");
    for c in enumerate_space(&sp).unwrap() {
        let reps = rng.random_range(1..=3);
        for f in sp.fidelity_grid() {
            for seed in 0..reps {
                b.insert(EvalRecord {
                    config: c,
                    fidelity: f,
                    epsilon: 0.03,
                    std_error: rng.random_range(0.05..0.95),
                    adv_error: rng.random_range(0.05..0.95),
                    train_time: rng.random_range(1.0..10.0),
                    seed,
                })
                .unwrap();
            }
        }
    }
    b.build()
}

/// Mean `(std, adv)` of a configuration at a fidelity, by linear scan.
fn cell_mean(ds: &TabularDataset, c: &HpConfig, f: FidelityPoint) -> Option<(f64, f64)> {
    let hits: Vec<&EvalRecord> = ds
        .records()
        .filter(|r| r.config == *c && r.fidelity == f)
        .collect();
    if hits.is_empty() {
        return None;
    }
    let n = hits.len() as f64;
    Some((
        hits.iter().map(|r| r.std_error).sum::<f64>() / n,
        hits.iter().map(|r| r.adv_error).sum::<f64>() / n,
    ))
}

fn shared_phase(c: &HpConfig) -> bool {
    c.rat_pct == 0
        || c.rat_pct == 100
        || (c.st_lr == c.at_lr && c.st_momentum == c.at_momentum && c.st_batch == c.at_batch)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn error_reduction_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let sp = space();
    let full = sp.max_fidelity();
    for trial in 0..TRIALS {
        let ds = random_dataset(&mut rng);
        let criterion = Criterion::ALL[trial % 3];
        let rat = [None, Some(30), Some(50), Some(70)][trial % 4];
        let mut same = f64::INFINITY;
        let mut diff = f64::INFINITY;
        for c in enumerate_space(&sp).unwrap() {
            if rat.is_some_and(|r| r != c.rat_pct) {
                continue;
            }
            let (s, a) = cell_mean(&ds, &c, full).unwrap();
            let v = match criterion {
                Criterion::Error => s,
                Criterion::AdvError => a,
                Criterion::MeanError => (s + a) / 2.0,
            };
            diff = diff.min(v);
            if shared_phase(&c) {
                same = same.min(v);
            }
        }
        let row = error_reduction(&ds, criterion, rat, 0.03).unwrap();
        assert!(
            close(row.same, same) && close(row.diff, diff),
            "trial {trial}"
        );
        assert!(close(row.reduction_pct, 100.0 * (same - diff) / same));
        assert!(row.reduction_pct >= 0.0);
    }
}

#[test]
fn per_st_reductions_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let sp = space();
    let full = sp.max_fidelity();
    for trial in 0..TRIALS {
        let ds = random_dataset(&mut rng);
        let out = per_st_config_reduction_cdf(&ds, Criterion::AdvError, 0.03).unwrap();
        assert_eq!(out.reductions.len(), 4);
        for ((lr, mom, batch), red) in &out.reductions {
            let mut same = f64::INFINITY;
            let mut diff = f64::INFINITY;
            for c in enumerate_space(&sp).unwrap() {
                if c.st_lr != *lr || c.st_momentum != *mom || c.st_batch != *batch {
                    continue;
                }
                if ![30, 50, 70].contains(&c.rat_pct) {
                    continue;
                }
                let a = cell_mean(&ds, &c, full).unwrap().1;
                diff = diff.min(a);
                if c.at_lr == *lr && c.at_momentum == *mom && c.at_batch == *batch {
                    same = same.min(a);
                }
            }
            assert!(close(*red, 100.0 * (same - diff) / same), "trial {trial}");
        }
        let max = out.reductions.iter().map(|r| r.1).fold(f64::MIN, f64::max);
        assert_eq!(out.cdf.max(), max);
    }
}

#[test]
fn pearson_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..TRIALS {
        let n = rng.random_range(2..50);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let slope = rng.random_range(-2.0..2.0);
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| slope * x + rng.random_range(-3.0..3.0))
            .collect();
        let nf = n as f64;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        let r = (nf * sxy - sx * sy) / ((nf * sxx - sx * sx).sqrt() * (nf * syy - sy * sy).sqrt());
        assert!((pearson(&xs, &ys).unwrap() - r).abs() < 1e-9);
    }
}

#[test]
fn pareto_matches_quadratic_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..TRIALS {
        let n = rng.random_range(1..40);
        // coarse values force ties
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                (
                    f64::from(rng.random_range(0..8)),
                    f64::from(rng.random_range(0..8)),
                )
            })
            .collect();
        let expected: Vec<usize> = (0..n)
            .filter(|&i| {
                !(0..n).any(|j| {
                    pts[j].0 <= pts[i].0
                        && pts[j].1 <= pts[i].1
                        && (pts[j].0 < pts[i].0 || pts[j].1 < pts[i].1)
                })
            })
            .collect();
        assert_eq!(pareto_frontier(&pts), expected, "{pts:?}");
    }
}

#[test]
fn geomean_matches_product_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..TRIALS {
        let n = rng.random_range(1..20);
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..80.0)).collect();
        let pos: Vec<f64> = vals.iter().copied().filter(|v| *v > 0.0).collect();
        match geomean_reduction(&vals) {
            Ok(g) => {
                let expected = pos.iter().product::<f64>().powf(1.0 / pos.len() as f64);
                assert!(close(g.value, expected));
                assert_eq!(g.used, pos.len());
                assert_eq!(g.excluded, n - pos.len());
            }
            Err(_) => assert!(pos.is_empty()),
        }
    }
}

#[test]
fn cdf_counts_sample_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..TRIALS {
        let n = rng.random_range(1..30);
        let vals: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..10))).collect();
        let cdf = EmpiricalCdf::new(&vals).unwrap();
        for q in 0..12 {
            let x = f64::from(q) - 0.5 * f64::from(q % 2);
            let frac = vals.iter().filter(|v| **v <= x).count() as f64 / n as f64;
            assert_eq!(cdf.eval(x), frac);
        }
    }
}

#[test]
fn time_reductions_match_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let sp = space();
    for trial in 0..TRIALS {
        let ds = random_dataset(&mut rng);
        let rows = time_reduction_cdf(&ds, 5).unwrap();
        let methods: Vec<CheapMethod> = rows.iter().map(|r| r.method).collect();
        assert_eq!(
            methods,
            vec![CheapMethod::Iters(1), CheapMethod::StandardOnly]
        );
        let mean_time = |c: &HpConfig, f: FidelityPoint| {
            let t: Vec<f64> = ds
                .records()
                .filter(|r| r.config == *c && r.fidelity == f)
                .map(|r| r.train_time)
                .collect();
            t.iter().sum::<f64>() / t.len() as f64
        };
        let mut expected = Vec::new();
        for c in enumerate_space(&sp)
            .unwrap()
            .iter()
            .filter(|c| c.rat_pct > 0)
        {
            for &e in &sp.epochs {
                let base = mean_time(c, FidelityPoint::new(e, 5).unwrap());
                let cheap = mean_time(c, FidelityPoint::new(e, 1).unwrap());
                expected.push(100.0 * (base - cheap) / base);
            }
        }
        let mut got = rows[0].reductions.clone();
        got.sort_by(f64::total_cmp);
        expected.sort_by(f64::total_cmp);
        assert_eq!(got.len(), expected.len(), "trial {trial}");
        assert!(got.iter().zip(&expected).all(|(a, b)| close(*a, *b)));
        assert_eq!(rows[0].unmatched, 0);
        // every ST setting has a %RAT = 0 configuration in this grid
        assert_eq!(rows[1].unmatched, 0);
        assert_eq!(rows[1].reductions.len(), expected.len());
    }
}

#[test]
fn rat_ae_cells_hold_the_best_mean_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let sp = space();
    let full = sp.max_fidelity();
    for _ in 0..TRIALS {
        let ds = random_dataset(&mut rng);
        let cells = rat_ae_grid(&ds, 0.03).unwrap();
        assert_eq!(cells.len(), sp.rat_pct.len() * sp.ae_pct.len());
        for cell in &cells {
            let best = enumerate_space(&sp)
                .unwrap()
                .iter()
                .filter(|c| c.rat_pct == cell.rat_pct && c.ae_pct == cell.ae_pct)
                .map(|c| {
                    let (s, a) = cell_mean(&ds, c, full).unwrap();
                    (s + a) / 2.0
                })
                .fold(f64::INFINITY, f64::min);
            assert!(close((cell.std_error + cell.adv_error) / 2.0, best));
        }
        let pts: Vec<(f64, f64)> = cells.iter().map(|c| (c.std_error, c.adv_error)).collect();
        let frontier = pareto_frontier(&pts);
        for (i, c) in cells.iter().enumerate() {
            assert_eq!(c.on_frontier, frontier.contains(&i));
        }
    }
}

#[test]
fn identical_fidelities_correlate_perfectly() {
    let sp = space();
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut b = DatasetBuilder::new("copy");
    for c in enumerate_space(&sp).unwrap() {
        let (s, a) = (rng.random_range(0.1..0.9), rng.random_range(0.1..0.9));
        for f in sp.fidelity_grid() {
            b.insert(EvalRecord {
                config: c,
                fidelity: f,
                epsilon: 0.03,
                std_error: s,
                adv_error: a,
                train_time: 1.0,
                seed: 0,
            })
            .unwrap();
        }
    }
    let rows = correlation_report(&b.build(), 0.03).unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.cheap_iters, 1);
        assert!((r.r - 1.0).abs() < 1e-12);
    }
}
