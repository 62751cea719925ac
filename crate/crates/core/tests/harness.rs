use advtune::domain::{enumerate_space, DatasetBuilder, SearchSpace};
use advtune::harness::synthetic::{benchmark, SyntheticSpec};
use advtune::harness::{
    aggregate, build_oracle, read_seed_traces, replay, speedup, summary, time_grid,
    write_seed_traces, HarnessError, ReplayOracle, ReplaySetup, ReportMode, SeedTrace, TracePoint,
    GRID_POINTS,
};
use advtune::optimizers::{ModelSettings, OptimizerSpec, Problem};

fn space() -> SearchSpace {
    SearchSpace {
        st_lr: vec![0.3, 0.1, 0.03],
        st_momentum: vec![0.0, 0.9],
        st_batch: vec![32],
        at_lr: vec![0.1, 0.01],
        at_momentum: vec![0.9],
        at_batch: vec![32],
        pgd_alpha: vec![0.01],
        rat_pct: vec![0, 50],
        ae_pct: vec![100],
        epochs: vec![1, 2, 4],
        attack_iters: vec![1, 10],
        epsilons: vec![0.03],
        tie_phases: false,
        collapse_inert: true,
    }
}

fn setup(seeds: Vec<u64>) -> ReplaySetup {
    ReplaySetup {
        seeds,
        budget: 6.0,
        alpha_weight: 0.5,
        settings: ModelSettings {
            restarts: 2,
            max_candidates: 128,
            fantasies: 16,
            ..ModelSettings::default()
        },
    }
}

fn oracle() -> ReplayOracle {
    let sp = space();
    build_oracle(
        &benchmark(&sp, &SyntheticSpec::default()).unwrap(),
        0.03,
        &sp,
    )
    .unwrap()
}

fn point(t: f64, objective: f64) -> TracePoint {
    TracePoint {
        t,
        objective,
        std_error: objective,
        adv_error: objective,
    }
}

#[test]
fn replays_are_reproducible() {
    let oracle = oracle();
    let problem = Problem::new(&space()).unwrap();
    for spec in OptimizerSpec::standard_set() {
        for mode in [ReportMode::Observed, ReportMode::Recommendation] {
            let a = replay(&spec, &oracle, &problem, &setup(vec![0, 1, 2]), mode).unwrap();
            let b = replay(&spec, &oracle, &problem, &setup(vec![0, 1, 2]), mode).unwrap();
            assert_eq!(a, b);
            let (mut wa, mut wb) = (Vec::new(), Vec::new());
            write_seed_traces(&a, &mut wa).unwrap();
            write_seed_traces(&b, &mut wb).unwrap();
            assert_eq!(wa, wb);
            assert_eq!(a.aggregate.len(), GRID_POINTS);
        }
    }
}

#[test]
fn observed_curves_never_rise() {
    let oracle = oracle();
    let problem = Problem::new(&space()).unwrap();
    for spec in OptimizerSpec::standard_set() {
        let t = replay(
            &spec,
            &oracle,
            &problem,
            &setup(vec![4, 5]),
            ReportMode::Observed,
        )
        .unwrap();
        for s in &t.seeds {
            assert!(s
                .points
                .windows(2)
                .all(|w| w[1].objective <= w[0].objective));
        }
    }
}

#[test]
fn recommendation_curves_score_recommendations_with_the_oracle() {
    let oracle = oracle();
    let problem = Problem::new(&space()).unwrap();
    let t = replay(
        &OptimizerSpec::Random,
        &oracle,
        &problem,
        &setup(vec![9]),
        ReportMode::Recommendation,
    )
    .unwrap();
    for p in &t.seeds[0].points {
        let matched = problem.configs.iter().any(|c| {
            oracle
                .full(c)
                .is_some_and(|e| e.std_error == p.std_error && e.adv_error == p.adv_error)
        });
        assert!(matched);
        assert!((p.objective - 0.5 * (p.std_error + p.adv_error)).abs() < 1e-12);
    }
}

#[test]
fn aggregation_matches_hand_values() {
    let seeds = vec![
        SeedTrace {
            seed: 0,
            points: vec![point(1.0, 0.8), point(3.0, 0.4)],
        },
        SeedTrace {
            seed: 1,
            points: vec![point(2.0, 0.6), point(4.0, 0.2)],
        },
    ];
    let grid = time_grid(4.0, 5);
    assert_eq!(grid, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    let agg = aggregate(&seeds, &grid);
    let means: Vec<Option<f64>> = agg.iter().map(|p| p.mean).collect();
    let expect = [None, None, Some(0.7), Some(0.5), Some(0.3)];
    for (m, e) in means.iter().zip(expect) {
        match (m, e) {
            (None, None) => {}
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
            _ => panic!("{means:?}"),
        }
    }
    // sample std of {0.8, 0.6}, {0.4, 0.6}, {0.4, 0.2}
    let sd = (0.02f64).sqrt();
    for p in &agg[2..] {
        assert!((p.std.unwrap() - sd).abs() < 1e-12);
    }
}

#[test]
fn seed_trace_files_round_trip_to_the_same_aggregate() {
    let oracle = oracle();
    let problem = Problem::new(&space()).unwrap();
    let t = replay(
        &OptimizerSpec::from_label("hyperband").unwrap(),
        &oracle,
        &problem,
        &setup(vec![0, 1, 2, 3]),
        ReportMode::Observed,
    )
    .unwrap();
    let mut buf = Vec::new();
    write_seed_traces(&t, &mut buf).unwrap();
    let back = read_seed_traces(buf.as_slice()).unwrap();
    assert_eq!(back, t.seeds);
    assert_eq!(
        aggregate(&back, &time_grid(t.budget, GRID_POINTS)),
        t.aggregate
    );
    let text = summary(std::slice::from_ref(&t));
    let fm = t.final_mean().unwrap();
    assert!(text.contains(&format!("final_mean.hyperband = {fm}")));
}

#[test]
fn speedup_of_a_tuner_against_itself_is_one() {
    let oracle = oracle();
    let problem = Problem::new(&space()).unwrap();
    let t = replay(
        &OptimizerSpec::Random,
        &oracle,
        &problem,
        &setup(vec![0, 1]),
        ReportMode::Observed,
    )
    .unwrap();
    assert_eq!(speedup(&t, &t), 1.0);
}

#[test]
fn coverage_gaps_list_every_missing_cell_count() {
    let sp = space();
    let full = benchmark(&sp, &SyntheticSpec::default()).unwrap();
    let configs = enumerate_space(&sp).unwrap();
    let victim = configs[1];
    let mut b = DatasetBuilder::new("gappy");
    for r in full.records() {
        if r.config != victim || r.fidelity.epochs != 1 {
            b.insert(*r).unwrap();
        }
    }
    match build_oracle(&b.build(), 0.03, &sp) {
        Err(HarnessError::Coverage { count, listing, .. }) => {
            assert_eq!(count, 2);
            assert!(listing.contains(&victim.to_string()));
        }
        other => panic!("expected coverage error, got {other:?}"),
    }
    assert!(matches!(
        build_oracle(&full, 0.05, &sp),
        Err(HarnessError::Coverage { .. })
    ));
}
