use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advtune::analysis::{error_reduction, Criterion};
use advtune::domain::{load_dataset, FidelityPoint};
use advtune::harness::{aggregate, read_seed_traces, time_grid, GRID_POINTS};
use advtune::toytrain::{run_cell, ToyDataset, TrainPlan};
use advtune_cli::commands;
use advtune_cli::manifest::{Manifest, MANIFEST_KEYS};
use tempfile::TempDir;

/// Eight configurations with tied completions, two fidelities, one seed.
const TOY: &str = "\
space.preset = toy
space.st_lr = 0.3, 0.03
space.st_momentum = 0.9
space.at_lr = 0.3, 0.03
space.at_momentum = 0.9
space.at_batch = 32
space.pgd_alpha = 0.03
space.rat_pct = 30, 70
space.ae_pct = 50
space.epochs = 2
space.attack_iters = 1, 5
data.n_train = 128
data.n_test = 128
train.clock = passes
";

fn write_manifest(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("manifest.txt");
    fs::write(&path, body).unwrap();
    path
}

fn advtune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advtune"))
        .args(args)
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = advtune(args);
    assert!(
        out.status.success(),
        "advtune {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn sweep_toy(dir: &TempDir) -> PathBuf {
    let m = write_manifest(dir.path(), TOY);
    run_ok(&["sweep", "--manifest", m.to_str().unwrap()]);
    m
}

#[test]
fn tiny_sweep_writes_one_row_per_cell_and_resume_adds_none() {
    let dir = TempDir::new().unwrap();
    let body = "\
space.preset = toy
space.st_lr = 0.3, 0.03
space.st_momentum = 0.9
space.at_lr = 0.1
space.at_momentum = 0.9
space.at_batch = 32
space.pgd_alpha = 0.03
space.rat_pct = 50
space.ae_pct = 50
space.epochs = 2
space.attack_iters = 1, 5
data.n_train = 64
data.n_test = 64
train.clock = passes
run.resume = true
";
    let m = write_manifest(dir.path(), body);
    let m = m.to_str().unwrap();
    let first = run_ok(&["sweep", "--manifest", m]);
    assert!(first.contains("wrote 4 records (4 new)"), "{first}");
    let csv_path = dir.path().join("out/dataset.csv");
    let bytes = fs::read(&csv_path).unwrap();
    assert_eq!(load_dataset(bytes.as_slice()).unwrap().len(), 4);
    let second = run_ok(&["sweep", "--manifest", m]);
    assert!(second.contains("wrote 4 records (0 new)"), "{second}");
    assert_eq!(fs::read(&csv_path).unwrap(), bytes);
}

#[test]
fn sweep_row_count_matches_the_space() {
    let dir = TempDir::new().unwrap();
    let m = sweep_toy(&dir);
    let manifest = Manifest::load(&m).unwrap();
    let ds = load_dataset(fs::File::open(manifest.dataset_path()).unwrap()).unwrap();
    let s = &manifest.space;
    let expected = s.config_count() * s.fidelity_grid().len() * s.epsilons.len();
    assert_eq!(ds.len(), expected);
    assert_eq!(expected, 8 * 2);
}

#[test]
fn analyze_is_stable_and_agrees_with_the_library() {
    let dir = TempDir::new().unwrap();
    let m = sweep_toy(&dir);
    let m_str = m.to_str().unwrap();
    run_ok(&["analyze", "--manifest", m_str]);
    let out = dir.path().join("out");
    let first = fs::read_to_string(out.join("reductions.csv")).unwrap();
    let summary = fs::read_to_string(out.join("summary.txt")).unwrap();
    run_ok(&["analyze", "--manifest", m_str]);
    assert_eq!(
        fs::read_to_string(out.join("reductions.csv")).unwrap(),
        first
    );
    assert_eq!(
        fs::read_to_string(out.join("summary.txt")).unwrap(),
        summary
    );

    let ds = load_dataset(fs::File::open(out.join("dataset.csv")).unwrap()).unwrap();
    let eps = ds.epsilons()[0];
    let row = error_reduction(&ds, Criterion::AdvError, None, eps).unwrap();
    let mut rdr = csv::Reader::from_reader(first.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let hit = rdr
        .records()
        .map(|r| r.unwrap())
        .find(|r| &r[col("criterion")] == "adv_error" && &r[col("rat_pct")] == "all")
        .expect("all-RAT adv_error row");
    let got: f64 = hit[col("reduction_pct")].parse().unwrap();
    assert_eq!(got, row.reduction_pct);
}

#[test]
fn analyze_input_failures_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path(), TOY);
    let out = advtune(&["analyze", "--manifest", m.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("input error"));

    let bad = write_manifest(dir.path(), "space.nonsense = 1\n");
    let out = advtune(&["analyze", "--manifest", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_on_a_dataset_with_gaps_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let m = sweep_toy(&dir);
    // widen the space past what was swept
    let wider = format!("{TOY}replay.budget = 0.01\nreplay.optimizers = random\n")
        .replace("space.attack_iters = 1, 5", "space.attack_iters = 1, 5, 10");
    fs::write(&m, wider).unwrap();
    let out = advtune(&["replay", "--manifest", m.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("misses"));
}

const SYNTH: &str = "\
space.preset = toy
space.at_lr = 0.3, 0.03
space.at_momentum = 0.9
space.attack_iters = 1, 20
replay.source = synthetic
replay.budget = 6
replay.optimizers = mf_epochs_iters, hyperband, bo_ei, random
model.restarts = 2
model.max_candidates = 256
model.fantasies = 16
run.seeds = 0, 1, 2
plot.enabled = false
";

#[test]
fn replay_traces_are_reproducible_and_summaries_consistent() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path(), SYNTH);
    let m = m.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["replay", "--manifest", m, "--out", a.to_str().unwrap()]);
    run_ok(&["replay", "--manifest", m, "--out", b.to_str().unwrap()]);
    let labels = ["mf_epochs_iters", "hyperband", "bo_ei", "random"];
    for mode in ["observed", "recommendation"] {
        for l in labels {
            for kind in ["seeds", "aggregate"] {
                let name = format!("{mode}/{l}.{kind}.csv");
                assert_eq!(
                    fs::read(a.join(&name)).unwrap(),
                    fs::read(b.join(&name)).unwrap(),
                    "{name}"
                );
            }
        }
        let summary = fs::read_to_string(a.join(mode).join("summary.txt")).unwrap();
        for x in labels {
            for y in labels.iter().filter(|y| **y != x) {
                assert!(
                    summary.contains(&format!("speedup.{x}.vs.{y} = ")),
                    "{mode}: missing {x} vs {y}"
                );
            }
            let seeds = read_seed_traces(
                fs::File::open(a.join(mode).join(format!("{x}.seeds.csv"))).unwrap(),
            )
            .unwrap();
            assert_eq!(seeds.len(), 3);
            let agg = aggregate(&seeds, &time_grid(6.0, GRID_POINTS));
            let last = agg.iter().rev().find_map(|p| p.mean).unwrap();
            assert!(
                summary.contains(&format!("final_mean.{x} = {last}\n")),
                "{x}"
            );
        }
    }
}

#[test]
fn tune_respects_budget_and_reports_a_reproducible_result() {
    let dir = TempDir::new().unwrap();
    let body = format!("{TOY}tune.optimizer = random\ntune.budget = 1e-9\n");
    let m = write_manifest(dir.path(), &body);
    let manifest = Manifest::load(&m).unwrap();
    let one = commands::tune(&manifest).unwrap();
    assert_eq!(one.evaluations, 1);

    let body = format!("{TOY}tune.optimizer = bo_ei\ntune.budget = 0.02\nrun.seeds = 4\n");
    fs::write(&m, body).unwrap();
    let manifest = Manifest::load(&m).unwrap();
    let a = commands::tune(&manifest).unwrap();
    let history = fs::read(dir.path().join("out/tune_history.csv")).unwrap();
    let b = commands::tune(&manifest).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.config, b.config);
    assert_eq!(
        fs::read(dir.path().join("out/tune_history.csv")).unwrap(),
        history
    );

    let data = ToyDataset::generate(&manifest.data).unwrap();
    let max = manifest.space.max_fidelity();
    let rec = run_cell(
        &TrainPlan {
            config: a.config,
            fidelity: FidelityPoint::new(max.epochs, max.attack_iters).unwrap(),
            epsilon: manifest.space.epsilons[0],
            seed: manifest.tune.train_seed,
        },
        &data,
        &manifest.train,
    )
    .unwrap();
    assert_eq!((rec.std_error, rec.adv_error), (a.std_error, a.adv_error));
    let w = manifest.alpha_weight;
    assert_eq!(a.objective, w * rec.std_error + (1.0 - w) * rec.adv_error);
}

#[test]
fn help_lists_every_manifest_key() {
    for args in [&["--help"][..], &["replay", "--help"][..]] {
        let text = run_ok(args);
        for (key, _) in MANIFEST_KEYS {
            assert!(text.contains(key), "{args:?} help lacks {key}");
        }
    }
}

#[test]
fn command_line_flags_override_the_manifest() {
    let dir = TempDir::new().unwrap();
    let m = write_manifest(dir.path(), SYNTH);
    let out = dir.path().join("flags");
    run_ok(&[
        "replay",
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed-list",
        "7",
        "--epsilon",
        "16/255",
    ]);
    let seeds =
        read_seed_traces(fs::File::open(out.join("observed/random.seeds.csv")).unwrap()).unwrap();
    assert_eq!(seeds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![7]);
}
