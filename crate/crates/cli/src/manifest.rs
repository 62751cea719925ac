//! Run manifests: flat `section.key = value` text, one entry per line.
//!
//! `#` starts a comment, lists are comma separated, epsilons accept `k/255`.
//! Unknown or repeated keys are rejected, and every value is parsed before a
//! command starts. Relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use advtune::domain::{parse_epsilon, SearchSpace};
use advtune::harness::synthetic::SyntheticSpec;
use advtune::harness::ReportMode;
use advtune::optimizers::{ModelSettings, OptimizerSpec};
use advtune::toytrain::{Activation, Clock, DataSpec, EvalAttack, Generator, TrainSettings};
use anyhow::{anyhow, bail, Context, Result};

/// Every accepted key with a one-line description; `--help` prints this table.
pub const MANIFEST_KEYS: &[(&str, &str)] = &[
    ("run.out", "output directory (default: out)"),
    ("run.jobs", "worker threads (default: 1)"),
    ("run.seeds", "seed list, e.g. 0,1,2 (default: 0)"),
    (
        "run.epsilon",
        "perturbation bound for analyze/replay/tune, e.g. 8/255",
    ),
    (
        "run.dataset",
        "dataset CSV read by analyze and replay, written by sweep",
    ),
    (
        "run.resume",
        "sweep: keep rows already in run.dataset (default: false)",
    ),
    (
        "space.preset",
        "starting grid: reference | toy (default: reference)",
    ),
    ("space.st_lr", "standard-phase learning rates"),
    ("space.st_momentum", "standard-phase momenta"),
    ("space.st_batch", "standard-phase batch sizes"),
    ("space.at_lr", "adversarial-phase learning rates"),
    ("space.at_momentum", "adversarial-phase momenta"),
    ("space.at_batch", "adversarial-phase batch sizes"),
    ("space.pgd_alpha", "training attack step sizes"),
    ("space.rat_pct", "% of epochs trained adversarially"),
    (
        "space.ae_pct",
        "% of each batch replaced by adversarial examples",
    ),
    ("space.epochs", "epoch fidelity levels"),
    ("space.attack_iters", "attack-iteration fidelity levels"),
    ("space.epsilons", "perturbation bounds swept"),
    (
        "space.tie_phases",
        "share LR/momentum/batch across phases (default: false)",
    ),
    (
        "space.collapse_inert",
        "drop configurations differing only in unused fields",
    ),
    (
        "data.generator",
        "toy inputs: blobs | rings (default: blobs)",
    ),
    (
        "data.scale",
        "blob spread or ring noise (default: 0.12 / 0.05)",
    ),
    ("data.dim", "input dimension (default: 2)"),
    ("data.classes", "number of classes (default: 3)"),
    ("data.n_train", "training examples (default: 240)"),
    ("data.n_test", "test examples (default: 240)"),
    ("data.seed", "data generation seed (default: 0)"),
    (
        "train.hidden",
        "hidden units of the toy network (default: 16)",
    ),
    ("train.activation", "tanh | relu | identity (default: tanh)"),
    ("train.clock", "wall | passes (default: wall)"),
    (
        "train.seconds_per_pass",
        "simulated seconds per example pass with the passes clock",
    ),
    (
        "train.eval_iters",
        "evaluation attack iterations (default: 20)",
    ),
    (
        "train.eval_step_scale",
        "evaluation step = scale * epsilon / iters (default: 2.5)",
    ),
    (
        "objective.alpha_weight",
        "weight of the standard error in the objective (default: 0.5)",
    ),
    ("replay.source", "dataset | synthetic (default: dataset)"),
    (
        "replay.budget",
        "simulated seconds per replay run (required by replay)",
    ),
    (
        "replay.mode",
        "observed | recommendation | both (default: both)",
    ),
    (
        "replay.optimizers",
        "optimizer labels (default: the full standard set)",
    ),
    (
        "synthetic.noise_sd",
        "low-fidelity offset standard deviation (default: 0.01)",
    ),
    (
        "synthetic.low_cost_ratio",
        "low-fidelity cost relative to full (default: 0.1)",
    ),
    (
        "synthetic.full_cost",
        "full-fidelity cost in seconds (default: 1)",
    ),
    ("synthetic.seed", "synthetic benchmark seed (default: 0)"),
    (
        "model.restarts",
        "random restarts of the first GP fit (default: 8)",
    ),
    (
        "model.refit_restarts",
        "restarts of later GP fits (default: 2)",
    ),
    (
        "model.max_fit_iters",
        "gradient steps per GP restart (default: 40)",
    ),
    (
        "model.refit_interval",
        "rounds between hyper-parameter refits (default: 5)",
    ),
    (
        "model.noise_floor",
        "lower bound on the learned noise (default: 1e-6)",
    ),
    (
        "model.max_candidates",
        "acquisition candidates per round (default: 4096)",
    ),
    (
        "model.kg_reference",
        "configurations tracked by the knowledge gradient (default: 64)",
    ),
    (
        "model.fantasies",
        "fantasy draws per candidate (default: 32)",
    ),
    (
        "model.fidelity_lengthscale_floor",
        "lower bound on GP lengthscales of the fidelity inputs (default: 1)",
    ),
    (
        "tune.optimizer",
        "optimizer label for live tuning (default: mf_epochs_iters)",
    ),
    (
        "tune.budget",
        "seconds of training cost per tuning run (required by tune)",
    ),
    (
        "tune.train_seed",
        "seed of every training run during tuning (default: 0)",
    ),
    (
        "analyze.baseline_iters",
        "reference attack iterations (default: the maximum present)",
    ),
    ("plot.enabled", "write SVG charts (default: true)"),
];

/// `--help` text listing every manifest key.
pub fn keys_help() -> String {
    let width = MANIFEST_KEYS
        .iter()
        .map(|(k, _)| k.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("Manifest keys (`key = value`, one per line):\n");
    for (key, doc) in MANIFEST_KEYS {
        let _ = writeln!(out, "  {key:width$}  {doc}");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplaySource {
    Dataset,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub out: PathBuf,
    pub jobs: usize,
    pub seeds: Vec<u64>,
    pub epsilon: Option<f64>,
    pub dataset: Option<PathBuf>,
    pub resume: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySection {
    pub source: ReplaySource,
    pub budget: Option<f64>,
    pub modes: Vec<ReportMode>,
    pub optimizers: Vec<OptimizerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneSection {
    pub optimizer: OptimizerSpec,
    pub budget: Option<f64>,
    pub train_seed: u64,
}

/// A fully parsed run description.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub run: RunSection,
    pub space: SearchSpace,
    pub data: DataSpec,
    pub train: TrainSettings,
    pub alpha_weight: f64,
    pub replay: ReplaySection,
    pub synthetic: SyntheticSpec,
    pub model: ModelSettings,
    pub tune: TuneSection,
    pub baseline_iters: Option<u32>,
    pub plot: bool,
}

impl Default for Manifest {
    fn default() -> Self {
        Self::from_entries(BTreeMap::new(), Path::new("")).expect("defaults are valid")
    }
}

/// Command-line values that take precedence over the manifest.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub epsilon: Option<f64>,
}

fn list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| anyhow!("{key}: bad value {s:?}: {e}"))
        })
        .collect()
}

fn scalar<T: FromStr>(key: &str, text: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    text.trim()
        .parse()
        .map_err(|e| anyhow!("{key}: bad value {text:?}: {e}"))
}

pub fn parse_seed_list(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = list("seeds", text)?;
    if seeds.is_empty() {
        bail!("seed list is empty");
    }
    Ok(seeds)
}

fn parse_bool(key: &str, text: &str) -> Result<bool> {
    match text.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => bail!("{key}: expected true or false, got {other:?}"),
    }
}

fn epsilons(key: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_epsilon(s).map_err(|e| anyhow!("{key}: {e}")))
        .collect()
}

fn optimizer(key: &str, label: &str) -> Result<OptimizerSpec> {
    OptimizerSpec::from_label(label.trim())
        .ok_or_else(|| anyhow!("{key}: unknown optimizer {label:?}"))
}

/// Raw entries in file order, rejecting unknown and repeated keys.
fn entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
        let key = key.trim();
        if !MANIFEST_KEYS.iter().any(|(k, _)| *k == key) {
            bail!("line {}: unknown key {key:?}", n + 1);
        }
        if map
            .insert(key.to_string(), value.trim().to_string())
            .is_some()
        {
            bail!("line {}: key {key:?} given twice", n + 1);
        }
    }
    Ok(map)
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::from_entries(entries(text)?, base)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).with_context(|| format!("in manifest {}", path.display()))
    }

    fn from_entries(map: BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let get = |k: &str| map.get(k).map(String::as_str);
        let path = |k: &str| get(k).map(|p| base.join(p));

        let run = RunSection {
            out: path("run.out").unwrap_or_else(|| base.join("out")),
            jobs: get("run.jobs").map_or(Ok(1), |v| scalar("run.jobs", v))?,
            seeds: get("run.seeds").map_or(Ok(vec![0]), parse_seed_list)?,
            epsilon: get("run.epsilon")
                .map(|v| parse_epsilon(v).map_err(|e| anyhow!("run.epsilon: {e}")))
                .transpose()?,
            dataset: path("run.dataset"),
            resume: get("run.resume").map_or(Ok(false), |v| parse_bool("run.resume", v))?,
        };
        if run.jobs == 0 {
            bail!("run.jobs must be at least 1");
        }

        let mut space = match get("space.preset").unwrap_or("reference") {
            "reference" => SearchSpace::reference_grid(),
            "toy" => SearchSpace::toy_grid(),
            other => bail!("space.preset: unknown preset {other:?}"),
        };
        macro_rules! space_list {
            ($($field:ident),*) => {$(
                let key = concat!("space.", stringify!($field));
                if let Some(v) = get(key) {
                    space.$field = list(key, v)?;
                }
            )*};
        }
        space_list!(
            st_lr,
            st_momentum,
            st_batch,
            at_lr,
            at_momentum,
            at_batch,
            pgd_alpha,
            rat_pct,
            ae_pct,
            epochs,
            attack_iters
        );
        if let Some(v) = get("space.epsilons") {
            space.epsilons = epsilons("space.epsilons", v)?;
        }
        if let Some(v) = get("space.tie_phases") {
            space.tie_phases = parse_bool("space.tie_phases", v)?;
        }
        if let Some(v) = get("space.collapse_inert") {
            space.collapse_inert = parse_bool("space.collapse_inert", v)?;
        }
        space.validate().map_err(|e| anyhow!("space: {e}"))?;

        let defaults = DataSpec::default();
        let generator = match get("data.generator").unwrap_or("blobs") {
            "blobs" => Generator::Blobs {
                spread: get("data.scale").map_or(Ok(0.12), |v| scalar("data.scale", v))?,
            },
            "rings" => Generator::Rings {
                noise: get("data.scale").map_or(Ok(0.05), |v| scalar("data.scale", v))?,
            },
            other => bail!("data.generator: unknown generator {other:?}"),
        };
        let data = DataSpec {
            generator,
            dim: get("data.dim").map_or(Ok(defaults.dim), |v| scalar("data.dim", v))?,
            classes: get("data.classes")
                .map_or(Ok(defaults.classes), |v| scalar("data.classes", v))?,
            n_train: get("data.n_train")
                .map_or(Ok(defaults.n_train), |v| scalar("data.n_train", v))?,
            n_test: get("data.n_test").map_or(Ok(defaults.n_test), |v| scalar("data.n_test", v))?,
            seed: get("data.seed").map_or(Ok(defaults.seed), |v| scalar("data.seed", v))?,
        };

        let tdef = TrainSettings::default();
        let clock = match get("train.clock").unwrap_or("wall") {
            "wall" => Clock::Wall,
            "passes" => Clock::Passes {
                seconds_per_pass: get("train.seconds_per_pass")
                    .map_or(Ok(1e-6), |v| scalar("train.seconds_per_pass", v))?,
            },
            other => bail!("train.clock: unknown clock {other:?}"),
        };
        let edef = EvalAttack::default();
        let train = TrainSettings {
            hidden: get("train.hidden").map_or(Ok(tdef.hidden), |v| scalar("train.hidden", v))?,
            activation: match get("train.activation").unwrap_or("tanh") {
                "tanh" => Activation::Tanh,
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                other => bail!("train.activation: unknown activation {other:?}"),
            },
            pgd: tdef.pgd,
            clock,
            eval_attack: EvalAttack {
                iters: get("train.eval_iters")
                    .map_or(Ok(edef.iters), |v| scalar("train.eval_iters", v))?,
                step_scale: get("train.eval_step_scale")
                    .map_or(Ok(edef.step_scale), |v| scalar("train.eval_step_scale", v))?,
            },
        };
        if train.hidden == 0 || train.eval_attack.iters == 0 {
            bail!("train.hidden and train.eval_iters must be positive");
        }

        let alpha_weight = get("objective.alpha_weight")
            .map_or(Ok(0.5), |v| scalar("objective.alpha_weight", v))?;
        if !(0.0..=1.0).contains(&alpha_weight) {
            bail!("objective.alpha_weight must lie in [0, 1]");
        }

        let positive = |key: &str| -> Result<Option<f64>> {
            let v = get(key).map(|v| scalar::<f64>(key, v)).transpose()?;
            if v.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
                bail!("{key} must be positive");
            }
            Ok(v)
        };
        let replay = ReplaySection {
            source: match get("replay.source").unwrap_or("dataset") {
                "dataset" => ReplaySource::Dataset,
                "synthetic" => ReplaySource::Synthetic,
                other => bail!("replay.source: unknown source {other:?}"),
            },
            budget: positive("replay.budget")?,
            modes: match get("replay.mode").unwrap_or("both") {
                "observed" => vec![ReportMode::Observed],
                "recommendation" => vec![ReportMode::Recommendation],
                "both" => vec![ReportMode::Observed, ReportMode::Recommendation],
                other => bail!("replay.mode: unknown mode {other:?}"),
            },
            optimizers: match get("replay.optimizers") {
                None => OptimizerSpec::standard_set(),
                Some(v) => {
                    let specs = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| optimizer("replay.optimizers", s))
                        .collect::<Result<Vec<_>>>()?;
                    if specs.is_empty() {
                        bail!("replay.optimizers is empty");
                    }
                    specs
                }
            },
        };

        let sdef = SyntheticSpec::default();
        let synthetic = SyntheticSpec {
            noise_sd: get("synthetic.noise_sd")
                .map_or(Ok(sdef.noise_sd), |v| scalar("synthetic.noise_sd", v))?,
            low_cost_ratio: get("synthetic.low_cost_ratio")
                .map_or(Ok(sdef.low_cost_ratio), |v| {
                    scalar("synthetic.low_cost_ratio", v)
                })?,
            full_cost: get("synthetic.full_cost")
                .map_or(Ok(sdef.full_cost), |v| scalar("synthetic.full_cost", v))?,
            seed: get("synthetic.seed").map_or(Ok(sdef.seed), |v| scalar("synthetic.seed", v))?,
        };
        if !(synthetic.noise_sd >= 0.0
            && synthetic.low_cost_ratio > 0.0
            && synthetic.full_cost > 0.0)
        {
            bail!("synthetic: noise_sd must be >= 0 and costs positive");
        }

        let mut model = ModelSettings::default();
        macro_rules! model_field {
            ($($field:ident),*) => {$(
                let key = concat!("model.", stringify!($field));
                if let Some(v) = get(key) {
                    model.$field = scalar(key, v)?;
                }
            )*};
        }
        model_field!(
            restarts,
            refit_restarts,
            max_fit_iters,
            refit_interval,
            noise_floor,
            max_candidates,
            kg_reference,
            fantasies,
            fidelity_lengthscale_floor
        );
        let floor = model.fidelity_lengthscale_floor;
        if floor.is_nan() || floor <= 0.0 {
            bail!("model.fidelity_lengthscale_floor must be positive");
        }

        let tune = TuneSection {
            optimizer: optimizer(
                "tune.optimizer",
                get("tune.optimizer").unwrap_or("mf_epochs_iters"),
            )?,
            budget: positive("tune.budget")?,
            train_seed: get("tune.train_seed").map_or(Ok(0), |v| scalar("tune.train_seed", v))?,
        };

        Ok(Self {
            run,
            space,
            data,
            train,
            alpha_weight,
            replay,
            synthetic,
            model,
            tune,
            baseline_iters: get("analyze.baseline_iters")
                .map(|v| scalar("analyze.baseline_iters", v))
                .transpose()?,
            plot: get("plot.enabled").map_or(Ok(true), |v| parse_bool("plot.enabled", v))?,
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.run.out = out.clone();
        }
        if let Some(j) = o.jobs {
            self.run.jobs = j.max(1);
        }
        if let Some(s) = &o.seeds {
            self.run.seeds = s.clone();
        }
        if let Some(e) = o.epsilon {
            self.run.epsilon = Some(e);
        }
    }

    /// Dataset path, defaulting to `dataset.csv` in the output directory.
    pub fn dataset_path(&self) -> PathBuf {
        self.run
            .dataset
            .clone()
            .unwrap_or_else(|| self.run.out.join("dataset.csv"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let m = Manifest::parse("", Path::new("")).unwrap();
        assert_eq!(m.space, SearchSpace::reference_grid());
        assert_eq!(m.run.seeds, vec![0]);
        assert_eq!(m.replay.optimizers.len(), 6);
        assert!(m.plot);
    }

    #[test]
    fn values_and_comments() {
        let text = "# comment\nspace.preset = toy\nspace.epsilons = 8/255, 0.05 # inline\nrun.seeds = 3,4\n";
        let m = Manifest::parse(text, Path::new("/base")).unwrap();
        assert_eq!(m.space.epsilons, vec![8.0 / 255.0, 0.05]);
        assert_eq!(m.space.epochs, SearchSpace::toy_grid().epochs);
        assert_eq!(m.run.seeds, vec![3, 4]);
        assert_eq!(m.run.out, PathBuf::from("/base/out"));
    }

    #[test]
    fn unknown_key_rejected() {
        let e = Manifest::parse("space.lr = 0.1", Path::new("")).unwrap_err();
        assert!(e.to_string().contains("unknown key"));
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(Manifest::parse("run.jobs = 1\nrun.jobs = 2", Path::new("")).is_err());
    }

    #[test]
    fn bad_values_rejected() {
        for text in [
            "run.jobs = many",
            "run.jobs = 0",
            "space.rat_pct = 30, 150",
            "run.epsilon = 300/255",
            "replay.optimizers = simplex",
            "objective.alpha_weight = 2",
            "train.clock = sundial",
            "replay.budget = -1",
            "no equals sign",
        ] {
            assert!(Manifest::parse(text, Path::new("")).is_err(), "{text}");
        }
    }

    #[test]
    fn overrides_win() {
        let mut m = Manifest::parse("run.seeds = 1\nrun.jobs = 2", Path::new("")).unwrap();
        m.apply(&Overrides {
            out: Some("x".into()),
            jobs: Some(4),
            seeds: Some(vec![7, 8]),
            epsilon: Some(0.1),
        });
        assert_eq!(m.run.out, PathBuf::from("x"));
        assert_eq!(m.run.jobs, 4);
        assert_eq!(m.run.seeds, vec![7, 8]);
        assert_eq!(m.run.epsilon, Some(0.1));
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        for (k, _) in MANIFEST_KEYS {
            assert!(help.contains(k));
        }
    }
}
