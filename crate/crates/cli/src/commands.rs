//! The four subcommands. Each returns a small report for callers and tests;
//! files go under the manifest's output directory.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use advtune::analysis::{
    self, CorrelationRow, Criterion, EmpiricalCdf, ReductionRow, MIXED_RAT_LEVELS,
};
use advtune::domain::{load_dataset, save_dataset, HpConfig, RecordWriter, TabularDataset};
use advtune::harness::{self, synthetic, HarnessError, ReplaySetup, ReportMode, RunTrace};
use advtune::optimizers::{
    Evaluation, Evaluator, Objective, Observation, OptimizerSpec, Problem, TunerError,
};
use advtune::plot;
use advtune::toytrain::{self, ToyDataset, TrainPlan};
use anyhow::{anyhow, Context};

use crate::manifest::{Manifest, ReplaySource};
use crate::{Classify, CliError, CliResult};

/// Values closer than this are the same perturbation bound.
const EPS_MATCH: f64 = 1e-9;

fn input_msg(msg: impl Into<String>) -> CliError {
    CliError::Input(anyhow!(msg.into()))
}

fn harness_err(e: HarnessError) -> CliError {
    match e {
        HarnessError::Coverage { .. }
        | HarnessError::NoSeeds
        | HarnessError::Budget
        | HarnessError::Domain(_) => CliError::Input(e.into()),
        _ => CliError::Internal(e.into()),
    }
}

fn tuner_err(e: TunerError) -> CliError {
    match e {
        TunerError::Invalid(_) | TunerError::Domain(_) => CliError::Input(e.into()),
        TunerError::Evaluation { .. } => CliError::Internal(e.into()),
    }
}

/// File-name tag of a perturbation bound: `8_255` for multiples of 1/255.
pub fn epsilon_tag(eps: f64) -> String {
    let k = eps * 255.0;
    if (k - k.round()).abs() < 1e-6 {
        format!("{}_255", k.round() as i64)
    } else {
        format!("{eps}").replace('.', "p")
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .internal()
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .internal()
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .internal()
}

pub fn read_dataset(path: &Path) -> CliResult<TabularDataset> {
    let file = File::open(path)
        .with_context(|| format!("opening dataset {}", path.display()))
        .input()?;
    load_dataset(std::io::BufReader::new(file))
        .with_context(|| format!("reading dataset {}", path.display()))
        .input()
}

/// Charts are a convenience; a failed one is logged and skipped.
fn plot_or_warn(result: plot::PlotResult, path: &Path) -> CliResult<()> {
    if let Err(e) = result {
        log::warn!("plotting {} failed: {e}", path.display());
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub path: PathBuf,
    pub records: usize,
    pub new_records: usize,
}

/// Exhaustive toy sweep over the manifest's space, streamed to the dataset
/// file and rewritten in key order at the end.
pub fn sweep(m: &Manifest) -> CliResult<SweepReport> {
    let path = m.dataset_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let resume = if m.run.resume && path.exists() {
        Some(read_dataset(&path)?)
    } else {
        None
    };
    let before = resume.as_ref().map_or(0, TabularDataset::len);
    let data = ToyDataset::generate(&m.data).input()?;

    let file = OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))
        .internal()?;
    let empty = file.metadata().map(|md| md.len() == 0).unwrap_or(true);
    let mut writer = RecordWriter::new(BufWriter::new(file), empty).internal()?;
    let started = Instant::now();
    let mut last_print: Option<Instant> = None;
    let mut write_error = None;
    let ds = toytrain::grid_sweep(
        &m.space,
        &data,
        &m.run.seeds,
        &m.train,
        m.run.jobs,
        resume,
        |record, progress| {
            if let Err(e) = writer.write(record).and_then(|_| writer.flush()) {
                write_error.get_or_insert(e);
            }
            let now = Instant::now();
            if progress.done == progress.total
                || last_print.is_none_or(|t| now.duration_since(t).as_secs_f64() >= 1.0)
            {
                let elapsed = started.elapsed().as_secs_f64();
                let eta = elapsed / progress.done as f64 * (progress.total - progress.done) as f64;
                eprintln!(
                    "sweep: {}/{} cells, elapsed {elapsed:.1}s, eta {eta:.1}s",
                    progress.done, progress.total
                );
                last_print = Some(now);
            }
        },
    )
    .map_err(|e| match e {
        toytrain::SweepError::NoSeeds => CliError::Input(e.into()),
        toytrain::SweepError::Domain(_) => CliError::Input(e.into()),
        toytrain::SweepError::Train(_) => CliError::Internal(e.into()),
    })?;
    drop(writer);
    if let Some(e) = write_error {
        return Err(CliError::Internal(e.into()));
    }
    let tmp = path.with_extension("csv.tmp");
    {
        let mut sink = create_file(&tmp)?;
        save_dataset(&ds, &mut sink).internal()?;
        sink.flush().internal()?;
    }
    fs::rename(&tmp, &path)
        .with_context(|| format!("replacing {}", path.display()))
        .internal()?;
    Ok(SweepReport {
        path,
        records: ds.len(),
        new_records: ds.len() - before,
    })
}

fn selected_epsilons(m: &Manifest, available: &[f64]) -> CliResult<Vec<f64>> {
    match m.run.epsilon {
        Some(e) => available
            .iter()
            .copied()
            .find(|a| (a - e).abs() <= EPS_MATCH)
            .map(|a| vec![a])
            .ok_or_else(|| input_msg(format!("epsilon {e} is not in the dataset ({available:?})"))),
        None if available.is_empty() => Err(input_msg("dataset has no epsilon")),
        None => Ok(available.to_vec()),
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeReport {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Reports over a tabular dataset: error reductions, per-ST-setting CDFs,
/// fidelity correlations, time reductions and the `%RAT` x `%AE` grid.
pub fn analyze(m: &Manifest) -> CliResult<AnalyzeReport> {
    let ds = read_dataset(&m.dataset_path())?;
    let eps_list = selected_epsilons(m, &ds.epsilons())?;
    let out = &m.run.out;
    create_dir(out)?;
    let mut files = Vec::new();
    let mut summary = String::new();

    // error reductions: all levels must exist, single %RAT levels are optional
    let mut reductions: Vec<ReductionRow> = Vec::new();
    for &eps in &eps_list {
        let tag = epsilon_tag(eps);
        for c in Criterion::ALL {
            let row = analysis::error_reduction(&ds, c, None, eps)
                .with_context(|| format!("{c} reduction at epsilon {eps}"))
                .input()?;
            let _ = writeln!(summary, "reduction.{c}.all.{tag} = {}", row.reduction_pct);
            reductions.push(row);
            for rat in MIXED_RAT_LEVELS {
                match analysis::error_reduction(&ds, c, Some(rat), eps) {
                    Ok(row) => {
                        let _ = writeln!(
                            summary,
                            "reduction.{c}.rat{rat}.{tag} = {}",
                            row.reduction_pct
                        );
                        reductions.push(row);
                    }
                    Err(e) => log::debug!("no {c} reduction at rat {rat}: {e}"),
                }
            }
        }
    }
    let path = out.join("reductions.csv");
    analysis::write_reductions(&reductions, create_file(&path)?).internal()?;
    files.push(path);

    // per-ST-setting reduction CDFs
    let mut st_cdfs: Vec<(String, EmpiricalCdf)> = Vec::new();
    for &eps in &eps_list {
        let tag = epsilon_tag(eps);
        for c in Criterion::ALL {
            match analysis::per_st_config_reduction_cdf(&ds, c, eps) {
                Ok(r) => {
                    let name = format!("{c}@{tag}");
                    let _ = writeln!(summary, "st_config.{name}.median = {}", r.cdf.median());
                    let _ = writeln!(summary, "st_config.{name}.max = {}", r.cdf.max());
                    let values: Vec<f64> = r.reductions.iter().map(|(_, v)| *v).collect();
                    match analysis::geomean_reduction(&values) {
                        Ok(g) => {
                            let _ = writeln!(
                                summary,
                                "st_config.{name}.geomean = {} ({} used, {} excluded)",
                                g.value, g.used, g.excluded
                            );
                        }
                        Err(e) => log::info!("no geomean for {name}: {e}"),
                    }
                    st_cdfs.push((name, r.cdf));
                }
                Err(e) => log::warn!("per-ST-setting CDF for {c} at {tag} skipped: {e}"),
            }
        }
    }
    let series: Vec<(String, &EmpiricalCdf)> =
        st_cdfs.iter().map(|(n, c)| (n.clone(), c)).collect();
    let path = out.join("st_config_cdf.csv");
    analysis::write_cdfs(&series, create_file(&path)?).internal()?;
    files.push(path);
    if m.plot && !series.is_empty() {
        let path = out.join("st_config_cdf.svg");
        plot_or_warn(
            plot::cdf_chart(
                &path,
                "Best tied vs best untied completion per ST setting",
                "reduction (%)",
                &series,
            ),
            &path,
        )?;
        files.push(path);
    }

    // fidelity correlations
    let mut correlations: Vec<CorrelationRow> = Vec::new();
    for &eps in &eps_list {
        match analysis::correlation_report(&ds, eps) {
            Ok(rows) => correlations.extend(rows),
            Err(e) => log::warn!("correlations at {eps} skipped: {e}"),
        }
    }
    for r in &correlations {
        let _ = writeln!(
            summary,
            "correlation.{}.iters{}.vs.iters{}.{} = {}",
            r.metric,
            r.cheap_iters,
            r.baseline_iters,
            epsilon_tag(r.epsilon),
            r.r
        );
    }
    let path = out.join("correlations.csv");
    analysis::write_correlations(&correlations, create_file(&path)?).internal()?;
    files.push(path);
    if m.plot {
        for r in correlations
            .iter()
            .filter(|r| r.metric == Criterion::AdvError)
        {
            let path = out.join(format!(
                "correlation_iters{}_{}.svg",
                r.cheap_iters,
                epsilon_tag(r.epsilon)
            ));
            plot_or_warn(
                plot::scatter_chart(
                    &path,
                    &format!("adversarial error, r = {:.3}", r.r),
                    &format!("{} attack iterations", r.cheap_iters),
                    &format!("{} attack iterations", r.baseline_iters),
                    &r.pairs,
                ),
                &path,
            )?;
            files.push(path);
        }
    }

    // training-time reductions
    let baseline = match m.baseline_iters {
        Some(b) => b,
        None => ds
            .records()
            .map(|r| r.fidelity.attack_iters)
            .max()
            .ok_or_else(|| input_msg("dataset is empty"))?,
    };
    let times = match analysis::time_reduction_cdf(&ds, baseline) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("time reductions skipped: {e}");
            Vec::new()
        }
    };
    let time_series: Vec<(String, &EmpiricalCdf)> = times
        .iter()
        .filter_map(|t| t.cdf.as_ref().map(|c| (t.method.to_string(), c)))
        .collect();
    for (name, cdf) in &time_series {
        let _ = writeln!(summary, "time_reduction.{name}.median = {}", cdf.median());
        let _ = writeln!(summary, "time_reduction.{name}.max = {}", cdf.max());
    }
    let path = out.join("time_reduction_cdf.csv");
    analysis::write_cdfs(&time_series, create_file(&path)?).internal()?;
    files.push(path);
    if m.plot && !time_series.is_empty() {
        let path = out.join("time_reduction_cdf.svg");
        plot_or_warn(
            plot::cdf_chart(
                &path,
                &format!("Training-time reduction vs {baseline} attack iterations"),
                "reduction (%)",
                &time_series,
            ),
            &path,
        )?;
        files.push(path);
    }

    // %RAT x %AE grid
    for &eps in &eps_list {
        let tag = epsilon_tag(eps);
        match analysis::rat_ae_grid(&ds, eps) {
            Ok(cells) => {
                let path = out.join(format!("rat_ae_grid_{tag}.csv"));
                analysis::write_rat_ae_grid(&cells, create_file(&path)?).internal()?;
                files.push(path);
                if m.plot && !cells.is_empty() {
                    let path = out.join(format!("rat_ae_grid_{tag}.svg"));
                    plot_or_warn(
                        plot::rat_ae_heatmap(
                            &path,
                            "Mean error of the best configuration (* Pareto)",
                            &cells,
                        ),
                        &path,
                    )?;
                    files.push(path);
                }
            }
            Err(e) => log::warn!("rat/ae grid at {tag} skipped: {e}"),
        }
    }

    let path = out.join("summary.txt");
    write_text(&path, &summary)?;
    files.push(path);
    Ok(AnalyzeReport { files, summary })
}

#[derive(Debug, Clone)]
pub struct ReplayReport {
    pub epsilon: f64,
    /// Per report mode: the traces and the summary text.
    pub modes: Vec<(ReportMode, Vec<RunTrace>, String)>,
}

/// Replay the manifest's optimizers over a tabular dataset (or the synthetic
/// benchmark) and write per-seed traces, aggregates and summaries.
pub fn replay(m: &Manifest) -> CliResult<ReplayReport> {
    let budget = m
        .replay
        .budget
        .ok_or_else(|| input_msg("replay.budget is required"))?;
    let (ds, epsilon) = match m.replay.source {
        ReplaySource::Dataset => {
            let ds = read_dataset(&m.dataset_path())?;
            let available = ds.epsilons();
            let eps = match m.run.epsilon {
                Some(_) => selected_epsilons(m, &available)?[0],
                None if available.len() == 1 => available[0],
                None => {
                    return Err(input_msg(format!(
                        "dataset holds several epsilons {available:?}; set run.epsilon or --epsilon"
                    )))
                }
            };
            (ds, eps)
        }
        ReplaySource::Synthetic => {
            let ds = synthetic::benchmark(&m.space, &m.synthetic).input()?;
            let eps = m.run.epsilon.unwrap_or(m.space.epsilons[0]);
            (ds, eps)
        }
    };
    let oracle = harness::build_oracle(&ds, epsilon, &m.space).map_err(harness_err)?;
    let problem = Problem::new(&m.space).map_err(tuner_err)?;
    let setup = ReplaySetup {
        seeds: m.run.seeds.clone(),
        budget,
        alpha_weight: m.alpha_weight,
        settings: m.model.clone(),
    };
    let mut runs = Vec::new();
    for spec in &m.replay.optimizers {
        let started = Instant::now();
        let states =
            harness::replay_states(spec, &oracle, &problem, &setup).map_err(harness_err)?;
        eprintln!(
            "replay: {} over {} seeds in {:.1}s",
            spec.label(),
            setup.seeds.len(),
            started.elapsed().as_secs_f64()
        );
        runs.push((spec.label(), states));
    }
    let mut modes = Vec::new();
    for &mode in &m.replay.modes {
        let dir = m.run.out.join(mode.slug());
        create_dir(&dir)?;
        let mut traces = Vec::new();
        for (label, states) in &runs {
            let trace = harness::trace_from_states(
                label,
                states,
                &setup.seeds,
                &oracle,
                m.alpha_weight,
                budget,
                mode,
            )
            .map_err(harness_err)?;
            harness::write_seed_traces(
                &trace,
                create_file(&dir.join(format!("{label}.seeds.csv")))?,
            )
            .internal()?;
            harness::write_aggregate(
                &trace,
                create_file(&dir.join(format!("{label}.aggregate.csv")))?,
            )
            .internal()?;
            traces.push(trace);
        }
        let text = harness::summary(&traces);
        write_text(&dir.join("summary.txt"), &text)?;
        if m.plot {
            let path = dir.join("traces.svg");
            plot_or_warn(
                plot::trace_chart(
                    &path,
                    &format!("Incumbent objective ({} mode)", mode.label()),
                    &traces,
                ),
                &path,
            )?;
        }
        modes.push((mode, traces, text));
    }
    Ok(ReplayReport { epsilon, modes })
}

#[derive(Debug, Clone)]
pub struct TuneReport {
    pub config: HpConfig,
    pub std_error: f64,
    pub adv_error: f64,
    pub objective: f64,
    pub evaluations: usize,
    /// The recommendation was never trained at full fidelity during the run
    /// and was trained once more (outside the budget) for this report.
    pub extra_evaluation: bool,
    pub history: Vec<Observation>,
}

/// Live tuning against the toy trainer; costs are the trainer's clock.
pub fn tune(m: &Manifest) -> CliResult<TuneReport> {
    let budget = m
        .tune
        .budget
        .ok_or_else(|| input_msg("tune.budget is required"))?;
    let epsilon = m.run.epsilon.unwrap_or(m.space.epsilons[0]);
    let data = ToyDataset::generate(&m.data).input()?;
    let problem = Problem::new(&m.space).map_err(tuner_err)?;
    let settings = m.train;
    let train_seed = m.tune.train_seed;
    let evaluator = |config: &HpConfig, fidelity| -> Result<Evaluation, String> {
        let plan = TrainPlan {
            config: *config,
            fidelity,
            epsilon,
            seed: train_seed,
        };
        toytrain::run_cell(&plan, &data, &settings)
            .map(|r| Evaluation {
                std_error: r.std_error,
                adv_error: r.adv_error,
                cost: r.train_time,
            })
            .map_err(|e| e.to_string())
    };
    let objective = Objective::new(m.alpha_weight, &evaluator).map_err(tuner_err)?;
    let seed = m.run.seeds[0];
    let state = m
        .tune
        .optimizer
        .run(&problem, &objective, budget, seed, &m.model)
        .map_err(tuner_err)?;
    let config = state
        .recommendation()
        .ok_or_else(|| CliError::Internal(anyhow!("tuner made no observation")))?;
    let full = problem.max_fidelity();
    let observed = state
        .history
        .iter()
        .find(|o| o.full_fidelity && o.config == config)
        .map(|o| (o.std_error, o.adv_error));
    let (std_error, adv_error, extra_evaluation) = match observed {
        Some((s, a)) => (s, a, false),
        None => {
            let ev = evaluator
                .evaluate(&config, full)
                .map_err(|e| CliError::Internal(anyhow!(e)))?;
            (ev.std_error, ev.adv_error, true)
        }
    };
    let report = TuneReport {
        config,
        std_error,
        adv_error,
        objective: objective.value(std_error, adv_error),
        evaluations: state.history.len(),
        extra_evaluation,
        history: state.history.clone(),
    };
    write_tune_outputs(m, &report, &m.tune.optimizer)?;
    Ok(report)
}

fn write_tune_outputs(m: &Manifest, r: &TuneReport, spec: &OptimizerSpec) -> CliResult<()> {
    create_dir(&m.run.out)?;
    let path = m.run.out.join("tune_history.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    w.write_record([
        "step",
        "st_lr",
        "st_momentum",
        "st_batch",
        "at_lr",
        "at_momentum",
        "at_batch",
        "pgd_alpha",
        "rat_pct",
        "ae_pct",
        "epochs",
        "attack_iters",
        "std_error",
        "adv_error",
        "objective",
        "cost_s",
        "elapsed_s",
    ])
    .internal()?;
    for (i, o) in r.history.iter().enumerate() {
        let c = &o.config;
        w.write_record([
            i.to_string(),
            c.st_lr.to_string(),
            c.st_momentum.to_string(),
            c.st_batch.to_string(),
            c.at_lr.to_string(),
            c.at_momentum.to_string(),
            c.at_batch.to_string(),
            c.pgd_alpha.to_string(),
            c.rat_pct.to_string(),
            c.ae_pct.to_string(),
            o.fidelity.epochs.to_string(),
            o.fidelity.attack_iters.to_string(),
            o.std_error.to_string(),
            o.adv_error.to_string(),
            o.objective.to_string(),
            o.cost.to_string(),
            o.elapsed.to_string(),
        ])
        .internal()?;
    }
    w.flush().internal()?;

    let c = &r.config;
    let mut text = String::new();
    let _ = writeln!(text, "optimizer = {}", spec.label());
    let _ = writeln!(text, "evaluations = {}", r.evaluations);
    let _ = writeln!(text, "st_lr = {}", c.st_lr);
    let _ = writeln!(text, "st_momentum = {}", c.st_momentum);
    let _ = writeln!(text, "st_batch = {}", c.st_batch);
    let _ = writeln!(text, "at_lr = {}", c.at_lr);
    let _ = writeln!(text, "at_momentum = {}", c.at_momentum);
    let _ = writeln!(text, "at_batch = {}", c.at_batch);
    let _ = writeln!(text, "pgd_alpha = {}", c.pgd_alpha);
    let _ = writeln!(text, "rat_pct = {}", c.rat_pct);
    let _ = writeln!(text, "ae_pct = {}", c.ae_pct);
    let _ = writeln!(text, "std_error = {}", r.std_error);
    let _ = writeln!(text, "adv_error = {}", r.adv_error);
    let _ = writeln!(text, "objective = {}", r.objective);
    let _ = writeln!(text, "extra_evaluation = {}", r.extra_evaluation);
    write_text(&m.run.out.join("tune_best.txt"), &text)
}
