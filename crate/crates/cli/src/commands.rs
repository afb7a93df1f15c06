use std::path::{Path, PathBuf};

use nalgebra::DVector;
use pcml_core::bench::{
    self, build_model, evaluate as evaluate_metrics, generate_data as make_data, run_arm, ArmOutcome, BenchmarkProblem,
    ComparisonTable, Estimate, MetricsReport, BAND_SEED_OFFSET,
};
use pcml_core::model::{Dataset, ParameterVector};
use pcml_core::uq::GaussianPosterior;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{load_config, resolve_seeds, ExperimentConfig, SeedSource, DEFAULT_OUTPUT_DIR};
use crate::output::{csv_bytes, num, opt, strings, Staging};
use crate::plot::{self, Labels, PlotKind};
use crate::{CliError, CommonArgs};

#[derive(Debug, Serialize)]
struct Versions {
    pcml_cli: &'static str,
    pcml_core: &'static str,
}

const VERSIONS: Versions = Versions {
    pcml_cli: env!("CARGO_PKG_VERSION"),
    pcml_core: pcml_core::VERSION,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedStatus {
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    versions: Versions,
    config: &'a ExperimentConfig,
    seeds: &'a [u64],
    seed_source: SeedSource,
    seed_results: &'a [SeedStatus],
    files: Vec<String>,
}

struct Prepared {
    cfg: ExperimentConfig,
    prob: BenchmarkProblem,
    seeds: Vec<u64>,
    source: SeedSource,
    out: PathBuf,
}

fn prepare(args: &CommonArgs, env_seed: Option<&str>) -> Result<Prepared, CliError> {
    let mut cfg = load_config(&args.config)?;
    let (seeds, source) = resolve_seeds(&cfg, args.seed, env_seed)?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    cfg.output_dir = Some(out.display().to_string());
    let prob = cfg.problem()?;
    Ok(Prepared {
        cfg,
        prob,
        seeds,
        source,
        out,
    })
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let n = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(CliError::Input("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| CliError::Input(e.to_string()))
}

fn write_manifest(
    staging: &mut Staging,
    command: &str,
    p: &Prepared,
    results: &[SeedStatus],
) -> Result<(), CliError> {
    let mut files = staging.files().to_vec();
    files.push("run_manifest.json".into());
    let manifest = Manifest {
        command,
        versions: VERSIONS,
        config: &p.cfg,
        seeds: &p.seeds,
        seed_source: p.source,
        seed_results: results,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    staging.write("run_manifest.json", text.as_bytes())
}

pub const METRICS_HEADER: [&str; 9] = [
    "seed",
    "arm",
    "rmse_train",
    "rmse_test",
    "max_violation",
    "mean_violation",
    "coverage95",
    "mean_band_width",
    "wall_time_secs",
];

fn metrics_row(seed: u64, arm: &str, m: &MetricsReport) -> Vec<String> {
    vec![
        seed.to_string(),
        arm.to_string(),
        num(m.rmse_train),
        num(m.rmse_test),
        num(m.max_violation),
        num(m.mean_violation),
        opt(m.coverage95),
        opt(m.mean_band_width),
        num(m.wall_time_secs),
    ]
}

/// Saved point estimate and posterior of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub seed: u64,
    pub theta: Vec<f64>,
    pub posterior_mu: Option<Vec<f64>>,
    /// `null` marks a point-mass coordinate.
    pub posterior_log_sigma: Option<Vec<Option<f64>>>,
}

impl ParamsFile {
    fn new(seed: u64, theta: &ParameterVector, post: Option<&GaussianPosterior>) -> Self {
        Self {
            seed,
            theta: theta.values.clone(),
            posterior_mu: post.map(|p| p.mu.clone()),
            posterior_log_sigma: post.map(|p| {
                p.log_sigma
                    .iter()
                    .map(|l| l.is_finite().then_some(*l))
                    .collect()
            }),
        }
    }

    fn posterior(&self) -> Result<Option<GaussianPosterior>, CliError> {
        match (&self.posterior_mu, &self.posterior_log_sigma) {
            (Some(mu), Some(ls)) => {
                let log_sigma: Vec<f64> = ls.iter().map(|l| l.unwrap_or(f64::NEG_INFINITY)).collect();
                let active = vec![true; mu.len()];
                GaussianPosterior::new(mu.clone(), log_sigma, active)
                    .map(Some)
                    .map_err(|e| CliError::Input(e.to_string()))
            }
            (None, None) => Ok(None),
            _ => Err(CliError::Input(
                "posterior_mu and posterior_log_sigma must both be present or both absent".into(),
            )),
        }
    }
}

fn labels(prob: &BenchmarkProblem) -> Labels {
    Labels {
        x: prob.units.inputs[0].clone(),
        y: prob.units.y_axis.clone(),
        outputs: prob.units.outputs.clone(),
    }
}

fn trajectory_rows(train: &Dataset, test: &Dataset, preds: &[DVector<f64>]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    let n = test.y.ncols();
    for i in 0..train.len() {
        for k in 0..n {
            rows.push(vec!["measurement".into(), num(train.u[(i, 0)]), k.to_string(), num(train.y[(i, k)])]);
        }
    }
    for i in 0..test.len() {
        for k in 0..n {
            rows.push(vec!["truth".into(), num(test.u[(i, 0)]), k.to_string(), num(test.y[(i, k)])]);
        }
    }
    for (i, p) in preds.iter().enumerate() {
        for k in 0..n {
            rows.push(vec!["prediction".into(), num(test.u[(i, 0)]), k.to_string(), num(p[k])]);
        }
    }
    rows
}

fn bands_csv(test: &Dataset, b: &pcml_core::uq::PredictiveBands) -> Result<Vec<u8>, CliError> {
    let d = test.u.ncols();
    let mut header: Vec<String> = (0..d).map(|j| format!("input_{j}")).collect();
    header.extend(strings(&["output", "mean", "lower", "upper", "truth"]));
    let mut rows = Vec::new();
    for i in 0..test.len() {
        for k in 0..b.mean.ncols() {
            let mut r: Vec<String> = (0..d).map(|j| num(test.u[(i, j)])).collect();
            r.extend([
                k.to_string(),
                num(b.mean[(i, k)]),
                num(b.lower[(i, k)]),
                num(b.upper[(i, k)]),
                num(test.y[(i, k)]),
            ]);
            rows.push(r);
        }
    }
    csv_bytes(&header, &rows)
}

fn render_into(staging: &mut Staging, csv_name: &str, kind: PlotKind, labels: &Labels) -> Result<(), CliError> {
    let svg = plot::render(&staging.path(csv_name), kind, labels)?;
    staging.write(&csv_name.replace(".csv", ".svg"), svg.as_bytes())
}

struct SeedRun {
    train: Dataset,
    test: Dataset,
    outcome: ArmOutcome,
}

fn run_seed(p: &Prepared, seed: u64) -> Result<SeedRun, CliError> {
    let split = p.prob.split;
    let (train, test, _) = make_data(&p.prob, split.n_train, split.n_test, seed)?;
    let outcome = run_arm(&p.prob, &p.cfg.arm(), &train, &test, seed)?;
    Ok(SeedRun { train, test, outcome })
}

fn finish(mut staging: Staging, command: &str, p: &Prepared, results: &[SeedStatus]) -> Result<PathBuf, CliError> {
    if !results.is_empty() && results.iter().all(|r| !r.ok) {
        let msgs: Vec<String> = results
            .iter()
            .map(|r| format!("seed {}: {}", r.seed, r.error.as_deref().unwrap_or("")))
            .collect();
        return Err(CliError::AllSeedsFailed(msgs.join("; ")));
    }
    write_manifest(&mut staging, command, p, results)?;
    staging.commit()
}

/// `run`: one arm per seed.
pub fn run(args: &CommonArgs, env_seed: Option<&str>) -> Result<PathBuf, CliError> {
    let p = prepare(args, env_seed)?;
    let mut staging = Staging::new(&p.out, args.force)?;
    let runs: Vec<(u64, Result<SeedRun, CliError>)> =
        pool(args.jobs)?.install(|| p.seeds.par_iter().map(|&s| (s, run_seed(&p, s))).collect());
    let arm = p.cfg.arm().name;
    let lab = labels(&p.prob);
    let mut metrics = Vec::new();
    let mut results = Vec::new();
    for (seed, r) in runs {
        let run = match r {
            Ok(run) => run,
            Err(e) => {
                results.push(SeedStatus {
                    seed,
                    ok: false,
                    error: Some(e.to_string()),
                });
                continue;
            }
        };
        let o = &run.outcome;
        metrics.push(metrics_row(seed, &arm, &o.metrics));
        let report_rows: Vec<Vec<String>> = o
            .train_report
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.to_string(),
                    num(e.data_loss),
                    num(e.physics_loss),
                    num(e.total_loss),
                    num(e.max_violation),
                ]
            })
            .collect();
        let name = format!("train_report_seed{seed}.csv");
        let header = strings(&["epoch", "data_loss", "physics_loss", "total_loss", "max_violation"]);
        staging.write(&name, &csv_bytes(&header, &report_rows)?)?;
        let loss_labels = Labels {
            x: "epoch".into(),
            y: "loss".into(),
            outputs: Vec::new(),
        };
        render_into(&mut staging, &name, PlotKind::Loss, &loss_labels)?;
        if !o.train_report.outer.is_empty() {
            let rows: Vec<Vec<String>> = o
                .train_report
                .outer
                .iter()
                .map(|r| vec![r.outer.to_string(), r.epochs.to_string(), num(r.penalty), num(r.max_violation)])
                .collect();
            let header = strings(&["outer", "epochs", "penalty", "max_violation"]);
            staging.write(&format!("al_outer_seed{seed}.csv"), &csv_bytes(&header, &rows)?)?;
        }
        let name = format!("trajectory_seed{seed}.csv");
        let header = strings(&["series", "x", "output", "value"]);
        let rows = trajectory_rows(&run.train, &run.test, &o.test_predictions);
        staging.write(&name, &csv_bytes(&header, &rows)?)?;
        render_into(&mut staging, &name, PlotKind::Trajectory, &lab)?;
        if let Some(b) = &o.bands {
            let name = format!("bands_seed{seed}.csv");
            staging.write(&name, &bands_csv(&run.test, b)?)?;
            render_into(&mut staging, &name, PlotKind::Bands, &lab)?;
        }
        let params = ParamsFile::new(seed, &o.train_report.theta, o.posterior.as_ref());
        let text = serde_json::to_string_pretty(&params).expect("params serialize");
        staging.write(&format!("params_seed{seed}.json"), text.as_bytes())?;
        results.push(SeedStatus {
            seed,
            ok: true,
            error: None,
        });
    }
    staging.write("metrics.csv", &csv_bytes(&strings(&METRICS_HEADER), &metrics)?)?;
    finish(staging, "run", &p, &results)
}

fn dataset_csv(d: &Dataset) -> Result<Vec<u8>, CliError> {
    let mut header: Vec<String> = (0..d.u.ncols()).map(|j| format!("input_{j}")).collect();
    header.extend((0..d.y.ncols()).map(|k| format!("output_{k}")));
    let rows: Vec<Vec<String>> = (0..d.len())
        .map(|i| {
            d.u.row(i)
                .iter()
                .chain(d.y.row(i).iter())
                .map(|v| num(*v))
                .collect()
        })
        .collect();
    csv_bytes(&header, &rows)
}

pub fn generate_data(args: &CommonArgs, env_seed: Option<&str>) -> Result<(), CliError> {
    let p = prepare(args, env_seed)?;
    let mut staging = Staging::new(&p.out, args.force)?;
    let mut results = Vec::new();
    for &seed in &p.seeds {
        match make_data(&p.prob, p.prob.split.n_train, p.prob.split.n_test, seed) {
            Ok((train, test, _)) => {
                staging.write(&format!("train_seed{seed}.csv"), &dataset_csv(&train)?)?;
                staging.write(&format!("test_seed{seed}.csv"), &dataset_csv(&test)?)?;
                results.push(SeedStatus {
                    seed,
                    ok: true,
                    error: None,
                });
            }
            Err(e) => results.push(SeedStatus {
                seed,
                ok: false,
                error: Some(e.to_string()),
            }),
        }
    }
    finish(staging, "generate-data", &p, &results).map(|_| ())
}

/// `evaluate`: metrics of a saved parameter file on the data of its seed.
pub fn evaluate(args: &CommonArgs, params_path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(params_path).map_err(|e| CliError::io(params_path, e))?;
    let params: ParamsFile =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", params_path.display())))?;
    let mut p = prepare(args, None)?;
    p.seeds = vec![params.seed];
    p.source = SeedSource::Flag;
    let mut staging = Staging::new(&p.out, args.force)?;
    let seed = params.seed;
    let (train, test, _) = make_data(&p.prob, p.prob.split.n_train, p.prob.split.n_test, seed)?;
    let model = build_model(&p.prob, &p.cfg.model)?;
    let theta = ParameterVector::new(params.theta.clone(), model.layout())
        .map_err(|e| CliError::Input(format!("parameters do not fit the configured model: {e}")))?;
    let projection = p.cfg.train.mode.is_hard().then(|| p.cfg.train.projection());
    let posterior = params.posterior()?;
    let est = match &posterior {
        Some(post) => Estimate::Posterior {
            posterior: post,
            samples: p.cfg.uq.band_samples,
            beta: p.cfg.uq.beta,
            seed: seed.wrapping_add(BAND_SEED_OFFSET),
        },
        None => Estimate::Point(&theta),
    };
    let (m, _) = evaluate_metrics(&model, est, projection, &p.prob, &train, &test)?;
    let row = metrics_row(seed, &p.cfg.arm().name, &m);
    staging.write("metrics.csv", &csv_bytes(&strings(&METRICS_HEADER), &[row])?)?;
    let results = [SeedStatus {
        seed,
        ok: true,
        error: None,
    }];
    finish(staging, "evaluate", &p, &results).map(|_| ())
}

#[derive(Debug, Serialize)]
struct ComparisonSummary<'a> {
    ml_arm: &'a str,
    pcml_arm: &'a str,
    paired_seeds: usize,
    rmse_wins: usize,
    band_wins: usize,
    mean_band_width_ml: Option<f64>,
    mean_band_width_pcml: Option<f64>,
}

/// `compare`: the paired comparison over the seed list.
pub fn compare(args: &CommonArgs, env_seed: Option<&str>) -> Result<ComparisonTable, CliError> {
    let p = prepare(args, env_seed)?;
    let mut staging = Staging::new(&p.out, args.force)?;
    let (ml, pcml) = (&p.cfg.compare.ml, &p.cfg.compare.pcml);
    let table = pool(args.jobs)?.install(|| bench::compare_ml_vs_pcml(&p.prob, ml, pcml, &p.seeds))?;
    let mut header = strings(&METRICS_HEADER);
    header.push("error".into());
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| match &r.metrics {
            Some(m) => {
                let mut row = metrics_row(r.seed, &r.arm, m);
                row.push(String::new());
                row
            }
            None => {
                let mut row = vec![r.seed.to_string(), r.arm.clone()];
                row.extend(std::iter::repeat_n(String::new(), METRICS_HEADER.len() - 2));
                row.push(r.error.clone().unwrap_or_default());
                row
            }
        })
        .collect();
    staging.write("comparison.csv", &csv_bytes(&header, &rows)?)?;
    let summary = ComparisonSummary {
        ml_arm: &ml.name,
        pcml_arm: &pcml.name,
        paired_seeds: table.paired_seeds,
        rmse_wins: table.rmse_wins,
        band_wins: table.band_wins,
        mean_band_width_ml: table.mean_band_width_ml,
        mean_band_width_pcml: table.mean_band_width_pcml,
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    staging.write("comparison.json", text.as_bytes())?;
    let results: Vec<SeedStatus> = p
        .seeds
        .iter()
        .map(|&seed| {
            let errors: Vec<String> = table
                .rows
                .iter()
                .filter(|r| r.seed == seed)
                .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.arm)))
                .collect();
            SeedStatus {
                seed,
                ok: errors.is_empty(),
                error: (!errors.is_empty()).then(|| errors.join("; ")),
            }
        })
        .collect();
    finish(staging, "compare", &p, &results)?;
    Ok(table)
}

pub fn plot(
    csv: &Path,
    kind: PlotKind,
    out: &Path,
    x_label: Option<String>,
    y_label: Option<String>,
) -> Result<(), CliError> {
    let (dx, dy) = match kind {
        PlotKind::Trajectory => ("x", "value"),
        PlotKind::Bands => ("input_0", "value"),
        PlotKind::Loss => ("epoch", "loss"),
    };
    let labels = Labels {
        x: x_label.unwrap_or_else(|| dx.into()),
        y: y_label.unwrap_or_else(|| dy.into()),
        outputs: Vec::new(),
    };
    plot::plot(csv, kind, out, &labels)?;
    Ok(())
}
