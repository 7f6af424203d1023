//! Experiment orchestration: single runs, hyperparameter sweeps across
//! seeds, trade-off frontiers, the accuracy-floor selection rule, and
//! machine-readable reports.
//!
//! A run is fully determined by its configuration, data source, and seed:
//! the synthetic generation seed, the split seed, and the training stream
//! are all derived from the run seed, so two variants launched with the
//! same seed see byte-identical data and sampling. Sweeps fan runs out
//! over a thread pool and reassemble results in grid order, making the
//! output independent of scheduling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, load_csv, split, LabeledDataset, SyntheticSpec};
use crate::metrics::{evaluate, MetricsReport, Provenance};
use crate::model::LinearModel;
use crate::trainer::{train, TrainConfig, TrainHistory, Variant};
use crate::{Error, Result};

/// Where a run's rows come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        class_col: String,
        group_col: String,
    },
    Synthetic(SyntheticSpec),
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream label into an independent stream seed.
/// Used to give generation, splitting, and training their own streams off
/// one run seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

const SPLIT_STREAM: u64 = 0x5A11_D517;

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

/// Everything a single run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub model: LinearModel,
    pub history: TrainHistory,
    pub report: MetricsReport,
}

fn load_source(source: &DataSource, run_seed: u64) -> Result<LabeledDataset> {
    match source {
        DataSource::Csv {
            path,
            class_col,
            group_col,
        } => Ok(load_csv(path, class_col, group_col)?.dataset),
        DataSource::Synthetic(spec) => {
            // Each run seed draws its own population; the spec seed keeps
            // distinct specs distinct.
            let mut spec = spec.clone();
            spec.seed = derive_seed(spec.seed, run_seed);
            generate_synthetic(&spec)
        }
    }
}

/// Load or generate, split, train, evaluate on the held-out split.
/// Errors are tagged with the stage that produced them, and configuration
/// problems surface before any data is touched.
pub fn run_experiment(
    config: &TrainConfig,
    source: &DataSource,
    test_fraction: f64,
) -> Result<RunOutput> {
    staged("config", config.validate_parameters())?;
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Stage {
            stage: "config",
            source: Box::new(Error::InvalidParameter(format!(
                "test fraction must be in (0, 1), got {test_fraction}"
            ))),
        });
    }
    let data = staged("load", load_source(source, config.seed))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SPLIT_STREAM));
    let (train_d, test_d) = staged("split", split(&data, test_fraction, &mut rng))?;
    let (model, history) = staged("train", train(config, &train_d, &test_d))?;
    let provenance = Provenance {
        variant: config.variant.name().to_string(),
        rho: if config.variant.needs_rho() {
            config.rho
        } else {
            None
        },
        lambda: if config.variant.needs_lambda() {
            config.lambda
        } else {
            None
        },
        seed: config.seed,
        epochs: config.epochs,
    };
    let report = staged("evaluate", evaluate(&model, &test_d, provenance))?;
    Ok(RunOutput {
        model,
        history,
        report,
    })
}

/// The four summary scalars, named as in the report columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub balanced_acc: f64,
    pub dca: f64,
    pub deo: f64,
    pub worst_group_acc: f64,
}

impl MetricsSummary {
    fn of(r: &MetricsReport) -> Self {
        Self {
            balanced_acc: r.balanced_accuracy,
            dca: r.dca,
            deo: r.deo,
            worst_group_acc: r.worst_group_accuracy,
        }
    }
}

/// One run that did not finish, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

/// One grid value's aggregate: the surviving per-seed reports with their
/// across-seed mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub variant: Variant,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub seeds: Vec<u64>,
    pub mean: MetricsSummary,
    pub std: MetricsSummary,
    pub reports: Vec<MetricsReport>,
    pub failures: Vec<RunFailure>,
}

/// A grid value where every seed failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedPoint {
    pub variant: Variant,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub failures: Vec<RunFailure>,
}

/// All sweep output, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub dropped: Vec<DroppedPoint>,
}

/// The default radius grid: 7 log-spaced values across [1e-2, 1e2].
pub fn default_rho_grid() -> Vec<f64> {
    (0..7)
        .map(|k| 10f64.powf(-2.0 + 4.0 * k as f64 / 6.0))
        .collect()
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs `base` once per (grid value, seed) pair. The grid value fills the
/// swept hyperparameter (radius or penalty strength, by variant); for
/// variants with neither, the grid must be a single placeholder value.
/// Failed runs are recorded and the sweep continues; a grid value with no
/// surviving seed moves to `dropped`.
pub fn sweep(
    base: &TrainConfig,
    source: &DataSource,
    grid: &[f64],
    seeds: &[u64],
    test_fraction: f64,
    workers: usize,
) -> Result<SweepResult> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs a non-empty grid and at least one seed".into(),
        ));
    }
    let sweeps_nothing = !base.variant.needs_rho() && !base.variant.needs_lambda();
    if sweeps_nothing && grid.len() > 1 {
        return Err(Error::InvalidParameter(format!(
            "variant {} has no swept hyperparameter; pass a single grid value",
            base.variant
        )));
    }
    let jobs: Vec<(usize, u64)> = grid
        .iter()
        .enumerate()
        .flat_map(|(gi, _)| seeds.iter().map(move |&s| (gi, s)))
        .collect();
    let run_one = |&(gi, seed): &(usize, u64)| -> Result<MetricsReport> {
        let mut config = base.clone();
        config.seed = seed;
        if base.variant.needs_rho() {
            config.rho = Some(grid[gi]);
        } else if base.variant.needs_lambda() {
            config.lambda = Some(grid[gi]);
        }
        run_experiment(&config, source, test_fraction).map(|out| out.report)
    };
    let results: Vec<Result<MetricsReport>> = if workers == 1 {
        jobs.iter().map(run_one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect())
    };

    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for (gi, &value) in grid.iter().enumerate() {
        let rho = base.variant.needs_rho().then_some(value);
        let lambda = base.variant.needs_lambda().then_some(value);
        let mut reports = Vec::new();
        let mut ok_seeds = Vec::new();
        let mut failures = Vec::new();
        for (job, result) in jobs.iter().zip(&results) {
            if job.0 != gi {
                continue;
            }
            match result {
                Ok(report) => {
                    ok_seeds.push(job.1);
                    reports.push(report.clone());
                }
                Err(e) => failures.push(RunFailure {
                    seed: job.1,
                    error: e.to_string(),
                }),
            }
        }
        if reports.is_empty() {
            dropped.push(DroppedPoint {
                variant: base.variant,
                rho,
                lambda,
                failures,
            });
            continue;
        }
        let col = |f: fn(&MetricsReport) -> f64| -> (f64, f64) {
            let values: Vec<f64> = reports.iter().map(f).collect();
            mean_and_std(&values)
        };
        let (acc_m, acc_s) = col(|r| r.balanced_accuracy);
        let (dca_m, dca_s) = col(|r| r.dca);
        let (deo_m, deo_s) = col(|r| r.deo);
        let (worst_m, worst_s) = col(|r| r.worst_group_accuracy);
        points.push(SweepPoint {
            variant: base.variant,
            rho,
            lambda,
            seeds: ok_seeds,
            mean: MetricsSummary {
                balanced_acc: acc_m,
                dca: dca_m,
                deo: deo_m,
                worst_group_acc: worst_m,
            },
            std: MetricsSummary {
                balanced_acc: acc_s,
                dca: dca_s,
                deo: deo_s,
                worst_group_acc: worst_s,
            },
            reports,
            failures,
        });
    }
    Ok(SweepResult { points, dropped })
}

/// The two trade-off frontiers over (dca, balanced accuracy) points:
/// the non-dominated set and its upper-left convex hull, both ordered by
/// increasing dca.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub non_dominated: Vec<(f64, f64)>,
    pub hull: Vec<(f64, f64)>,
}

/// A point is dominated when another point has no worse dca and no worse
/// accuracy, strictly better in at least one. Exact duplicates collapse to
/// one representative.
pub fn pareto_envelope(points: &[(f64, f64)]) -> Result<ParetoFrontier> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if points.iter().any(|(d, a)| !d.is_finite() || !a.is_finite()) {
        return Err(Error::InvalidInput("non-finite trade-off point".into()));
    }
    let mut unique: Vec<(f64, f64)> = points.to_vec();
    unique.sort_by(|p, q| p.partial_cmp(q).expect("finite points"));
    unique.dedup();
    let mut non_dominated: Vec<(f64, f64)> = unique
        .iter()
        .filter(|&&(d, a)| {
            !unique
                .iter()
                .any(|&(d2, a2)| d2 <= d && a2 >= a && (d2 < d || a2 > a))
        })
        .copied()
        .collect();
    non_dominated.sort_by(|p, q| p.partial_cmp(q).expect("finite points"));

    // Upper hull of the x-sorted frontier: drop any point on or below the
    // chord of its neighbors.
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(non_dominated.len());
    for &p in &non_dominated {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    Ok(ParetoFrontier {
        non_dominated,
        hull,
    })
}

/// The sweep entry picked by the accuracy-floor rule, or the infeasible
/// fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub point: SweepPoint,
    /// No entry met the accuracy floor; `point` is the highest-accuracy
    /// entry instead.
    pub infeasible: bool,
    /// The accuracy floor that was applied.
    pub threshold: f64,
}

fn grid_value(p: &SweepPoint) -> f64 {
    p.rho.or(p.lambda).unwrap_or(0.0)
}

/// Among entries whose seed-averaged balanced accuracy is at least 95% of
/// the reference accuracy, picks the lowest-dca one (ties: higher
/// accuracy, then smaller hyperparameter). With no qualifying entry,
/// returns the highest-accuracy one flagged infeasible.
pub fn select_model(sweep: &SweepResult, scratch_accuracy: f64) -> Result<Selection> {
    if sweep.points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(scratch_accuracy > 0.0 && scratch_accuracy <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "reference accuracy must be in (0, 1], got {scratch_accuracy}"
        )));
    }
    let threshold = 0.95 * scratch_accuracy;
    let feasible: Vec<&SweepPoint> = sweep
        .points
        .iter()
        .filter(|p| p.mean.balanced_acc >= threshold)
        .collect();
    let pick_feasible = feasible.into_iter().min_by(|p, q| {
        p.mean
            .dca
            .partial_cmp(&q.mean.dca)
            .unwrap()
            .then(q.mean.balanced_acc.partial_cmp(&p.mean.balanced_acc).unwrap())
            .then(grid_value(p).partial_cmp(&grid_value(q)).unwrap())
    });
    match pick_feasible {
        Some(point) => Ok(Selection {
            point: point.clone(),
            infeasible: false,
            threshold,
        }),
        None => {
            let best = sweep
                .points
                .iter()
                .min_by(|p, q| {
                    q.mean
                        .balanced_acc
                        .partial_cmp(&p.mean.balanced_acc)
                        .unwrap()
                        .then(grid_value(p).partial_cmp(&grid_value(q)).unwrap())
                })
                .expect("non-empty points");
            Ok(Selection {
                point: best.clone(),
                infeasible: true,
                threshold,
            })
        }
    }
}

/// One seed's own selection, for checking how stable the averaged choice
/// of [`select_model`] is across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSelection {
    pub seed: u64,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub metrics: MetricsSummary,
    pub infeasible: bool,
    pub threshold: f64,
}

/// Applies the accuracy-floor rule to each seed's individual runs instead
/// of the seed-averaged metrics. `scratch` pairs each seed with its own
/// plain-baseline accuracy. A seed with runs at only some grid values
/// (failures elsewhere) competes with the runs it has; a seed present in
/// no point is an error.
pub fn select_per_seed(sweep: &SweepResult, scratch: &[(u64, f64)]) -> Result<Vec<SeedSelection>> {
    if sweep.points.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = Vec::with_capacity(scratch.len());
    for &(seed, reference) in scratch {
        if !(reference > 0.0 && reference <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "reference accuracy must be in (0, 1], got {reference}"
            )));
        }
        let threshold = 0.95 * reference;
        let candidates: Vec<(&SweepPoint, MetricsSummary)> = sweep
            .points
            .iter()
            .filter_map(|p| {
                let i = p.seeds.iter().position(|&s| s == seed)?;
                Some((p, MetricsSummary::of(&p.reports[i])))
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "seed {seed} has no successful run in this sweep"
            )));
        }
        let feasible = candidates
            .iter()
            .filter(|(_, m)| m.balanced_acc >= threshold)
            .min_by(|(p, m), (q, n)| {
                m.dca
                    .partial_cmp(&n.dca)
                    .unwrap()
                    .then(n.balanced_acc.partial_cmp(&m.balanced_acc).unwrap())
                    .then(grid_value(p).partial_cmp(&grid_value(q)).unwrap())
            });
        let (point, metrics, infeasible) = match feasible {
            Some(&(p, m)) => (p, m, false),
            None => {
                let &(p, m) = candidates
                    .iter()
                    .min_by(|(p, m), (q, n)| {
                        n.balanced_acc
                            .partial_cmp(&m.balanced_acc)
                            .unwrap()
                            .then(grid_value(p).partial_cmp(&grid_value(q)).unwrap())
                    })
                    .expect("non-empty candidates");
                (p, m, true)
            }
        };
        out.push(SeedSelection {
            seed,
            rho: point.rho,
            lambda: point.lambda,
            metrics,
            infeasible,
            threshold,
        });
    }
    Ok(out)
}

/// What to write: one run's report or a whole sweep.
#[derive(Debug, Clone, Copy)]
pub enum ReportPayload<'a> {
    Single(&'a MetricsReport),
    Sweep(&'a SweepResult),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidParameter(format!(
                "unknown format '{other}' (expected json or csv)"
            ))),
        }
    }
}

/// One flat row per run, shared by both output formats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub balanced_acc: f64,
    pub dca: f64,
    pub deo: f64,
    pub worst_group_acc: f64,
}

impl RunRecord {
    pub fn from_report(r: &MetricsReport) -> Self {
        Self {
            variant: r.provenance.variant.clone(),
            rho: r.provenance.rho,
            lambda: r.provenance.lambda,
            seed: r.provenance.seed,
            balanced_acc: r.balanced_accuracy,
            dca: r.dca,
            deo: r.deo,
            worst_group_acc: r.worst_group_accuracy,
        }
    }
}

fn run_records(payload: &ReportPayload) -> Vec<RunRecord> {
    match payload {
        ReportPayload::Single(report) => vec![RunRecord::from_report(report)],
        ReportPayload::Sweep(sweep) => sweep
            .points
            .iter()
            .flat_map(|p| p.reports.iter().map(RunRecord::from_report))
            .collect(),
    }
}

/// The summary half of the JSON document: per-point aggregates without
/// the nested reports, plus anything that failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub variant: Variant,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub seeds: Vec<u64>,
    pub mean: MetricsSummary,
    pub std: MetricsSummary,
    pub failures: Vec<RunFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepDocument {
    runs: Vec<RunRecord>,
    summary: SweepSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepSummary {
    points: Vec<PointSummary>,
    dropped: Vec<DroppedPoint>,
}

fn open_out(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufWriter::new(file))
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes the payload to `path`. CSV: one row per run under a fixed
/// header, numbers at full round-trip precision. JSON: the flat run
/// records plus a summary block (per-point means, deviations, failures);
/// a single report serializes as itself. Byte-deterministic for equal
/// payloads.
pub fn emit_report(payload: ReportPayload, path: &Path, format: ReportFormat) -> Result<()> {
    let mut out = open_out(path)?;
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "variant",
                "rho",
                "lambda",
                "seed",
                "balanced_acc",
                "dca",
                "deo",
                "worst_group_acc",
            ])?;
            for r in run_records(&payload) {
                w.write_record([
                    r.variant.clone(),
                    opt_field(r.rho),
                    opt_field(r.lambda),
                    format!("{}", r.seed),
                    format!("{}", r.balanced_acc),
                    format!("{}", r.dca),
                    format!("{}", r.deo),
                    format!("{}", r.worst_group_acc),
                ])?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            match payload {
                ReportPayload::Single(report) => {
                    serde_json::to_writer_pretty(&mut out, report)?;
                }
                ReportPayload::Sweep(sweep) => {
                    let doc = SweepDocument {
                        runs: run_records(&payload),
                        summary: SweepSummary {
                            points: sweep
                                .points
                                .iter()
                                .map(|p| PointSummary {
                                    variant: p.variant,
                                    rho: p.rho,
                                    lambda: p.lambda,
                                    seeds: p.seeds.clone(),
                                    mean: p.mean,
                                    std: p.std,
                                    failures: p.failures.clone(),
                                })
                                .collect(),
                            dropped: sweep.dropped.clone(),
                        },
                    };
                    serde_json::to_writer_pretty(&mut out, &doc)?;
                }
            }
            out.write_all(b"\n")?;
            out.flush()?;
        }
    }
    Ok(())
}

/// Flat key-value configuration file mirroring the command-line flags;
/// explicit flags override file values.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub variant: Option<String>,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
    pub iters: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub wd: Option<f64>,
    pub eg_step: Option<f64>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub grid: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub workers: Option<usize>,
    pub no_smoothing: Option<bool>,
    pub data: Option<PathBuf>,
    pub class_col: Option<String>,
    pub group_col: Option<String>,
    pub test_fraction: Option<f64>,
}

pub fn load_file_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
