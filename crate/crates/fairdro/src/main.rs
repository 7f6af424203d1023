//! Thin command-line front end over the library: `train` one
//! configuration, `sweep` a hyperparameter grid across seeds, `eval` a
//! saved model against a CSV, `synth` a benchmark table. Flags mirror a
//! flat key-value config file (`--config`), with explicit flags winning.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairdro::dataset::{generate_synthetic, load_csv, save_csv, SyntheticSpec};
use fairdro::harness::{
    default_rho_grid, emit_report, load_file_config, run_experiment, sweep, DataSource,
    FileConfig, ReportFormat, ReportPayload, SweepPoint,
};
use fairdro::metrics::{evaluate, MetricsReport, Provenance};
use fairdro::model::LinearModel;
use fairdro::trainer::{TrainConfig, Variant};
use fairdro::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fairdro",
    about = "Group-robust training for linear classifiers on tabular data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and report held-out metrics.
    Train(TrainArgs),
    /// Run a hyperparameter grid across seeds and aggregate.
    Sweep(SweepArgs),
    /// Evaluate a saved model checkpoint against a CSV.
    Eval(EvalArgs),
    /// Generate a synthetic benchmark table as CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key-value TOML file mirroring these flags; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV with a header row; all non-label columns are numeric features.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Column holding the class label [default: class]
    #[arg(long)]
    class_col: Option<String>,
    /// Column holding the group label [default: group]
    #[arg(long)]
    group_col: Option<String>,
    /// fairdro, fairdro_no_classwise, fairdro_nonneg, scratch, rw,
    /// gap_reg, var_reg, or group_dro.
    #[arg(long)]
    variant: Option<String>,
    /// Uncertainty-ball radius (chi-square variants).
    #[arg(long)]
    rho: Option<f64>,
    /// Penalty strength (regularizer variants).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Mini-batch steps per epoch [default: one pass over the rows]
    #[arg(long)]
    iters: Option<usize>,
    /// Mini-batch size; must be divisible by classes x groups.
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate for the cosine schedule.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    /// Ascent step for the simplex baseline.
    #[arg(long)]
    eg_step: Option<f64>,
    /// Apply raw group-weight targets instead of the decaying mix.
    #[arg(long)]
    no_smoothing: bool,
    /// Held-out fraction for the stratified split [default: 0.2]
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Write the machine-readable report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: json or csv [default: json]
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Refresh group weights every this many iterations instead of once
    /// per epoch.
    #[arg(long)]
    q_interval: Option<usize>,
    /// Save the trained model checkpoint here.
    #[arg(long)]
    save_model: Option<PathBuf>,
    /// Save the per-epoch training history here (JSON lines).
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated run seeds [default: 0,1,2,3]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated grid over the swept hyperparameter
    /// [default for radius variants: 7 log-spaced values in 1e-2..1e2]
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// Worker threads; 0 means one per core [default: 0]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint produced by `train --save-model`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Column holding the class label [default: class]
    #[arg(long)]
    class_col: Option<String>,
    /// Column holding the group label [default: group]
    #[arg(long)]
    group_col: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format: json or csv [default: json]
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    groups: usize,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 625)]
    rows_per_cell: usize,
    /// Distance between class means.
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    /// Per-group feature noise scales, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 3.0])]
    noise: Vec<f64>,
    /// Per-group rotation of the class axes, degrees, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 75.0])]
    rotations: Vec<f64>,
    #[arg(long, default_value_t = 12345)]
    seed: u64,
    /// Where to write the CSV.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        Some(p) => load_file_config(p),
        None => Ok(FileConfig::default()),
    }
}

struct Resolved {
    config: TrainConfig,
    source: DataSource,
    test_fraction: f64,
    out: Option<PathBuf>,
    format: ReportFormat,
    file: FileConfig,
}

fn resolve_common(args: CommonArgs) -> Result<Resolved> {
    let file = file_config(&args.config)?;
    let variant_name = args
        .variant
        .or_else(|| file.variant.clone())
        .ok_or_else(|| {
            Error::InvalidParameter("a variant is required (--variant or config file)".into())
        })?;
    let variant: Variant = variant_name.parse()?;
    let mut config = TrainConfig::defaults(variant);
    config.rho = args.rho.or(file.rho);
    config.lambda = args.lambda.or(file.lambda);
    if let Some(v) = args.epochs.or(file.epochs) {
        config.epochs = v;
    }
    config.iterations_per_epoch = args.iters.or(file.iters);
    if let Some(v) = args.batch.or(file.batch) {
        config.batch_size = v;
    }
    if let Some(v) = args.lr.or(file.lr) {
        config.base_lr = v;
    }
    if let Some(v) = args.wd.or(file.wd) {
        config.weight_decay = v;
    }
    if let Some(v) = args.eg_step.or(file.eg_step) {
        config.eg_step = v;
    }
    config.smoothing = !(args.no_smoothing || file.no_smoothing.unwrap_or(false));

    let data = args.data.or_else(|| file.data.clone()).ok_or_else(|| {
        Error::InvalidParameter("a data path is required (--data or config file)".into())
    })?;
    let source = DataSource::Csv {
        path: data,
        class_col: args
            .class_col
            .or_else(|| file.class_col.clone())
            .unwrap_or_else(|| "class".into()),
        group_col: args
            .group_col
            .or_else(|| file.group_col.clone())
            .unwrap_or_else(|| "group".into()),
    };
    let test_fraction = args.test_fraction.or(file.test_fraction).unwrap_or(0.2);
    let out = args.out.or_else(|| file.out.clone());
    let format: ReportFormat = args
        .format
        .or_else(|| file.format.clone())
        .as_deref()
        .unwrap_or("json")
        .parse()?;
    Ok(Resolved {
        config,
        source,
        test_fraction,
        out,
        format,
        file,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_else(|| "-".into())
}

fn print_report(r: &MetricsReport) {
    println!(
        "variant={} rho={} lambda={} seed={}",
        r.provenance.variant,
        opt(r.provenance.rho),
        opt(r.provenance.lambda),
        r.provenance.seed
    );
    println!(
        "balanced_acc={:.6} dca={:.6} deo={:.6} worst_group_acc={:.6}",
        r.balanced_accuracy, r.dca, r.deo, r.worst_group_accuracy
    );
    for y in 0..r.cell_accuracies.num_classes() {
        let row: Vec<String> = (0..r.cell_accuracies.num_groups())
            .map(|a| format!("{:.4}", r.cell_accuracies.acc(y, a)))
            .collect();
        println!("class {y} group accuracies: {}", row.join(" "));
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let resolved = resolve_common(args.common)?;
    let mut config = resolved.config;
    config.seed = args.seed.or(resolved.file.seed).unwrap_or(0);
    config.q_update_interval = args.q_interval;
    let output = run_experiment(&config, &resolved.source, resolved.test_fraction)?;
    print_report(&output.report);
    if let Some(path) = &args.save_model {
        output.model.save(path)?;
        println!("model saved to {}", path.display());
    }
    if let Some(path) = &args.history {
        output.history.save_jsonl(path)?;
        println!("history saved to {}", path.display());
    }
    if let Some(path) = &resolved.out {
        emit_report(
            ReportPayload::Single(&output.report),
            path,
            resolved.format,
        )?;
        println!("report saved to {}", path.display());
    }
    Ok(())
}

fn point_label(p: &SweepPoint) -> String {
    match (p.rho, p.lambda) {
        (Some(r), _) => format!("rho={r}"),
        (None, Some(l)) => format!("lambda={l}"),
        (None, None) => "fixed".into(),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let resolved = resolve_common(args.common)?;
    let variant = resolved.config.variant;
    let seeds = args
        .seeds
        .or_else(|| resolved.file.seeds.clone())
        .unwrap_or_else(|| vec![0, 1, 2, 3]);
    let grid = match args.grid.or_else(|| resolved.file.grid.clone()) {
        Some(g) => g,
        None if variant.needs_rho() => default_rho_grid(),
        None if variant.needs_lambda() => {
            return Err(Error::InvalidParameter(format!(
                "variant {variant} sweeps the penalty strength; pass --grid"
            )))
        }
        None => vec![0.0],
    };
    let workers = args.workers.or(resolved.file.workers).unwrap_or(0);
    let result = sweep(
        &resolved.config,
        &resolved.source,
        &grid,
        &seeds,
        resolved.test_fraction,
        workers,
    )?;
    println!(
        "variant={variant} seeds={} grid points={}",
        seeds.len(),
        grid.len()
    );
    for p in &result.points {
        println!(
            "{}: balanced_acc={:.6}±{:.6} dca={:.6}±{:.6} deo={:.6}±{:.6} worst_group_acc={:.6}±{:.6}",
            point_label(p),
            p.mean.balanced_acc,
            p.std.balanced_acc,
            p.mean.dca,
            p.std.dca,
            p.mean.deo,
            p.std.deo,
            p.mean.worst_group_acc,
            p.std.worst_group_acc
        );
        for f in &p.failures {
            eprintln!("{}: seed {} failed: {}", point_label(p), f.seed, f.error);
        }
    }
    for d in &result.dropped {
        let label = match (d.rho, d.lambda) {
            (Some(r), _) => format!("rho={r}"),
            (None, Some(l)) => format!("lambda={l}"),
            (None, None) => "fixed".into(),
        };
        eprintln!(
            "{label}: dropped, every seed failed (first: {})",
            d.failures.first().map_or("", |f| f.error.as_str())
        );
    }
    if let Some(path) = &resolved.out {
        emit_report(ReportPayload::Sweep(&result), path, resolved.format)?;
        println!("report saved to {}", path.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = file_config(&args.config)?;
    let data = args.data.or_else(|| file.data.clone()).ok_or_else(|| {
        Error::InvalidParameter("a data path is required (--data or config file)".into())
    })?;
    let class_col = args
        .class_col
        .or_else(|| file.class_col.clone())
        .unwrap_or_else(|| "class".into());
    let group_col = args
        .group_col
        .or_else(|| file.group_col.clone())
        .unwrap_or_else(|| "group".into());
    let format: ReportFormat = args
        .format
        .or_else(|| file.format.clone())
        .as_deref()
        .unwrap_or("json")
        .parse()?;
    let model = LinearModel::load(&args.model)?;
    let loaded = load_csv(&data, &class_col, &group_col)?;
    let provenance = Provenance {
        variant: "eval".into(),
        rho: None,
        lambda: None,
        seed: 0,
        epochs: 0,
    };
    let report = evaluate(&model, &loaded.dataset, provenance)?;
    print_report(&report);
    if let Some(path) = args.out.as_ref().or(file.out.as_ref()) {
        emit_report(ReportPayload::Single(&report), path, format)?;
        println!("report saved to {}", path.display());
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        num_groups: args.groups,
        dim: args.dim,
        cell_counts: vec![vec![args.rows_per_cell; args.groups]; args.classes],
        class_mean_separation: args.separation,
        group_noise_scales: args.noise,
        group_rotations: args.rotations.iter().map(|d| d.to_radians()).collect(),
        seed: args.seed,
    };
    let data = generate_synthetic(&spec)?;
    save_csv(&data, &args.out)?;
    println!(
        "wrote {} rows ({} classes x {} groups, {} features) to {}",
        data.num_rows(),
        data.num_classes(),
        data.num_groups(),
        spec.dim,
        args.out.display()
    );
    Ok(())
}
