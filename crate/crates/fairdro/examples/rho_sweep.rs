//! The accuracy-fairness trade-off, traced over the ball radius.
//!
//! Sweeps the full method across a log-spaced radius grid with a few seeds
//! each, prints the per-radius means, extracts the Pareto frontier in the
//! (gap, accuracy) plane, and applies the selection rule: the smallest gap
//! among radii that keep at least 95% of the plain baseline's accuracy.
//! Radius zero collapses to the baseline; large radii buy smaller gaps
//! with a controlled accuracy cost.

use fairdro::harness::{default_rho_grid, pareto_envelope, select_model, select_per_seed, sweep};
use fairdro::{DataSource, SyntheticSpec, TrainConfig, Variant};

fn main() -> fairdro::Result<()> {
    let source = DataSource::Synthetic(SyntheticSpec::biased(150, 13));
    let seeds = [0, 1, 2];

    let mut plain = TrainConfig::defaults(Variant::Scratch);
    plain.epochs = 25;
    let base = sweep(&plain, &source, &[0.0], &seeds, 0.2, 0)?;
    let scratch_acc = base.points[0].mean.balanced_acc;
    println!(
        "plain baseline: balanced_acc {:.4}, dca {:.4}\n",
        scratch_acc, base.points[0].mean.dca
    );

    let mut config = TrainConfig::defaults(Variant::FairDro);
    config.epochs = 25;
    let grid = default_rho_grid();
    let result = sweep(&config, &source, &grid, &seeds, 0.2, 0)?;

    println!("{:>10} {:>10} {:>10}", "rho", "bal_acc", "dca");
    for p in &result.points {
        println!(
            "{:>10.4} {:>10.4} {:>10.4}",
            p.rho.unwrap(),
            p.mean.balanced_acc,
            p.mean.dca
        );
    }

    let cloud: Vec<(f64, f64)> = result
        .points
        .iter()
        .map(|p| (p.mean.dca, p.mean.balanced_acc))
        .collect();
    let frontier = pareto_envelope(&cloud)?;
    println!("\nPareto frontier (gap, accuracy), left to right:");
    for (d, a) in &frontier.non_dominated {
        println!("  ({d:.4}, {a:.4})");
    }
    println!("upper concave hull has {} vertices", frontier.hull.len());

    let sel = select_model(&result, scratch_acc)?;
    println!(
        "\nselected rho = {:.4}: dca {:.4}, balanced_acc {:.4} (threshold {:.4}{})",
        sel.point.rho.unwrap_or(f64::NAN),
        sel.point.mean.dca,
        sel.point.mean.balanced_acc,
        sel.threshold,
        if sel.infeasible { ", nothing met it" } else { "" }
    );

    // Sensitivity check: apply the same rule to each seed's own runs.
    let per_seed: Vec<(u64, f64)> = base.points[0]
        .seeds
        .iter()
        .zip(&base.points[0].reports)
        .map(|(&s, r)| (s, r.balanced_accuracy))
        .collect();
    println!("per-seed picks:");
    for pick in select_per_seed(&result, &per_seed)? {
        println!(
            "  seed {}: rho = {:.4}, dca {:.4}{}",
            pick.seed,
            pick.rho.unwrap_or(f64::NAN),
            pick.metrics.dca,
            if pick.infeasible { " (floor missed)" } else { "" }
        );
    }
    Ok(())
}
