//! The file-based workflow, without the CLI.
//!
//! Writes a synthetic table to CSV, loads it back by column name, trains
//! on the loaded copy, and emits a JSON report. Labels in the CSV can be
//! arbitrary strings; the loader assigns integer codes in order of first
//! appearance and the report is keyed by those codes.

use fairdro::dataset::{generate_synthetic, load_csv, save_csv};
use fairdro::harness::{emit_report, run_experiment, ReportFormat, ReportPayload};
use fairdro::{DataSource, SyntheticSpec, TrainConfig, Variant};

fn main() -> fairdro::Result<()> {
    let dir = std::env::temp_dir().join("fairdro_csv_roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| fairdro::Error::File {
        path: dir.clone(),
        source: e,
    })?;
    let csv_path = dir.join("table.csv");
    let report_path = dir.join("report.json");

    let spec = SyntheticSpec::biased(100, 8);
    let data = generate_synthetic(&spec)?;
    save_csv(&data, &csv_path)?;
    println!("wrote {} rows to {}", data.num_rows(), csv_path.display());

    let loaded = load_csv(&csv_path, "class", "group")?;
    println!(
        "loaded back: {} classes {:?}, {} groups {:?}",
        loaded.class_codes.len(),
        loaded.class_codes,
        loaded.group_codes.len(),
        loaded.group_codes
    );
    assert_eq!(loaded.dataset.classes(), data.classes());
    assert_eq!(loaded.dataset.groups(), data.groups());

    let mut config = TrainConfig::defaults(Variant::FairDro);
    config.rho = Some(2.0);
    config.epochs = 20;
    let source = DataSource::Csv {
        path: csv_path,
        class_col: "class".into(),
        group_col: "group".into(),
    };
    let out = run_experiment(&config, &source, 0.2)?;
    emit_report(
        ReportPayload::Single(&out.report),
        &report_path,
        ReportFormat::Json,
    )?;
    println!(
        "trained from the CSV: balanced_acc {:.3}, dca {:.3}",
        out.report.balanced_accuracy, out.report.dca
    );
    println!("report saved to {}", report_path.display());
    Ok(())
}
