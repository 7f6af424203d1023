//! Tabular datasets carrying a class label and a group label per row.
//!
//! Everything downstream works off the class-group cell structure: the
//! partition indexes rows by `(class, group)`, the balanced sampler draws
//! equal-sized quotas from every cell, and the stratified split keeps every
//! cell populated on both sides. A synthetic generator produces Gaussian
//! cell data with controllable group bias for desk-scale experiments.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Feature matrix plus per-row class and group labels.
///
/// Labels are dense integer codes: every class lies in `0..num_classes`,
/// every group in `0..num_groups`, and both label spaces have at least two
/// values. Features are finite.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Array2<f64>,
    classes: Vec<usize>,
    groups: Vec<usize>,
    num_classes: usize,
    num_groups: usize,
}

impl LabeledDataset {
    /// Builds a dataset, inferring `num_classes` and `num_groups` from the
    /// largest label present.
    pub fn new(features: Array2<f64>, classes: Vec<usize>, groups: Vec<usize>) -> Result<Self> {
        let num_classes = classes.iter().max().map_or(0, |m| m + 1);
        let num_groups = groups.iter().max().map_or(0, |m| m + 1);
        Self::with_sizes(features, classes, groups, num_classes, num_groups)
    }

    /// Builds a dataset with explicit label-space sizes. Useful for subsets
    /// that may not contain every label.
    pub fn with_sizes(
        features: Array2<f64>,
        classes: Vec<usize>,
        groups: Vec<usize>,
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if classes.len() != n || groups.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} class and group labels"),
                got: format!("{} classes, {} groups", classes.len(), groups.len()),
            });
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, found {num_classes}"
            )));
        }
        if num_groups < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 groups, found {num_groups}"
            )));
        }
        if let Some(y) = classes.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "class label {y} out of range 0..{num_classes}"
            )));
        }
        if let Some(a) = groups.iter().find(|&&a| a >= num_groups) {
            return Err(Error::InvalidInput(format!(
                "group label {a} out of range 0..{num_groups}"
            )));
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "features contain a non-finite value".into(),
            ));
        }
        Ok(Self {
            features,
            classes,
            groups,
            num_classes,
            num_groups,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn num_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// Copies the given rows into a new dataset with the same label-space
    /// sizes as `self`.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let mut features = Array2::zeros((rows.len(), self.num_features()));
        let mut classes = Vec::with_capacity(rows.len());
        let mut groups = Vec::with_capacity(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            if r >= self.num_rows() {
                return Err(Error::InvalidInput(format!(
                    "row index {r} out of range 0..{}",
                    self.num_rows()
                )));
            }
            features.row_mut(out).assign(&self.features.row(r));
            classes.push(self.classes[r]);
            groups.push(self.groups[r]);
        }
        Self::with_sizes(features, classes, groups, self.num_classes, self.num_groups)
    }
}

/// A dataset loaded from CSV, plus the label codings used to build it so
/// reports can be audited against the original file.
#[derive(Debug, Clone)]
pub struct CsvLoad {
    pub dataset: LabeledDataset,
    /// Class token for each integer code, in first-occurrence order.
    pub class_codes: Vec<String>,
    /// Group token for each integer code, in first-occurrence order.
    pub group_codes: Vec<String>,
    /// Names of the columns used as features, in header order.
    pub feature_columns: Vec<String>,
}

/// Loads an RFC-4180 CSV with a header row. `class_col` and `group_col`
/// name the label columns; every other column is a numeric feature, kept
/// in header order. Label tokens (numeric or not) are mapped to dense
/// integer codes in first-occurrence order; the mapping is returned for
/// auditability. Row order is preserved.
pub fn load_csv(path: &Path, class_col: &str, group_col: &str) -> Result<CsvLoad> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let class_idx = headers
        .iter()
        .position(|h| h == class_col)
        .ok_or_else(|| Error::MissingColumn {
            column: class_col.to_string(),
        })?;
    let group_idx = headers
        .iter()
        .position(|h| h == group_col)
        .ok_or_else(|| Error::MissingColumn {
            column: group_col.to_string(),
        })?;
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != class_idx && i != group_idx)
        .collect();
    let feature_columns: Vec<String> = feature_idx
        .iter()
        .map(|&i| headers[i].to_string())
        .collect();

    let mut coder_y = LabelCoder::default();
    let mut coder_a = LabelCoder::default();
    let mut rows: Vec<f64> = Vec::new();
    let mut classes = Vec::new();
    let mut groups = Vec::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        for &i in &feature_idx {
            let cell = record.get(i).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {:?}: {cell:?} is not a number", &headers[i]),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {:?}: non-finite value", &headers[i]),
                });
            }
            rows.push(value);
        }
        classes.push(coder_y.code(record.get(class_idx).unwrap_or("").trim()));
        groups.push(coder_a.code(record.get(group_idx).unwrap_or("").trim()));
    }

    if classes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let features = Array2::from_shape_vec((classes.len(), feature_idx.len()), rows)
        .expect("row-major feature buffer matches its declared shape");
    let dataset = LabeledDataset::with_sizes(
        features,
        classes,
        groups,
        coder_y.codes.len(),
        coder_a.codes.len(),
    )?;
    Ok(CsvLoad {
        dataset,
        class_codes: coder_y.codes,
        group_codes: coder_a.codes,
        feature_columns,
    })
}

/// Writes a dataset as CSV: feature columns `x0..x{d-1}` at full
/// round-trip precision, then `class` and `group` as integer codes.
/// `load_csv` on the result reproduces the dataset exactly (integer codes
/// appear in row order, so first-occurrence coding preserves them when
/// every label occurs; stratified generators guarantee that).
pub fn save_csv(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = dataset.features().ncols();
    let mut header: Vec<String> = (0..dim).map(|j| format!("x{j}")).collect();
    header.push("class".into());
    header.push("group".into());
    w.write_record(&header)?;
    for (i, row) in dataset.features().rows().into_iter().enumerate() {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        record.push(format!("{}", dataset.classes()[i]));
        record.push(format!("{}", dataset.groups()[i]));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Default)]
struct LabelCoder {
    codes: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl LabelCoder {
    fn code(&mut self, token: &str) -> usize {
        if let Some(&c) = self.lookup.get(token) {
            return c;
        }
        let c = self.codes.len();
        self.codes.push(token.to_string());
        self.lookup.insert(token.to_string(), c);
        c
    }
}

/// Row indices grouped by `(class, group)` cell. Every cell is non-empty
/// and every row of the source dataset appears in exactly one cell.
#[derive(Debug, Clone)]
pub struct CellPartition {
    cells: Vec<Vec<Vec<usize>>>,
    counts: Vec<Vec<usize>>,
}

impl CellPartition {
    pub fn num_classes(&self) -> usize {
        self.cells.len()
    }

    pub fn num_groups(&self) -> usize {
        self.cells[0].len()
    }

    /// Row indices belonging to cell `(class, group)`.
    pub fn cell(&self, class: usize, group: usize) -> &[usize] {
        &self.cells[class][group]
    }

    /// Per-cell row counts, indexed `[class][group]`.
    pub fn counts(&self) -> &Vec<Vec<usize>> {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

/// Indexes a dataset by class-group cell. Fails if any cell is empty,
/// naming every empty `(class, group)` pair.
pub fn partition_cells(data: &LabeledDataset) -> Result<CellPartition> {
    let mut cells = vec![vec![Vec::new(); data.num_groups()]; data.num_classes()];
    for i in 0..data.num_rows() {
        cells[data.classes()[i]][data.groups()[i]].push(i);
    }
    let empty: Vec<(usize, usize)> = (0..data.num_classes())
        .flat_map(|y| (0..data.num_groups()).map(move |a| (y, a)))
        .filter(|&(y, a)| cells[y][a].is_empty())
        .collect();
    if !empty.is_empty() {
        return Err(Error::EmptyCells { cells: empty });
    }
    let counts = cells
        .iter()
        .map(|row| row.iter().map(Vec::len).collect())
        .collect();
    Ok(CellPartition { cells, counts })
}

/// Draws a class-group balanced batch: `batch_size` must be divisible by
/// the number of cells, and each cell contributes an equal quota sampled
/// uniformly with replacement. Returns row indices into the source dataset.
pub fn balanced_batch<R: Rng>(
    partition: &CellPartition,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let cells = partition.num_classes() * partition.num_groups();
    if batch_size == 0 || !batch_size.is_multiple_of(cells) {
        return Err(Error::BatchSize {
            batch: batch_size,
            cells,
        });
    }
    let quota = batch_size / cells;
    let mut batch = Vec::with_capacity(batch_size);
    for y in 0..partition.num_classes() {
        for a in 0..partition.num_groups() {
            let rows = partition.cell(y, a);
            for _ in 0..quota {
                batch.push(rows[rng.random_range(0..rows.len())]);
            }
        }
    }
    Ok(batch)
}

/// Recipe for a synthetic dataset with Gaussian class-group cells.
///
/// Class `y`'s mean points along a fixed axis with norm
/// `class_mean_separation`. Group `a` samples around those means with
/// isotropic noise scaled by `group_noise_scales[a]`, and optionally sees
/// the class axes rotated by `group_rotations[a]` radians (each class axis
/// rotates toward a companion axis unused by the unrotated means). Unequal
/// noise alone lowers a group's accuracy without moving its optimal
/// boundary; a rotation misaligns the group's discriminative direction,
/// which is the kind of bias a reweighted linear model can actually trade
/// against. Generation is deterministic in `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_groups: usize,
    pub dim: usize,
    /// Rows to generate per cell, indexed `[class][group]`.
    pub cell_counts: Vec<Vec<usize>>,
    pub class_mean_separation: f64,
    pub group_noise_scales: Vec<f64>,
    /// Per-group rotation of the class axes, radians. Zeros reproduce the
    /// plain shared-mean construction.
    pub group_rotations: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Unbiased reference spec: equal noise, no rotation, balanced cells.
    pub fn symmetric(rows_per_cell: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes: 2,
            num_groups: 2,
            dim: 10,
            cell_counts: vec![vec![rows_per_cell; 2]; 2],
            class_mean_separation: 4.0,
            group_noise_scales: vec![1.0, 1.0],
            group_rotations: vec![0.0, 0.0],
            seed,
        }
    }

    /// Biased reference spec: group 1 sees 3x the feature noise of group 0
    /// and a rotated discriminative direction, so a plain fit underserves
    /// it while a reweighted fit can close most of the gap.
    pub fn biased(rows_per_cell: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_classes: 2,
            num_groups: 2,
            dim: 10,
            cell_counts: vec![vec![rows_per_cell; 2]; 2],
            class_mean_separation: 6.0,
            group_noise_scales: vec![1.0, 3.0],
            group_rotations: vec![0.0, 75.0_f64.to_radians()],
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_groups < 2 {
            return Err(Error::InvalidInput(
                "synthetic spec needs at least 2 classes and 2 groups".into(),
            ));
        }
        if self.cell_counts.len() != self.num_classes
            || self.cell_counts.iter().any(|r| r.len() != self.num_groups)
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} cell counts", self.num_classes, self.num_groups),
                got: format!(
                    "{}x{}",
                    self.cell_counts.len(),
                    self.cell_counts.first().map_or(0, Vec::len)
                ),
            });
        }
        if self.cell_counts.iter().flatten().sum::<usize>() == 0 {
            return Err(Error::EmptyInput);
        }
        if self.group_noise_scales.len() != self.num_groups {
            return Err(Error::ShapeMismatch {
                expected: format!("{} noise scales", self.num_groups),
                got: format!("{}", self.group_noise_scales.len()),
            });
        }
        if self.group_rotations.len() != self.num_groups {
            return Err(Error::ShapeMismatch {
                expected: format!("{} group rotations", self.num_groups),
                got: format!("{}", self.group_rotations.len()),
            });
        }
        if !self.class_mean_separation.is_finite() || self.class_mean_separation < 0.0 {
            return Err(Error::InvalidParameter(
                "class_mean_separation must be finite and non-negative".into(),
            ));
        }
        if self
            .group_noise_scales
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::InvalidParameter(
                "group noise scales must be finite and non-negative".into(),
            ));
        }
        if self.group_rotations.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidParameter(
                "group rotations must be finite".into(),
            ));
        }
        let rotated = self.group_rotations.iter().any(|r| *r != 0.0);
        let needed = if rotated {
            2 * self.num_classes
        } else {
            self.num_classes
        };
        if self.dim < needed {
            return Err(Error::InvalidParameter(format!(
                "dim {} too small: class axes need {needed} dimensions",
                self.dim
            )));
        }
        Ok(())
    }

    /// Mean of cell `(class, group)`.
    fn mean(&self, class: usize, group: usize) -> Array1<f64> {
        let mut mu = Array1::zeros(self.dim);
        let theta = self.group_rotations[group];
        mu[class] = self.class_mean_separation * theta.cos();
        if theta != 0.0 {
            mu[self.num_classes + class] = self.class_mean_separation * theta.sin();
        }
        mu
    }
}

/// Generates the dataset described by `spec`. Rows are laid out cell by
/// cell in `(class, group)` order; identical specs produce bit-identical
/// feature matrices.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total: usize = spec.cell_counts.iter().flatten().sum();
    let mut features = Array2::zeros((total, spec.dim));
    let mut classes = Vec::with_capacity(total);
    let mut groups = Vec::with_capacity(total);
    let mut row = 0;
    for y in 0..spec.num_classes {
        for a in 0..spec.num_groups {
            let mean = spec.mean(y, a);
            let scale = spec.group_noise_scales[a];
            for _ in 0..spec.cell_counts[y][a] {
                for d in 0..spec.dim {
                    let z: f64 = rng.sample(StandardNormal);
                    features[(row, d)] = mean[d] + scale * z;
                }
                classes.push(y);
                groups.push(a);
                row += 1;
            }
        }
    }
    LabeledDataset::with_sizes(features, classes, groups, spec.num_classes, spec.num_groups)
}

/// Stratified train/test split: each cell is shuffled and contributes
/// `round(cell_size * test_fraction)` rows to the test side, clamped so
/// both sides keep at least one row. Cells with fewer than two rows cannot
/// be split. Returns `(train, test)`.
pub fn split<R: Rng>(
    data: &LabeledDataset,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let partition = partition_cells(data)?;
    let mut train_rows = Vec::new();
    let mut test_rows = Vec::new();
    for y in 0..partition.num_classes() {
        for a in 0..partition.num_groups() {
            let mut rows = partition.cell(y, a).to_vec();
            if rows.len() < 2 {
                return Err(Error::CellTooSmall {
                    class: y,
                    group: a,
                    count: rows.len(),
                });
            }
            rows.shuffle(rng);
            let n_test = ((rows.len() as f64 * test_fraction).round() as usize)
                .clamp(1, rows.len() - 1);
            test_rows.extend_from_slice(&rows[..n_test]);
            train_rows.extend_from_slice(&rows[n_test..]);
        }
    }
    // Keep original row order within each side.
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    Ok((data.subset(&train_rows)?, data.subset(&test_rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn csv_codes_labels_in_first_occurrence_order() {
        let f = write_csv("x1,x2,class,group\n1.0,2.0,0,F\n3.0,4.0,1,M\n5.0,6.0,0,M\n7.0,8.0,1,F\n");
        let load = load_csv(f.path(), "class", "group").unwrap();
        let d = &load.dataset;
        assert_eq!(d.num_classes(), 2);
        assert_eq!(d.num_groups(), 2);
        assert_eq!(load.group_codes, vec!["F", "M"]);
        assert_eq!(d.groups(), &[0, 1, 1, 0]);
        assert_eq!(d.classes(), &[0, 1, 0, 1]);
        assert_eq!(d.features().shape(), &[4, 2]);
        // Row order preserved.
        assert_eq!(d.features()[(2, 0)], 5.0);
        assert_eq!(load.feature_columns, vec!["x1", "x2"]);
    }

    #[test]
    fn csv_third_class_value_widens_label_space() {
        let f = write_csv("x,class,group\n1,0,a\n2,1,b\n3,2,a\n");
        let load = load_csv(f.path(), "class", "group").unwrap();
        assert_eq!(load.dataset.num_classes(), 3);
    }

    #[test]
    fn csv_missing_column_is_named() {
        let f = write_csv("x,class,group\n1,0,a\n2,1,b\n");
        let err = load_csv(f.path(), "class", "sex").unwrap_err();
        match err {
            Error::MissingColumn { column } => assert_eq!(column, "sex"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn csv_bad_feature_reports_line() {
        let f = write_csv("x,class,group\n1,0,a\noops,1,b\n");
        let err = load_csv(f.path(), "class", "group").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn csv_header_only_is_empty_input() {
        let f = write_csv("x,class,group\n");
        assert!(matches!(
            load_csv(f.path(), "class", "group"),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn saved_dataset_loads_back_exactly() {
        let spec = SyntheticSpec::biased(6, 99);
        let data = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        save_csv(&data, &path).unwrap();
        let back = load_csv(&path, "class", "group").unwrap();
        assert_eq!(back.dataset.classes(), data.classes());
        assert_eq!(back.dataset.groups(), data.groups());
        assert_eq!(back.dataset.features(), data.features());
        assert_eq!(back.feature_columns[0], "x0");
    }

    fn toy_dataset(classes: Vec<usize>, groups: Vec<usize>) -> LabeledDataset {
        let n = classes.len();
        LabeledDataset::new(Array2::zeros((n, 1)), classes, groups).unwrap()
    }

    #[test]
    fn partition_counts_and_indices_cover_all_rows() {
        let d = toy_dataset(vec![0, 0, 1, 1, 0], vec![0, 1, 0, 1, 1]);
        let p = partition_cells(&d).unwrap();
        assert_eq!(p.counts(), &vec![vec![1, 2], vec![1, 1]]);
        let mut seen = Vec::new();
        for y in 0..p.num_classes() {
            for a in 0..p.num_groups() {
                seen.extend_from_slice(p.cell(y, a));
            }
        }
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn partition_names_every_empty_cell() {
        let d = toy_dataset(vec![0, 0, 1], vec![0, 0, 1]);
        match partition_cells(&d).unwrap_err() {
            Error::EmptyCells { cells } => assert_eq!(cells, vec![(0, 1), (1, 0)]),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn partition_tallies_census_scale_cells() {
        let counts = [[13026usize, 20988], [1669, 9539]];
        let mut classes = Vec::new();
        let mut groups = Vec::new();
        for (y, row) in counts.iter().enumerate() {
            for (a, &c) in row.iter().enumerate() {
                classes.extend(std::iter::repeat_n(y, c));
                groups.extend(std::iter::repeat_n(a, c));
            }
        }
        let d = toy_dataset(classes, groups);
        let p = partition_cells(&d).unwrap();
        assert_eq!(p.counts(), &vec![vec![13026, 20988], vec![1669, 9539]]);
        assert_eq!(p.total(), 45222);
    }

    #[test]
    fn balanced_batch_draws_equal_quotas() {
        let d = toy_dataset(vec![0, 0, 0, 1, 1, 0], vec![0, 1, 0, 0, 1, 1]);
        let p = partition_cells(&d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = balanced_batch(&p, 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        for (k, chunk) in batch.chunks(2).enumerate() {
            let (y, a) = (k / 2, k % 2);
            let cell = p.cell(y, a);
            assert!(chunk.iter().all(|i| cell.contains(i)));
        }
    }

    #[test]
    fn balanced_batch_rejects_indivisible_size() {
        let d = toy_dataset(vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
        let p = partition_cells(&d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            balanced_batch(&p, 6, &mut rng),
            Err(Error::BatchSize { batch: 6, cells: 4 })
        ));
    }

    #[test]
    fn balanced_batch_resamples_small_cells_with_replacement() {
        let d = toy_dataset(vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
        let p = partition_cells(&d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = balanced_batch(&p, 128, &mut rng).unwrap();
        assert_eq!(batch.len(), 128);
        // Every quota comes from a 1-row cell, so each index repeats 32x.
        assert_eq!(batch.iter().filter(|&&i| i == 0).count(), 32);
    }

    #[test]
    fn balanced_batch_eventually_visits_every_row() {
        let d = toy_dataset(
            vec![0, 0, 0, 0, 1, 1, 1, 1],
            vec![0, 0, 1, 1, 0, 0, 1, 1],
        );
        let p = partition_cells(&d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 8];
        for _ in 0..100 {
            for i in balanced_batch(&p, 4, &mut rng).unwrap() {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let spec = SyntheticSpec::biased(50, 11);
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.features(), b.features());
        let other = generate_synthetic(&SyntheticSpec::biased(50, 12)).unwrap();
        assert_ne!(a.features(), other.features());
    }

    #[test]
    fn synthetic_generation_honors_cell_counts() {
        let mut spec = SyntheticSpec::symmetric(5, 1);
        spec.cell_counts = vec![vec![5, 3], vec![2, 7]];
        let d = generate_synthetic(&spec).unwrap();
        let p = partition_cells(&d).unwrap();
        assert_eq!(p.counts(), &vec![vec![5, 3], vec![2, 7]]);
    }

    #[test]
    fn synthetic_rotation_requires_room_for_companion_axes() {
        let mut spec = SyntheticSpec::biased(5, 1);
        spec.dim = 3;
        assert!(matches!(
            generate_synthetic(&spec),
            Err(Error::InvalidParameter(_))
        ));
        spec.dim = 4;
        assert!(generate_synthetic(&spec).is_ok());
    }

    #[test]
    fn split_rounds_to_nearest_and_keeps_cells_populated() {
        let mut classes = Vec::new();
        let mut groups = Vec::new();
        for (y, a, n) in [(0, 0, 45), (0, 1, 100), (1, 0, 100), (1, 1, 2)] {
            classes.extend(std::iter::repeat_n(y, n));
            groups.extend(std::iter::repeat_n(a, n));
        }
        let d = toy_dataset(classes, groups);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (train, test) = split(&d, 0.2, &mut rng).unwrap();
        let pt = partition_cells(&train).unwrap();
        let pe = partition_cells(&test).unwrap();
        assert_eq!(pe.counts()[0][0], 9);
        assert_eq!(pt.counts()[0][0], 36);
        assert_eq!(pe.counts()[0][1], 20);
        // The 2-row cell keeps one row on each side.
        assert_eq!(pe.counts()[1][1], 1);
        assert_eq!(pt.counts()[1][1], 1);
        assert_eq!(train.num_rows() + test.num_rows(), d.num_rows());
    }

    #[test]
    fn split_rejects_single_row_cells() {
        let d = toy_dataset(vec![0, 0, 1, 1, 1], vec![0, 1, 0, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        match split(&d, 0.2, &mut rng).unwrap_err() {
            Error::CellTooSmall { class, group, count } => {
                assert_eq!((class, group, count), (0, 0, 1));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn split_rejects_degenerate_fraction() {
        let d = toy_dataset(vec![0, 0, 1, 1], vec![0, 1, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(split(&d, 0.0, &mut rng).is_err());
        assert!(split(&d, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dataset_rejects_non_finite_features() {
        let mut features = Array2::zeros((2, 1));
        features[(0, 0)] = f64::NAN;
        assert!(LabeledDataset::new(features, vec![0, 1], vec![0, 1]).is_err());
    }

    #[test]
    fn dataset_rejects_single_label_spaces() {
        assert!(LabeledDataset::new(Array2::zeros((2, 1)), vec![0, 0], vec![0, 1]).is_err());
        assert!(LabeledDataset::new(Array2::zeros((2, 1)), vec![0, 1], vec![0, 0]).is_err());
    }
}
