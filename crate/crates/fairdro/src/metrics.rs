//! Accuracy and fairness metrics over (class, group) cells.
//!
//! Everything here is a function of the per-cell prediction tallies: the
//! conditional-accuracy gap (mean over classes of the widest groupwise
//! accuracy spread), the equalized-odds gap (same idea over the full
//! confusion tensor), balanced accuracy (unweighted mean over cells), and
//! worst-group accuracy (minimum cell). The variance bounds relating the
//! accuracy gap to the spread of groupwise zero-one losses are provided as
//! checkable inequalities.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::dataset::{partition_cells, CellPartition, LabeledDataset};
use crate::model::{self, LinearModel};
use crate::{Error, Result};

/// Which per-row loss to average within a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    ZeroOne,
    CrossEntropy,
}

/// Per-cell accuracy estimates: `acc[y][a]` is the fraction of rows with
/// class `y` and group `a` that the model labels `y`, alongside the cell
/// row counts the estimate was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracyMatrix {
    acc: Vec<Vec<f64>>,
    counts: Vec<Vec<usize>>,
}

fn check_rectangular<T>(rows: &[Vec<T>], what: &str) -> Result<()> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::EmptyInput);
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(Error::InvalidInput(format!("ragged {what} matrix")));
    }
    Ok(())
}

impl CellAccuracyMatrix {
    /// Tallies predictions against labels. Every (class, group) cell must
    /// be populated; the empty ones are reported together.
    pub fn from_predictions(
        predictions: &[usize],
        classes: &[usize],
        groups: &[usize],
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::EmptyInput);
        }
        if predictions.len() != classes.len() || predictions.len() != groups.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels and groups", predictions.len()),
                got: format!("{} labels, {} groups", classes.len(), groups.len()),
            });
        }
        let mut hits = vec![vec![0usize; num_groups]; num_classes];
        let mut counts = vec![vec![0usize; num_groups]; num_classes];
        for i in 0..predictions.len() {
            let (p, y, a) = (predictions[i], classes[i], groups[i]);
            if p >= num_classes || y >= num_classes || a >= num_groups {
                return Err(Error::InvalidInput(format!(
                    "row {i}: label out of range (pred {p}, class {y}, group {a})"
                )));
            }
            counts[y][a] += 1;
            if p == y {
                hits[y][a] += 1;
            }
        }
        let empty: Vec<(usize, usize)> = (0..num_classes)
            .flat_map(|y| (0..num_groups).map(move |a| (y, a)))
            .filter(|&(y, a)| counts[y][a] == 0)
            .collect();
        if !empty.is_empty() {
            return Err(Error::EmptyCells { cells: empty });
        }
        let acc = (0..num_classes)
            .map(|y| {
                (0..num_groups)
                    .map(|a| hits[y][a] as f64 / counts[y][a] as f64)
                    .collect()
            })
            .collect();
        Ok(Self { acc, counts })
    }

    /// Wraps precomputed rates with unit counts, for metrics that depend
    /// only on the rates.
    pub fn from_accuracies(acc: Vec<Vec<f64>>) -> Result<Self> {
        check_rectangular(&acc, "accuracy")?;
        if acc.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "cell accuracy outside [0, 1]".into(),
            ));
        }
        let counts = vec![vec![1; acc[0].len()]; acc.len()];
        Ok(Self { acc, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.acc.len()
    }

    pub fn num_groups(&self) -> usize {
        self.acc[0].len()
    }

    pub fn acc(&self, class: usize, group: usize) -> f64 {
        self.acc[class][group]
    }

    pub fn count(&self, class: usize, group: usize) -> usize {
        self.counts[class][group]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.acc
    }
}

/// Empirical confusion rates `rates[y][y'][a]`: the probability that a row
/// of class `y` in group `a` is predicted as `y'`. Rows sum to one per
/// (class, group).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionTensor {
    rates: Vec<Vec<Vec<f64>>>,
}

impl ConfusionTensor {
    pub fn from_predictions(
        predictions: &[usize],
        classes: &[usize],
        groups: &[usize],
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::EmptyInput);
        }
        if predictions.len() != classes.len() || predictions.len() != groups.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels and groups", predictions.len()),
                got: format!("{} labels, {} groups", classes.len(), groups.len()),
            });
        }
        let mut tally = vec![vec![vec![0usize; num_groups]; num_classes]; num_classes];
        let mut counts = vec![vec![0usize; num_groups]; num_classes];
        for i in 0..predictions.len() {
            let (p, y, a) = (predictions[i], classes[i], groups[i]);
            if p >= num_classes || y >= num_classes || a >= num_groups {
                return Err(Error::InvalidInput(format!(
                    "row {i}: label out of range (pred {p}, class {y}, group {a})"
                )));
            }
            tally[y][p][a] += 1;
            counts[y][a] += 1;
        }
        let empty: Vec<(usize, usize)> = (0..num_classes)
            .flat_map(|y| (0..num_groups).map(move |a| (y, a)))
            .filter(|&(y, a)| counts[y][a] == 0)
            .collect();
        if !empty.is_empty() {
            return Err(Error::EmptyCells { cells: empty });
        }
        let rates = (0..num_classes)
            .map(|y| {
                (0..num_classes)
                    .map(|p| {
                        (0..num_groups)
                            .map(|a| tally[y][p][a] as f64 / counts[y][a] as f64)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { rates })
    }

    /// Wraps precomputed rates; each (class, group) fiber over the
    /// predicted class must sum to one (1e-12).
    pub fn from_rates(rates: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let ny = rates.len();
        if ny == 0 || rates.iter().any(|r| r.len() != ny) {
            return Err(Error::InvalidInput(
                "confusion tensor must be |Y| x |Y| x |A|".into(),
            ));
        }
        let na = rates[0][0].len();
        if na == 0 || rates.iter().flatten().any(|f| f.len() != na) {
            return Err(Error::InvalidInput("ragged confusion tensor".into()));
        }
        for y in 0..ny {
            for a in 0..na {
                let sum: f64 = (0..ny).map(|p| rates[y][p][a]).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Constraint(format!(
                        "confusion rates for class {y}, group {a} sum to {sum}"
                    )));
                }
            }
        }
        Ok(Self { rates })
    }

    pub fn num_classes(&self) -> usize {
        self.rates.len()
    }

    pub fn num_groups(&self) -> usize {
        self.rates[0][0].len()
    }

    pub fn rate(&self, class: usize, predicted: usize, group: usize) -> f64 {
        self.rates[class][predicted][group]
    }
}

/// Identifies the run a report came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub variant: String,
    pub rho: Option<f64>,
    pub lambda: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
}

/// The evaluation summary for one trained model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub balanced_accuracy: f64,
    pub dca: f64,
    pub deo: f64,
    pub worst_group_accuracy: f64,
    pub cell_accuracies: CellAccuracyMatrix,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dca) || !(0.0..=1.0).contains(&self.deo) {
            return Err(Error::Constraint(format!(
                "fairness gaps outside [0, 1]: dca {}, deo {}",
                self.dca, self.deo
            )));
        }
        if self.worst_group_accuracy > self.balanced_accuracy + 1e-12 {
            return Err(Error::Constraint(format!(
                "worst-group accuracy {} exceeds balanced accuracy {}",
                self.worst_group_accuracy, self.balanced_accuracy
            )));
        }
        Ok(())
    }
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    hi - lo
}

/// Mean over classes of the widest groupwise accuracy gap.
pub fn dca(cell_acc: &CellAccuracyMatrix) -> f64 {
    let total: f64 = cell_acc
        .rows()
        .iter()
        .map(|row| spread(row.iter().copied()))
        .sum();
    total / cell_acc.num_classes() as f64
}

/// Mean over (class, predicted class) pairs of the widest groupwise gap in
/// confusion rates. Coincides with [`dca`] when there are two classes.
pub fn deo(conf: &ConfusionTensor) -> f64 {
    let ny = conf.num_classes();
    let na = conf.num_groups();
    let mut total = 0.0;
    for y in 0..ny {
        for p in 0..ny {
            total += spread((0..na).map(|a| conf.rate(y, p, a)));
        }
    }
    total / (ny * ny) as f64
}

/// Unweighted mean of all cell accuracies.
pub fn balanced_accuracy(cell_acc: &CellAccuracyMatrix) -> f64 {
    let cells = (cell_acc.num_classes() * cell_acc.num_groups()) as f64;
    cell_acc.rows().iter().flatten().sum::<f64>() / cells
}

/// Minimum cell accuracy.
pub fn worst_group_accuracy(cell_acc: &CellAccuracyMatrix) -> f64 {
    cell_acc
        .rows()
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}

/// Per-cell accuracies of `model` over `partition`.
pub fn cell_accuracies(
    model: &LinearModel,
    data: &LabeledDataset,
    partition: &CellPartition,
) -> Result<CellAccuracyMatrix> {
    check_partition(data, partition)?;
    let predictions = model.predict(data.features().view())?;
    CellAccuracyMatrix::from_predictions(
        &predictions,
        data.classes(),
        data.groups(),
        data.num_classes(),
        data.num_groups(),
    )
}

fn check_partition(data: &LabeledDataset, partition: &CellPartition) -> Result<()> {
    if partition.num_classes() != data.num_classes()
        || partition.num_groups() != data.num_groups()
        || partition.total() != data.num_rows()
    {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "partition of {} rows into {}x{} cells",
                data.num_rows(),
                data.num_classes(),
                data.num_groups()
            ),
            got: format!(
                "{} rows in {}x{} cells",
                partition.total(),
                partition.num_classes(),
                partition.num_groups()
            ),
        });
    }
    Ok(())
}

/// Mean loss of `loss_kind` over each group's cell within class
/// `class_index`: element `a` averages over the rows with that class and
/// group `a`.
pub fn groupwise_losses(
    model: &LinearModel,
    data: &LabeledDataset,
    partition: &CellPartition,
    class_index: usize,
    loss_kind: LossKind,
) -> Result<Vec<f64>> {
    check_partition(data, partition)?;
    if class_index >= data.num_classes() {
        return Err(Error::InvalidParameter(format!(
            "class index {class_index} out of range for {} classes",
            data.num_classes()
        )));
    }
    let mut losses = Vec::with_capacity(data.num_groups());
    for a in 0..data.num_groups() {
        let rows = partition.cell(class_index, a);
        if rows.is_empty() {
            return Err(Error::MissingCell {
                class: class_index,
                group: a,
            });
        }
        let feats = data.features().select(Axis(0), rows);
        let classes: Vec<usize> = rows.iter().map(|&i| data.classes()[i]).collect();
        let loss = match loss_kind {
            LossKind::ZeroOne => model::zero_one_loss(model, feats.view(), &classes)?,
            LossKind::CrossEntropy => {
                let ones = vec![1.0; rows.len()];
                model::weighted_cross_entropy(model, feats.view(), &classes, &ones)?
            }
        };
        losses.push(loss);
    }
    Ok(losses)
}

/// Population variance (divisor = length). Empty input yields 0.
pub fn loss_variance(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        return 0.0;
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n
}

/// For each class's groupwise zero-one losses, the sandwich
/// `sqrt(2 * var) <= max gap <= sqrt(2 * |A|^2 * var)` as a
/// (lower, gap, upper) triple. Testing code asserts the ordering; training
/// code uses the variance as a differentiable stand-in for the gap.
pub fn dca_variance_bounds(losses_per_class: &[Vec<f64>]) -> Vec<(f64, f64, f64)> {
    losses_per_class
        .iter()
        .map(|losses| {
            let var = loss_variance(losses);
            let gap = if losses.is_empty() {
                0.0
            } else {
                spread(losses.iter().copied())
            };
            let n = losses.len() as f64;
            ((2.0 * var).sqrt(), gap, (2.0 * n * n * var).sqrt())
        })
        .collect()
}

/// Runs the model over the dataset and assembles the full report:
/// partition, per-cell accuracies, confusion rates, and the four summary
/// scalars.
pub fn evaluate(
    model: &LinearModel,
    data: &LabeledDataset,
    provenance: Provenance,
) -> Result<MetricsReport> {
    let partition = partition_cells(data)?;
    let matrix = cell_accuracies(model, data, &partition)?;
    let predictions = model.predict(data.features().view())?;
    let tensor = ConfusionTensor::from_predictions(
        &predictions,
        data.classes(),
        data.groups(),
        data.num_classes(),
        data.num_groups(),
    )?;
    let report = MetricsReport {
        balanced_accuracy: balanced_accuracy(&matrix),
        dca: dca(&matrix),
        deo: deo(&tensor),
        worst_group_accuracy: worst_group_accuracy(&matrix),
        cell_accuracies: matrix,
        provenance,
    };
    report.validate()?;
    Ok(report)
}
