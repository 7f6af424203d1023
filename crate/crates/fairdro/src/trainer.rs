//! The training loop and its variants.
//!
//! Every variant runs the same schedule: T epochs of I balanced mini-batch
//! gradient steps (AdamW, cosine learning rate per epoch), with per-row
//! sample weights decided by the variant. The robust variants maintain
//! group weight vectors q and refresh them once per epoch from
//! full-dataset zero-one losses computed with the post-epoch parameters;
//! the refresh is the closed-form ball maximizer (classwise or flattened,
//! signed or clamped) or an exponentiated-gradient simplex step, mixed
//! with the previous iterate by the decaying smoothing schedule. The
//! non-robust variants keep their weights fixed: unit weights, fixed
//! reweighing ratios, or unit weights plus a differentiable penalty on the
//! spread of within-batch groupwise losses.
//!
//! Row weights are scaled so that uniform group weights give every row
//! weight exactly 1: the plain balanced learner is literally the same code
//! path with the weights pinned.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{balanced_batch, partition_cells, CellPartition, LabeledDataset};
use crate::dro::{
    best_response, best_response_nonneg, simplex_best_response, smoothed_ibr_update, GroupWeights,
    UncertaintySpec,
};
use crate::metrics::{cell_accuracies, CellAccuracyMatrix};
use crate::model::{
    adamw_step, cosine_lr, per_row_nll, weighted_ce_loss_grad, LinearModel, OptimizerState,
};
use crate::{Error, Result};

/// The eight training variants: the full method, its three uncertainty-set
/// ablations, and four baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Classwise chi-square ball over signed group weights.
    #[serde(rename = "fairdro")]
    FairDro,
    /// One chi-square ball over all (class, group) cells.
    #[serde(rename = "fairdro_no_classwise")]
    FairDroNoClasswise,
    /// Classwise chi-square ball with weights clamped to the simplex.
    #[serde(rename = "fairdro_nonneg")]
    FairDroNonneg,
    /// Balanced ERM: every row weighs 1.
    #[serde(rename = "scratch")]
    Scratch,
    /// Fixed reweighing by inverse cell frequency ratios.
    #[serde(rename = "rw")]
    Rw,
    /// Penalize the widest within-batch groupwise cross-entropy gap.
    #[serde(rename = "gap_reg")]
    GapReg,
    /// Penalize the within-batch groupwise cross-entropy variance.
    #[serde(rename = "var_reg")]
    VarReg,
    /// Plain group DRO: exponentiated-gradient ascent on the cell simplex.
    #[serde(rename = "group_dro")]
    GroupDro,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::FairDro,
        Variant::FairDroNoClasswise,
        Variant::FairDroNonneg,
        Variant::Scratch,
        Variant::Rw,
        Variant::GapReg,
        Variant::VarReg,
        Variant::GroupDro,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::FairDro => "fairdro",
            Variant::FairDroNoClasswise => "fairdro_no_classwise",
            Variant::FairDroNonneg => "fairdro_nonneg",
            Variant::Scratch => "scratch",
            Variant::Rw => "rw",
            Variant::GapReg => "gap_reg",
            Variant::VarReg => "var_reg",
            Variant::GroupDro => "group_dro",
        }
    }

    /// Maintains adaptive group weights.
    pub fn uses_dro(&self) -> bool {
        matches!(
            self,
            Variant::FairDro
                | Variant::FairDroNoClasswise
                | Variant::FairDroNonneg
                | Variant::GroupDro
        )
    }

    pub fn needs_rho(&self) -> bool {
        matches!(
            self,
            Variant::FairDro | Variant::FairDroNoClasswise | Variant::FairDroNonneg
        )
    }

    pub fn needs_lambda(&self) -> bool {
        matches!(self, Variant::GapReg | Variant::VarReg)
    }

    /// One weight vector per class, versus a single vector over all cells.
    pub fn classwise(&self) -> bool {
        !matches!(self, Variant::FairDroNoClasswise | Variant::GroupDro)
    }

    /// The uncertainty set this variant optimizes over, if any.
    pub fn uncertainty_spec(
        &self,
        rho: Option<f64>,
        num_classes: usize,
        num_groups: usize,
    ) -> Option<UncertaintySpec> {
        match self {
            Variant::FairDro => Some(UncertaintySpec {
                rho: rho.unwrap_or(f64::NAN),
                num_groups,
                allow_negative: true,
                classwise: true,
                use_chi2: true,
            }),
            Variant::FairDroNonneg => Some(UncertaintySpec {
                rho: rho.unwrap_or(f64::NAN),
                num_groups,
                allow_negative: false,
                classwise: true,
                use_chi2: true,
            }),
            Variant::FairDroNoClasswise => Some(UncertaintySpec {
                rho: rho.unwrap_or(f64::NAN),
                num_groups: num_classes * num_groups,
                allow_negative: true,
                classwise: false,
                use_chi2: true,
            }),
            Variant::GroupDro => Some(UncertaintySpec {
                rho: 0.0,
                num_groups: num_classes * num_groups,
                allow_negative: false,
                classwise: false,
                use_chi2: false,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidParameter(format!(
                    "unknown variant '{s}' (expected one of: {})",
                    names.join(", ")
                ))
            })
    }
}

/// Everything a single training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Ball radius; required by the chi-square variants.
    pub rho: Option<f64>,
    /// Penalty strength; required by the regularizer variants.
    pub lambda: Option<f64>,
    pub epochs: usize,
    /// Mini-batch steps per epoch; defaults to one pass over the training
    /// rows (ceil(N / batch_size)).
    pub iterations_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Ascent step for the simplex variant.
    pub eg_step: f64,
    pub seed: u64,
    /// Mix each group-weight update with the previous iterate on the
    /// decaying schedule; off means raw best responses.
    pub smoothing: bool,
    /// Refresh group weights every this many iterations instead of once
    /// per epoch.
    pub q_update_interval: Option<usize>,
}

impl TrainConfig {
    pub fn defaults(variant: Variant) -> Self {
        Self {
            variant,
            rho: None,
            lambda: None,
            epochs: 70,
            iterations_per_epoch: None,
            batch_size: 128,
            base_lr: 1e-3,
            weight_decay: 1e-3,
            eg_step: 0.1,
            seed: 0,
            smoothing: true,
            q_update_interval: None,
        }
    }

    /// Steps per epoch after applying the one-pass default.
    pub fn iterations_for(&self, num_rows: usize) -> usize {
        self.iterations_per_epoch
            .unwrap_or_else(|| num_rows.div_ceil(self.batch_size).max(1))
    }

    /// The checks that need no knowledge of the data's shape. Lets callers
    /// reject a bad configuration before loading anything.
    pub fn validate_parameters(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be at least 1".into()));
        }
        if self.iterations_per_epoch == Some(0) || self.q_update_interval == Some(0) {
            return Err(Error::InvalidParameter(
                "iteration counts must be at least 1".into(),
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "base learning rate must be finite and positive, got {}",
                self.base_lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.variant.needs_rho() {
            match self.rho {
                Some(r) if r.is_finite() && r > 0.0 => {}
                Some(r) => {
                    return Err(Error::InvalidParameter(format!(
                        "rho must be finite and positive, got {r}"
                    )))
                }
                None => {
                    return Err(Error::InvalidParameter(format!(
                        "variant {} requires rho",
                        self.variant
                    )))
                }
            }
        }
        if self.variant.needs_lambda() {
            match self.lambda {
                Some(l) if l.is_finite() && l >= 0.0 => {}
                Some(l) => {
                    return Err(Error::InvalidParameter(format!(
                        "lambda must be finite and non-negative, got {l}"
                    )))
                }
                None => {
                    return Err(Error::InvalidParameter(format!(
                        "variant {} requires lambda",
                        self.variant
                    )))
                }
            }
        }
        if self.variant == Variant::GroupDro && !(self.eg_step.is_finite() && self.eg_step > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "ascent step must be finite and positive, got {}",
                self.eg_step
            )));
        }
        Ok(())
    }

    pub fn validate(&self, num_classes: usize, num_groups: usize) -> Result<()> {
        self.validate_parameters()?;
        let cells = num_classes * num_groups;
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(cells) {
            return Err(Error::BatchSize {
                batch: self.batch_size,
                cells,
            });
        }
        if let Some(spec) = self
            .variant
            .uncertainty_spec(self.rho, num_classes, num_groups)
        {
            spec.validate()?;
        }
        Ok(())
    }
}

/// One epoch's snapshot: the group weights in effect after this epoch's
/// update, the full-dataset groupwise zero-one losses that drove it, and
/// both splits' cell accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub q: Vec<GroupWeights>,
    pub group_losses: Vec<Vec<f64>>,
    pub train_accuracy: CellAccuracyMatrix,
    pub test_accuracy: CellAccuracyMatrix,
}

/// Per-epoch training trace, one record per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn final_record(&self) -> &EpochRecord {
        // train() always runs at least one epoch.
        self.records.last().expect("history of a finished run")
    }

    /// One JSON object per line, one line per epoch.
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line)?);
        }
        Ok(Self { records })
    }
}

/// Fixed per-cell reweighing ratios: cell (y, a) gets
/// `N_y * N_a / (N * N_{y,a})`, so weights exceed 1 exactly where class
/// and group are underrepresented together.
pub fn rw_weights(partition: &CellPartition) -> Result<Vec<Vec<f64>>> {
    let counts = partition.counts();
    let ny = partition.num_classes();
    let na = partition.num_groups();
    let total = partition.total() as f64;
    let class_totals: Vec<f64> = (0..ny)
        .map(|y| counts[y].iter().sum::<usize>() as f64)
        .collect();
    let group_totals: Vec<f64> = (0..na)
        .map(|a| (0..ny).map(|y| counts[y][a]).sum::<usize>() as f64)
        .collect();
    let mut weights = vec![vec![0.0; na]; ny];
    for y in 0..ny {
        for a in 0..na {
            if counts[y][a] == 0 {
                return Err(Error::MissingCell { class: y, group: a });
            }
            weights[y][a] = class_totals[y] * group_totals[a] / (total * counts[y][a] as f64);
        }
    }
    Ok(weights)
}

/// The penalty value for a matrix of per-cell cross-entropies: mean over
/// classes of the widest groupwise gap (`GapReg`) or of the groupwise
/// population variance (`VarReg`).
pub fn reg_term(cell_ce: &[Vec<f64>], variant: Variant) -> Result<f64> {
    if cell_ce.is_empty() || cell_ce[0].is_empty() {
        return Err(Error::EmptyInput);
    }
    let total: f64 = match variant {
        Variant::GapReg => cell_ce
            .iter()
            .map(|row| {
                let hi = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lo = row.iter().fold(f64::INFINITY, |m, &v| m.min(v));
                hi - lo
            })
            .sum(),
        Variant::VarReg => cell_ce.iter().map(|row| crate::metrics::loss_variance(row)).sum(),
        other => {
            return Err(Error::InvalidParameter(format!(
                "variant {other} has no penalty term"
            )))
        }
    };
    Ok(total / cell_ce.len() as f64)
}

/// Batch row indices bucketed per (class, group) cell.
type CellRows = Vec<Vec<Vec<usize>>>;

/// Rows of each batch cell, plus per-cell mean cross-entropy. Errors if
/// any (class, group) cell has no rows in the batch.
fn batch_cells(
    nll: &[f64],
    classes: &[usize],
    groups: &[usize],
    num_classes: usize,
    num_groups: usize,
) -> Result<(CellRows, Vec<Vec<f64>>)> {
    let mut rows = vec![vec![Vec::new(); num_groups]; num_classes];
    for i in 0..classes.len() {
        rows[classes[i]][groups[i]].push(i);
    }
    let mut ce = vec![vec![0.0; num_groups]; num_classes];
    for y in 0..num_classes {
        for a in 0..num_groups {
            if rows[y][a].is_empty() {
                return Err(Error::MissingCell { class: y, group: a });
            }
            ce[y][a] =
                rows[y][a].iter().map(|&i| nll[i]).sum::<f64>() / rows[y][a].len() as f64;
        }
    }
    Ok((rows, ce))
}

/// First-index argmax/argmin over a row, matching the tie rule used for
/// predictions.
fn extreme_indices(row: &[f64]) -> (usize, usize) {
    let mut hi = 0;
    let mut lo = 0;
    for (a, &v) in row.iter().enumerate() {
        if v > row[hi] {
            hi = a;
        }
        if v < row[lo] {
            lo = a;
        }
    }
    (hi, lo)
}

/// Balanced cross-entropy plus the spread penalty, with its gradient. The
/// penalty differentiates through the per-cell batch means: each row's
/// effective weight is 1 plus the penalty's sensitivity to its cell mean.
pub fn regularized_loss_grad(
    model: &LinearModel,
    features: ArrayView2<f64>,
    classes: &[usize],
    groups: &[usize],
    num_classes: usize,
    num_groups: usize,
    variant: Variant,
    lambda: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let n = features.nrows();
    let nll = per_row_nll(model, features, classes)?;
    let (rows, ce) = batch_cells(&nll, classes, groups, num_classes, num_groups)?;
    let penalty = reg_term(&ce, variant)?;
    let base = nll.iter().sum::<f64>() / n as f64;

    // weighted_ce_loss_grad divides by n, so a row coefficient c becomes
    // the weight n*c; base rows carry weight 1.
    let mut weights = vec![1.0; n];
    let scale = n as f64 * lambda / num_classes as f64;
    match variant {
        Variant::GapReg => {
            for y in 0..num_classes {
                let (hi, lo) = extreme_indices(&ce[y]);
                if hi == lo {
                    continue;
                }
                for &i in &rows[y][hi] {
                    weights[i] += scale / rows[y][hi].len() as f64;
                }
                for &i in &rows[y][lo] {
                    weights[i] -= scale / rows[y][lo].len() as f64;
                }
            }
        }
        Variant::VarReg => {
            for y in 0..num_classes {
                let mean = ce[y].iter().sum::<f64>() / num_groups as f64;
                for a in 0..num_groups {
                    let coef = scale * 2.0 * (ce[y][a] - mean)
                        / (num_groups * rows[y][a].len()) as f64;
                    for &i in &rows[y][a] {
                        weights[i] += coef;
                    }
                }
            }
        }
        other => {
            return Err(Error::InvalidParameter(format!(
                "variant {other} has no penalty term"
            )))
        }
    }
    let (_, grad) = weighted_ce_loss_grad(model, features, classes, &weights)?;
    Ok((base + lambda * penalty, grad))
}

/// The penalized objective value alone.
pub fn regularized_loss(
    model: &LinearModel,
    features: ArrayView2<f64>,
    classes: &[usize],
    groups: &[usize],
    num_classes: usize,
    num_groups: usize,
    variant: Variant,
    lambda: f64,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let nll = per_row_nll(model, features, classes)?;
    let (_, ce) = batch_cells(&nll, classes, groups, num_classes, num_groups)?;
    let base = nll.iter().sum::<f64>() / nll.len() as f64;
    Ok(base + lambda * reg_term(&ce, variant)?)
}

/// Group-weight targets from a matrix of per-cell losses: one best
/// response per class, or a single response over the flattened cells, or
/// an ascent step from `current` on the simplex.
pub fn q_targets_from_losses(
    cell_losses: &[Vec<f64>],
    spec: &UncertaintySpec,
    current: &[GroupWeights],
    eg_step: f64,
) -> Result<Vec<GroupWeights>> {
    spec.validate()?;
    let solve = |losses: &[f64]| -> Result<Vec<f64>> {
        if spec.allow_negative {
            best_response(losses, spec.rho)
        } else {
            best_response_nonneg(losses, spec.rho)
        }
    };
    if spec.use_chi2 && spec.classwise {
        let mut out = Vec::with_capacity(cell_losses.len());
        for (y, losses) in cell_losses.iter().enumerate() {
            if losses.len() != spec.num_groups {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} groups", spec.num_groups),
                    got: format!("{}", losses.len()),
                });
            }
            out.push(GroupWeights {
                class_index: y,
                weights: solve(losses)?,
            });
        }
        return Ok(out);
    }
    let flat: Vec<f64> = cell_losses.iter().flatten().copied().collect();
    if flat.len() != spec.num_groups {
        return Err(Error::ShapeMismatch {
            expected: format!("{} cells", spec.num_groups),
            got: format!("{}", flat.len()),
        });
    }
    let weights = if spec.use_chi2 {
        solve(&flat)?
    } else {
        let cur = current.first().ok_or_else(|| {
            Error::InvalidParameter("simplex ascent needs the current weights".into())
        })?;
        simplex_best_response(&flat, eg_step, &cur.weights)?
    };
    Ok(vec![GroupWeights {
        class_index: 0,
        weights,
    }])
}

/// Spec-shaped convenience: compute the zero-one cell losses of `model`
/// over `partition` and derive the weight targets from them.
pub fn compute_q_targets(
    model: &LinearModel,
    data: &LabeledDataset,
    partition: &CellPartition,
    spec: &UncertaintySpec,
    current: &[GroupWeights],
    eg_step: f64,
) -> Result<Vec<GroupWeights>> {
    let matrix = cell_accuracies(model, data, partition)?;
    let losses: Vec<Vec<f64>> = (0..data.num_classes())
        .map(|y| {
            (0..data.num_groups())
                .map(|a| 1.0 - matrix.acc(y, a))
                .collect()
        })
        .collect();
    q_targets_from_losses(&losses, spec, current, eg_step)
}

fn uniform_q(variant: Variant, num_classes: usize, num_groups: usize) -> Vec<GroupWeights> {
    if variant.classwise() {
        (0..num_classes)
            .map(|y| GroupWeights {
                class_index: y,
                weights: vec![1.0 / num_groups as f64; num_groups],
            })
            .collect()
    } else {
        let cells = num_classes * num_groups;
        vec![GroupWeights {
            class_index: 0,
            weights: vec![1.0 / cells as f64; cells],
        }]
    }
}

fn row_weights(
    variant: Variant,
    q: &[GroupWeights],
    rw: Option<&Vec<Vec<f64>>>,
    classes: &[usize],
    groups: &[usize],
    num_groups: usize,
) -> Vec<f64> {
    let cells = q.first().map(|g| g.weights.len()).unwrap_or(0);
    classes
        .iter()
        .zip(groups)
        .map(|(&y, &a)| match variant {
            Variant::Scratch | Variant::GapReg | Variant::VarReg => 1.0,
            Variant::Rw => rw.expect("rw weights precomputed")[y][a],
            Variant::FairDro | Variant::FairDroNonneg => {
                q[y].weights[a] * num_groups as f64
            }
            Variant::FairDroNoClasswise | Variant::GroupDro => {
                q[0].weights[y * num_groups + a] * cells as f64
            }
        })
        .collect()
}

struct QState {
    spec: UncertaintySpec,
    q: Vec<GroupWeights>,
}

impl QState {
    /// Full-dataset zero-one losses with the current parameters, then one
    /// (possibly smoothed) update of every weight vector.
    fn refresh(
        &mut self,
        model: &LinearModel,
        data: &LabeledDataset,
        partition: &CellPartition,
        config: &TrainConfig,
        epoch: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let matrix = cell_accuracies(model, data, partition)?;
        let losses: Vec<Vec<f64>> = (0..data.num_classes())
            .map(|y| {
                (0..data.num_groups())
                    .map(|a| 1.0 - matrix.acc(y, a))
                    .collect()
            })
            .collect();
        let targets = q_targets_from_losses(&losses, &self.spec, &self.q, config.eg_step)?;
        let next = if config.smoothing {
            self.q
                .iter()
                .zip(&targets)
                .map(|(cur, tgt)| {
                    Ok(GroupWeights {
                        class_index: tgt.class_index,
                        weights: smoothed_ibr_update(
                            &cur.weights,
                            &tgt.weights,
                            epoch,
                            config.epochs,
                        )?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            targets
        };
        for gw in &next {
            gw.validate(&self.spec)?;
        }
        self.q = next;
        Ok(losses)
    }
}

fn check_finite_model(model: &LinearModel, epoch: usize) -> Result<()> {
    if model.theta().iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { epoch });
    }
    Ok(())
}

/// Runs the full schedule for `config` and returns the final model with
/// its per-epoch history. Deterministic: identical inputs produce
/// bit-identical models and histories.
pub fn train(
    config: &TrainConfig,
    train_data: &LabeledDataset,
    test_data: &LabeledDataset,
) -> Result<(LinearModel, TrainHistory)> {
    config.validate(train_data.num_classes(), train_data.num_groups())?;
    if test_data.num_classes() != train_data.num_classes()
        || test_data.num_groups() != train_data.num_groups()
        || test_data.num_features() != train_data.num_features()
    {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "test split shaped like train ({} classes, {} groups, {} features)",
                train_data.num_classes(),
                train_data.num_groups(),
                train_data.num_features()
            ),
            got: format!(
                "{} classes, {} groups, {} features",
                test_data.num_classes(),
                test_data.num_groups(),
                test_data.num_features()
            ),
        });
    }
    let ny = train_data.num_classes();
    let na = train_data.num_groups();
    let partition = partition_cells(train_data)?;
    let test_partition = partition_cells(test_data)?;
    let rw = if config.variant == Variant::Rw {
        Some(rw_weights(&partition)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LinearModel::random_init(ny, train_data.num_features(), 0.01, &mut rng)?;
    let mut opt = OptimizerState::new(ny, train_data.num_features(), config.weight_decay)?;
    let mut q_state = config
        .variant
        .uncertainty_spec(config.rho, ny, na)
        .map(|spec| QState {
            spec,
            q: uniform_q(config.variant, ny, na),
        });
    // Non-robust variants still report a (constant, uniform) q trajectory.
    let fixed_q = uniform_q(config.variant, ny, na);

    let iters = config.iterations_for(train_data.num_rows());
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.base_lr, epoch, config.epochs)?;
        for iter in 0..iters {
            let idx = balanced_batch(&partition, config.batch_size, &mut rng)?;
            let feats = train_data.features().select(Axis(0), &idx);
            let classes: Vec<usize> = idx.iter().map(|&i| train_data.classes()[i]).collect();
            let groups: Vec<usize> = idx.iter().map(|&i| train_data.groups()[i]).collect();
            let (loss, grad) = match config.variant {
                Variant::GapReg | Variant::VarReg => regularized_loss_grad(
                    &model,
                    feats.view(),
                    &classes,
                    &groups,
                    ny,
                    na,
                    config.variant,
                    config.lambda.unwrap_or(0.0),
                )?,
                _ => {
                    let weights = row_weights(
                        config.variant,
                        q_state.as_ref().map(|s| s.q.as_slice()).unwrap_or(&fixed_q),
                        rw.as_ref(),
                        &classes,
                        &groups,
                        na,
                    );
                    weighted_ce_loss_grad(&model, feats.view(), &classes, &weights)?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adamw_step(&mut model, &mut opt, &grad, lr)?;
            check_finite_model(&model, epoch)?;
            if let (Some(state), Some(k)) = (q_state.as_mut(), config.q_update_interval) {
                if (iter + 1) % k == 0 {
                    state.refresh(&model, train_data, &partition, config, epoch)?;
                }
            }
        }
        // Per-epoch weight refresh from full-dataset zero-one losses with
        // the post-epoch parameters; also the history's loss snapshot.
        let group_losses = match q_state.as_mut() {
            Some(state) if config.q_update_interval.is_none() => {
                state.refresh(&model, train_data, &partition, config, epoch)?
            }
            _ => {
                let matrix = cell_accuracies(&model, train_data, &partition)?;
                (0..ny)
                    .map(|y| (0..na).map(|a| 1.0 - matrix.acc(y, a)).collect())
                    .collect()
            }
        };
        let train_accuracy = cell_accuracies(&model, train_data, &partition)?;
        let test_accuracy = cell_accuracies(&model, test_data, &test_partition)?;
        records.push(EpochRecord {
            epoch,
            lr,
            q: q_state.as_ref().map(|s| s.q.clone()).unwrap_or_else(|| fixed_q.clone()),
            group_losses,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok((model, TrainHistory { records }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SyntheticSpec};
    use crate::dro::chi2_divergence;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;

    fn tiny_data(seed: u64) -> (LabeledDataset, LabeledDataset) {
        let spec = SyntheticSpec::symmetric(50, seed);
        let data = generate_synthetic(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        crate::dataset::split(&data, 0.2, &mut rng).unwrap()
    }

    fn quick_config(variant: Variant) -> TrainConfig {
        let mut c = TrainConfig::defaults(variant);
        c.epochs = 4;
        c.batch_size = 32;
        c.iterations_per_epoch = Some(3);
        if variant.needs_rho() {
            c.rho = Some(0.5);
        }
        if variant.needs_lambda() {
            c.lambda = Some(0.5);
        }
        c
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_str(v.name()).unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        let err = Variant::from_str("fairway").unwrap_err();
        assert!(err.to_string().contains("group_dro"));
    }

    #[test]
    fn config_validation_catches_missing_and_invalid_fields() {
        let mut c = TrainConfig::defaults(Variant::FairDro);
        assert!(c.validate(2, 2).is_err()); // rho missing
        c.rho = Some(0.0);
        assert!(c.validate(2, 2).is_err()); // rho not positive
        c.rho = Some(1.0);
        c.validate(2, 2).unwrap();
        c.batch_size = 100;
        assert!(matches!(
            c.validate(2, 3),
            Err(Error::BatchSize { batch: 100, cells: 6 })
        ));

        let mut g = TrainConfig::defaults(Variant::GapReg);
        assert!(g.validate(2, 2).is_err()); // lambda missing
        g.lambda = Some(-1.0);
        assert!(g.validate(2, 2).is_err());
        g.lambda = Some(0.0);
        g.validate(2, 2).unwrap();

        let mut s = TrainConfig::defaults(Variant::Scratch);
        s.validate(2, 2).unwrap();
        s.epochs = 0;
        assert!(s.validate(2, 2).is_err());
    }

    #[test]
    fn one_pass_iteration_default() {
        let c = TrainConfig::defaults(Variant::Scratch);
        assert_eq!(c.iterations_for(2000), 16);
        assert_eq!(c.iterations_for(128), 1);
        assert_eq!(c.iterations_for(1), 1);
        let mut c2 = c;
        c2.iterations_per_epoch = Some(5);
        assert_eq!(c2.iterations_for(2000), 5);
    }

    #[test]
    fn rw_weights_match_hand_values() {
        // Balanced table: all ones.
        let spec = SyntheticSpec::symmetric(25, 3);
        let data = generate_synthetic(&spec).unwrap();
        let p = partition_cells(&data).unwrap();
        let w = rw_weights(&p).unwrap();
        for row in &w {
            for &v in row {
                assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
            }
        }

        // Skewed table [[40,10],[10,40]].
        let mut feats = Vec::new();
        let mut classes = Vec::new();
        let mut groups = Vec::new();
        for (y, a, n) in [(0, 0, 40), (0, 1, 10), (1, 0, 10), (1, 1, 40)] {
            for _ in 0..n {
                feats.push(y as f64);
                classes.push(y);
                groups.push(a);
            }
        }
        let data = LabeledDataset::new(
            Array2::from_shape_vec((100, 1), feats).unwrap(),
            classes,
            groups,
        )
        .unwrap();
        let p = partition_cells(&data).unwrap();
        let w = rw_weights(&p).unwrap();
        assert_abs_diff_eq!(w[0][0], 0.625, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0][1], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1][0], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1][1], 0.625, epsilon = 1e-12);
        // Total weighted mass equals the row count.
        let mass: f64 = (0..2)
            .flat_map(|y| (0..2).map(move |a| (y, a)))
            .map(|(y, a)| w[y][a] * p.counts()[y][a] as f64)
            .sum();
        assert_abs_diff_eq!(mass, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn rw_mass_identity_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let mut feats = Vec::new();
            let mut classes = Vec::new();
            let mut groups = Vec::new();
            let mut total = 0usize;
            for y in 0..2 {
                for a in 0..3 {
                    let n = rng.random_range(1..30);
                    total += n;
                    for _ in 0..n {
                        feats.push(rng.random_range(-1.0..1.0));
                        classes.push(y);
                        groups.push(a);
                    }
                }
            }
            let data = LabeledDataset::new(
                Array2::from_shape_vec((total, 1), feats).unwrap(),
                classes,
                groups,
            )
            .unwrap();
            let p = partition_cells(&data).unwrap();
            let w = rw_weights(&p).unwrap();
            let mass: f64 = (0..2)
                .flat_map(|y| (0..3).map(move |a| (y, a)))
                .map(|(y, a)| w[y][a] * p.counts()[y][a] as f64)
                .sum();
            assert_abs_diff_eq!(mass, total as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn penalty_term_matches_hand_values() {
        let ce = vec![vec![0.5, 0.9], vec![0.3, 0.3]];
        assert_abs_diff_eq!(reg_term(&ce, Variant::GapReg).unwrap(), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(reg_term(&ce, Variant::VarReg).unwrap(), 0.02, epsilon = 1e-12);
        let equal = vec![vec![0.4, 0.4], vec![0.4, 0.4]];
        assert_abs_diff_eq!(reg_term(&equal, Variant::GapReg).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(reg_term(&equal, Variant::VarReg).unwrap(), 0.0, epsilon = 1e-15);
        assert!(reg_term(&ce, Variant::Scratch).is_err());
    }

    fn small_batch(
        seed: u64,
    ) -> (LinearModel, Array2<f64>, Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 24;
        let d = 5;
        let feats = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let classes: Vec<usize> = (0..n).map(|i| (i / 6) % 2).collect();
        let groups: Vec<usize> = (0..n).map(|i| (i / 3) % 2).collect();
        let model = LinearModel::random_init(2, d, 0.3, &mut rng).unwrap();
        (model, feats, classes, groups)
    }

    #[test]
    fn zero_lambda_penalized_loss_is_plain_balanced_loss() {
        let (model, feats, classes, groups) = small_batch(7);
        let reg = regularized_loss(
            &model,
            feats.view(),
            &classes,
            &groups,
            2,
            2,
            Variant::GapReg,
            0.0,
        )
        .unwrap();
        let ones = vec![1.0; classes.len()];
        let plain =
            crate::model::weighted_cross_entropy(&model, feats.view(), &classes, &ones).unwrap();
        assert_abs_diff_eq!(reg, plain, epsilon = 1e-15);
    }

    #[test]
    fn penalized_gradient_matches_finite_differences() {
        for (variant, seed) in [(Variant::GapReg, 7), (Variant::VarReg, 8)] {
            let (model, feats, classes, groups) = small_batch(seed);
            let (loss, grad) = regularized_loss_grad(
                &model,
                feats.view(),
                &classes,
                &groups,
                2,
                2,
                variant,
                0.7,
            )
            .unwrap();
            let check = regularized_loss(
                &model,
                feats.view(),
                &classes,
                &groups,
                2,
                2,
                variant,
                0.7,
            )
            .unwrap();
            assert_abs_diff_eq!(loss, check, epsilon = 1e-12);

            let h = 1e-5;
            let mut max_rel = 0.0_f64;
            let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            for r in 0..2 {
                for c in 0..6 {
                    let mut up = model.theta().clone();
                    up[(r, c)] += h;
                    let mut dn = model.theta().clone();
                    dn[(r, c)] -= h;
                    let f_up = regularized_loss(
                        &LinearModel::from_theta(up).unwrap(),
                        feats.view(),
                        &classes,
                        &groups,
                        2,
                        2,
                        variant,
                        0.7,
                    )
                    .unwrap();
                    let f_dn = regularized_loss(
                        &LinearModel::from_theta(dn).unwrap(),
                        feats.view(),
                        &classes,
                        &groups,
                        2,
                        2,
                        variant,
                        0.7,
                    )
                    .unwrap();
                    let fd = (f_up - f_dn) / (2.0 * h);
                    max_rel = max_rel.max((fd - grad[(r, c)]).abs() / (1.0 + grad_norm));
                }
            }
            assert!(max_rel < 1e-5, "{variant}: relative error {max_rel}");
        }
    }

    #[test]
    fn q_targets_solve_each_class_independently() {
        let spec = UncertaintySpec {
            rho: 0.5,
            num_groups: 2,
            allow_negative: true,
            classwise: true,
            use_chi2: true,
        };
        let losses = vec![vec![0.6, 0.2], vec![0.4, 0.4]];
        let targets = q_targets_from_losses(&losses, &spec, &[], 0.1).unwrap();
        assert_eq!(targets.len(), 2);
        assert_eq!(targets[0].class_index, 0);
        assert_abs_diff_eq!(targets[0].weights[0], 0.85355, epsilon = 1e-4);
        assert_abs_diff_eq!(targets[0].weights[1], 0.14645, epsilon = 1e-4);
        assert_eq!(targets[1].weights, vec![0.5, 0.5]);
    }

    #[test]
    fn flattened_targets_differ_from_classwise_pairs() {
        let losses = vec![vec![0.6, 0.2], vec![0.4, 0.4]];
        let flat_spec = UncertaintySpec {
            rho: 0.5,
            num_groups: 4,
            allow_negative: true,
            classwise: false,
            use_chi2: true,
        };
        let flat = q_targets_from_losses(&losses, &flat_spec, &[], 0.1).unwrap();
        assert_eq!(flat.len(), 1);
        assert_eq!(flat[0].weights.len(), 4);
        assert_abs_diff_eq!(flat[0].weights.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        // Flattened deviations [0.2, -0.2, 0, 0] around the global mean 0.4
        // give [1/4 + 1/4, 1/4 - 1/4, 1/4, 1/4]; the shared budget pushes
        // the extreme cell less far than its classwise response (0.85).
        let expect = [0.5, 0.0, 0.25, 0.25];
        for (w, e) in flat[0].weights.iter().zip(expect) {
            assert_abs_diff_eq!(*w, e, epsilon = 1e-10);
        }
    }

    #[test]
    fn simplex_targets_step_from_the_current_iterate() {
        let losses = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let spec = UncertaintySpec {
            rho: 0.0,
            num_groups: 4,
            allow_negative: false,
            classwise: false,
            use_chi2: false,
        };
        let current = vec![GroupWeights {
            class_index: 0,
            weights: vec![0.25; 4],
        }];
        let t = q_targets_from_losses(&losses, &spec, &current, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(t[0].weights[0], e / (e + 3.0), epsilon = 1e-12);
        assert!(q_targets_from_losses(&losses, &spec, &[], 1.0).is_err());
    }

    #[test]
    fn scratch_history_is_uniform_and_deterministic() {
        let (train_d, test_d) = tiny_data(11);
        let config = quick_config(Variant::Scratch);
        let (m1, h1) = train(&config, &train_d, &test_d).unwrap();
        let (m2, h2) = train(&config, &train_d, &test_d).unwrap();
        assert_eq!(m1.theta(), m2.theta());
        assert_eq!(h1, h2);
        assert_eq!(h1.records().len(), 4);
        for (t, rec) in h1.records().iter().enumerate() {
            assert_eq!(rec.epoch, t);
            assert_eq!(rec.lr, cosine_lr(config.base_lr, t, 4).unwrap());
            for gw in &rec.q {
                assert_eq!(gw.weights, vec![0.5, 0.5]);
            }
        }
    }

    #[test]
    fn vanishing_rho_reproduces_scratch_exactly() {
        let (train_d, test_d) = tiny_data(13);
        let scratch = quick_config(Variant::Scratch);
        let mut dro = quick_config(Variant::FairDro);
        dro.rho = Some(1e-300);
        let (ms, _) = train(&scratch, &train_d, &test_d).unwrap();
        let (md, hd) = train(&dro, &train_d, &test_d).unwrap();
        assert_eq!(ms.theta(), md.theta());
        for rec in hd.records() {
            for gw in &rec.q {
                assert_eq!(gw.weights, vec![0.5, 0.5]);
            }
        }
    }

    #[test]
    fn robust_weights_stay_in_their_ball_and_move() {
        let spec = SyntheticSpec::biased(60, 19);
        let data = generate_synthetic(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (train_d, test_d) = crate::dataset::split(&data, 0.25, &mut rng).unwrap();
        let mut config = quick_config(Variant::FairDro);
        config.epochs = 6;
        config.rho = Some(1.0);
        let (_, history) = train(&config, &train_d, &test_d).unwrap();
        let mut moved = false;
        for rec in history.records() {
            assert_eq!(rec.q.len(), 2);
            for gw in &rec.q {
                assert_abs_diff_eq!(gw.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
                assert!(chi2_divergence(&gw.weights).unwrap() <= 1.0 + 1e-8);
                if (gw.weights[0] - 0.5).abs() > 1e-3 {
                    moved = true;
                }
            }
        }
        assert!(moved, "group weights never left uniform on biased data");
    }

    #[test]
    fn simplex_variant_stays_on_the_simplex() {
        let spec = SyntheticSpec::biased(40, 23);
        let data = generate_synthetic(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (train_d, test_d) = crate::dataset::split(&data, 0.25, &mut rng).unwrap();
        let config = quick_config(Variant::GroupDro);
        let (_, history) = train(&config, &train_d, &test_d).unwrap();
        for rec in history.records() {
            assert_eq!(rec.q.len(), 1);
            assert_eq!(rec.q[0].weights.len(), 4);
            assert_abs_diff_eq!(rec.q[0].weights.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
            assert!(rec.q[0].weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn all_variants_run_end_to_end() {
        let (train_d, test_d) = tiny_data(29);
        for v in Variant::ALL {
            let config = quick_config(v);
            let (model, history) = train(&config, &train_d, &test_d).unwrap();
            assert_eq!(history.records().len(), config.epochs);
            assert!(model.theta().iter().all(|t| t.is_finite()), "{v}");
        }
    }

    #[test]
    fn interval_updates_refresh_mid_epoch() {
        let (train_d, test_d) = tiny_data(31);
        let mut config = quick_config(Variant::FairDro);
        config.q_update_interval = Some(1);
        config.rho = Some(1.0);
        let (_, history) = train(&config, &train_d, &test_d).unwrap();
        assert_eq!(history.records().len(), config.epochs);
    }

    #[test]
    fn exploding_learning_rate_is_reported_as_divergence() {
        let (train_d, test_d) = tiny_data(37);
        let mut config = quick_config(Variant::Scratch);
        config.base_lr = 1e308;
        match train(&config, &train_d, &test_d) {
            Err(Error::Diverged { epoch }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn history_round_trips_through_jsonl() {
        let (train_d, test_d) = tiny_data(43);
        let mut config = quick_config(Variant::FairDro);
        config.rho = Some(0.3);
        let (_, history) = train(&config, &train_d, &test_d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        history.save_jsonl(&path).unwrap();
        let back = TrainHistory::load_jsonl(&path).unwrap();
        assert_eq!(back, history);
        assert_eq!(back.final_record().epoch, config.epochs - 1);
    }
}
