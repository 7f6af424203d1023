//! Multinomial logistic regression and its optimizer.
//!
//! The parameter matrix `theta` has one row per class and `d + 1` columns,
//! the last being the bias. Losses use a max-subtracted softmax with
//! probabilities floored at 1e-300 before the log, and are normalized by
//! row count (never by weight sum) so negative sample weights stay
//! meaningful. AdamW applies decoupled weight decay with bias-corrected
//! moments.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

const PROB_FLOOR: f64 = 1e-300;

/// Linear classifier: class scores are `theta . [x; 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    theta: Array2<f64>,
}

impl LinearModel {
    /// Zero-initialized model for `num_features` inputs.
    pub fn zeros(num_classes: usize, num_features: usize) -> Result<Self> {
        Self::from_theta(Array2::zeros((num_classes, num_features + 1)))
    }

    /// Wraps an existing parameter matrix of shape `(num_classes, d + 1)`.
    pub fn from_theta(theta: Array2<f64>) -> Result<Self> {
        if theta.nrows() < 2 || theta.ncols() < 1 {
            return Err(Error::ShapeMismatch {
                expected: "at least 2 rows and 1 column".into(),
                got: format!("{}x{}", theta.nrows(), theta.ncols()),
            });
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("theta contains a non-finite value".into()));
        }
        Ok(Self { theta })
    }

    /// Gaussian initialization with standard deviation `scale`.
    pub fn random_init<R: Rng>(
        num_classes: usize,
        num_features: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut theta = Array2::zeros((num_classes, num_features + 1));
        for v in theta.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = scale * z;
        }
        Self::from_theta(theta)
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn num_classes(&self) -> usize {
        self.theta.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.theta.ncols() - 1
    }

    fn check_features(&self, features: ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.num_features() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature columns", self.num_features()),
                got: format!("{}", features.ncols()),
            });
        }
        Ok(())
    }

    /// Class scores for each row: an `(n, num_classes)` matrix.
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_features(features)?;
        let d = self.num_features();
        let weights = self.theta.slice(s![.., ..d]);
        let bias = self.theta.slice(s![.., d]);
        let mut logits = features.dot(&weights.t());
        logits += &bias;
        Ok(logits)
    }

    /// Predicted class per row: the argmax of the logits, ties resolved to
    /// the lowest class index.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits.axis_iter(Axis(0)).map(argmax_row).collect())
    }

    /// Writes the checkpoint format: a `rows cols` header line, then one
    /// line per class with space-separated decimal values that round-trip
    /// exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{} {}", self.theta.nrows(), self.theta.ncols()).unwrap();
        for row in self.theta.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`LinearModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::EmptyInput)?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                line: 1,
                message: format!("bad shape header {header:?}"),
            })?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Parse {
                line: 1,
                message: format!("bad shape header {header:?}"),
            });
        };
        let mut theta = Array2::zeros((rows, cols));
        for r in 0..rows {
            let (idx, line) = lines.next().ok_or(Error::Parse {
                line: (r + 2) as u64,
                message: "missing row".into(),
            })?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse {
                    line: (idx + 1) as u64,
                    message: "bad value".into(),
                })?;
            if values.len() != cols {
                return Err(Error::Parse {
                    line: (idx + 1) as u64,
                    message: format!("expected {cols} values, got {}", values.len()),
                });
            }
            for (c, v) in values.into_iter().enumerate() {
                theta[(r, c)] = v;
            }
        }
        Self::from_theta(theta)
    }
}

fn argmax_row(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn validate_batch(
    model: &LinearModel,
    features: ArrayView2<f64>,
    classes: &[usize],
    weights: &[f64],
) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    model.check_features(features)?;
    if classes.len() != features.nrows() || weights.len() != features.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels and weights", features.nrows()),
            got: format!("{} labels, {} weights", classes.len(), weights.len()),
        });
    }
    if let Some(y) = classes.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::InvalidInput(format!(
            "class label {y} out of range 0..{}",
            model.num_classes()
        )));
    }
    if !weights.iter().all(|w| w.is_finite()) {
        return Err(Error::InvalidInput("non-finite sample weight".into()));
    }
    Ok(())
}

/// Max-subtracted softmax probabilities per row.
fn softmax(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

/// Weighted cross-entropy and its gradient in one softmax pass.
///
/// The loss is `sum_i w_i * nll_i / n` and the gradient is
/// `sum_i w_i * (softmax_i - onehot_i) (x) [x_i; 1] / n`, with `n` the row
/// count. Weights may be negative.
pub fn weighted_ce_loss_grad(
    model: &LinearModel,
    features: ArrayView2<f64>,
    classes: &[usize],
    weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    validate_batch(model, features, classes, weights)?;
    let n = features.nrows();
    let probs = softmax(model.logits(features)?);
    let mut loss = 0.0;
    let mut delta = probs;
    for i in 0..n {
        let p = delta[(i, classes[i])].max(PROB_FLOOR);
        loss += weights[i] * -p.ln();
        delta[(i, classes[i])] -= 1.0;
        let coef = weights[i] / n as f64;
        delta.row_mut(i).mapv_inplace(|v| v * coef);
    }
    loss /= n as f64;
    let grad_w = delta.t().dot(&features);
    let grad_b = delta.sum_axis(Axis(0));
    let mut grad = Array2::zeros((model.num_classes(), model.num_features() + 1));
    grad.slice_mut(s![.., ..model.num_features()]).assign(&grad_w);
    grad.slice_mut(s![.., model.num_features()]).assign(&grad_b);
    Ok((loss, grad))
}

/// Per-row negative log-likelihood of each row's own class.
pub fn per_row_nll(
    model: &LinearModel,
    features: ArrayView2<f64>,
    classes: &[usize],
) -> Result<Vec<f64>> {
    let ones = vec![1.0; features.nrows()];
    validate_batch(model, features, classes, &ones)?;
    let probs = softmax(model.logits(features)?);
    Ok(classes
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[(i, y)].max(PROB_FLOOR).ln())
        .collect())
}

/// Weighted mean cross-entropy over a batch, normalized by row count.
pub fn weighted_cross_entropy(
    model: &LinearModel,
    features: ArrayView2<f64>,
    classes: &[usize],
    weights: &[f64],
) -> Result<f64> {
    validate_batch(model, features, classes, weights)?;
    let n = features.nrows();
    let probs = softmax(model.logits(features)?);
    let mut loss = 0.0;
    for i in 0..n {
        let p = probs[(i, classes[i])].max(PROB_FLOOR);
        loss += weights[i] * -p.ln();
    }
    Ok(loss / n as f64)
}

/// Gradient of [`weighted_cross_entropy`] with respect to `theta`.
pub fn grad_weighted_cross_entropy(
    model: &LinearModel,
    features: ArrayView2<f64>,
    classes: &[usize],
    weights: &[f64],
) -> Result<Array2<f64>> {
    weighted_ce_loss_grad(model, features, classes, weights).map(|(_, g)| g)
}

/// Fraction of rows whose argmax prediction differs from the label.
pub fn zero_one_loss(
    model: &LinearModel,
    features: ArrayView2<f64>,
    classes: &[usize],
) -> Result<f64> {
    if features.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if classes.len() != features.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", features.nrows()),
            got: format!("{}", classes.len()),
        });
    }
    let preds = model.predict(features)?;
    let wrong = preds
        .iter()
        .zip(classes)
        .filter(|(p, y)| p != y)
        .count();
    Ok(wrong as f64 / features.nrows() as f64)
}

/// AdamW moment estimates and hyperparameters for one model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Array2<f64>,
    v: Array2<f64>,
    step_count: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
}

impl OptimizerState {
    /// Fresh state with the usual Adam moment defaults
    /// (`beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`).
    pub fn new(num_classes: usize, num_features: usize, weight_decay: f64) -> Result<Self> {
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::InvalidParameter(
                "weight_decay must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            m: Array2::zeros((num_classes, num_features + 1)),
            v: Array2::zeros((num_classes, num_features + 1)),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One AdamW update with decoupled weight decay:
/// bias-corrected moments drive the gradient step, and the decay term
/// `lr * wd * theta` is subtracted separately.
pub fn adamw_step(
    model: &mut LinearModel,
    state: &mut OptimizerState,
    grad: &Array2<f64>,
    learning_rate: f64,
) -> Result<()> {
    if grad.dim() != model.theta.dim() || state.m.dim() != model.theta.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", model.theta.dim()),
            got: format!("grad {:?}, state {:?}", grad.dim(), state.m.dim()),
        });
    }
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::InvalidParameter(
            "learning rate must be finite and non-negative".into(),
        ));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((th, (m, v)), g) in model
        .theta
        .iter_mut()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        .zip(grad.iter())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *th -= learning_rate * (m_hat / (v_hat.sqrt() + state.epsilon) + state.weight_decay * *th);
    }
    Ok(())
}

/// Cosine annealing: `base_lr * 0.5 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(base_lr: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidParameter("total epochs must be >= 1".into()));
    }
    if t > total {
        return Err(Error::InvalidParameter(format!(
            "epoch {t} beyond schedule length {total}"
        )));
    }
    if !base_lr.is_finite() || base_lr < 0.0 {
        return Err(Error::InvalidParameter(
            "base_lr must be finite and non-negative".into(),
        ));
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Turns per-row class labels into the one-hot weights `sum_a` used by a
/// few tests and examples; exposed mostly for symmetry with the loss API.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(
        n: usize,
        d: usize,
        k: usize,
        seed: u64,
    ) -> (Array2<f64>, Vec<usize>, LinearModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Array2::zeros((n, d));
        for v in features.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let model = LinearModel::random_init(k, d, 0.5, &mut rng).unwrap();
        (features, classes, model)
    }

    #[test]
    fn zero_theta_gives_zero_logits() {
        let model = LinearModel::zeros(3, 4).unwrap();
        let logits = model.logits(Array2::ones((2, 4)).view()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_weights_pass_features_through() {
        let theta = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let model = LinearModel::from_theta(theta).unwrap();
        let x = array![[0.0, 1.0], [1.0, 0.0]];
        let logits = model.logits(x.view()).unwrap();
        assert_eq!(logits, array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn logits_match_triple_loop_oracle() {
        let (features, _, model) = random_batch(20, 5, 3, 42);
        let logits = model.logits(features.view()).unwrap();
        for i in 0..20 {
            for c in 0..3 {
                let mut expected = model.theta()[(c, 5)];
                for d in 0..5 {
                    expected += model.theta()[(c, d)] * features[(i, d)];
                }
                assert_abs_diff_eq!(logits[(i, c)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn logits_reject_feature_width_mismatch() {
        let model = LinearModel::zeros(2, 3).unwrap();
        assert!(model.logits(Array2::zeros((2, 4)).view()).is_err());
    }

    #[test]
    fn predict_breaks_ties_low() {
        let model = LinearModel::zeros(2, 2).unwrap();
        assert_eq!(model.predict(Array2::ones((1, 2)).view()).unwrap(), vec![0]);
        let theta = array![[0.0, 0.0, -1.0], [0.0, 0.0, 2.0], [0.0, 0.0, 0.0]];
        let model = LinearModel::from_theta(theta).unwrap();
        assert_eq!(model.predict(Array2::zeros((1, 2)).view()).unwrap(), vec![1]);
    }

    #[test]
    fn predict_matches_softmax_argmax_oracle() {
        let (features, _, model) = random_batch(1000, 4, 5, 7);
        let preds = model.predict(features.view()).unwrap();
        let probs = softmax(model.logits(features.view()).unwrap());
        for (i, &p) in preds.iter().enumerate() {
            let row = probs.row(i);
            let oracle = (0..5)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(row[p], row[oracle]);
        }
    }

    #[test]
    fn cross_entropy_with_zero_weights_is_zero() {
        let (features, classes, model) = random_batch(10, 3, 2, 1);
        let loss =
            weighted_cross_entropy(&model, features.view(), &classes, &[0.0; 10]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_model_binary_loss_is_ln_two() {
        let model = LinearModel::zeros(2, 3).unwrap();
        let features = Array2::ones((4, 3));
        let loss =
            weighted_cross_entropy(&model, features.view(), &[0, 1, 0, 1], &[1.0; 4]).unwrap();
        assert_abs_diff_eq!(loss, 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_composes_linearly_in_weights() {
        let (features, classes, model) = random_batch(12, 4, 3, 9);
        let mut per_row = Vec::new();
        for i in 0..12 {
            let row = features.slice(s![i..i + 1, ..]);
            per_row.push(
                weighted_cross_entropy(&model, row, &classes[i..i + 1], &[1.0]).unwrap(),
            );
        }
        let weights: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 2.0 } else { -1.0 }).collect();
        let expected: f64 = per_row
            .iter()
            .zip(&weights)
            .map(|(l, w)| l * w)
            .sum::<f64>()
            / 12.0;
        let loss = weighted_cross_entropy(&model, features.view(), &classes, &weights).unwrap();
        assert_abs_diff_eq!(loss, expected, epsilon = 1e-12);
    }

    #[test]
    fn gradient_vanishes_with_zero_weights() {
        let (features, classes, model) = random_batch(10, 3, 2, 3);
        let grad =
            grad_weighted_cross_entropy(&model, features.view(), &classes, &[0.0; 10]).unwrap();
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = LinearModel::zeros(2, 3).unwrap();
        let features = Array2::zeros((0, 3));
        assert!(matches!(
            weighted_cross_entropy(&model, features.view(), &[], &[]),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn zero_one_loss_counts_mistakes() {
        let theta = array![[1.0, 0.0], [-1.0, 0.0]];
        let model = LinearModel::from_theta(theta).unwrap();
        let features = array![[1.0], [-1.0], [2.0], [-2.0]];
        // Predictions: 0, 1, 0, 1.
        assert_eq!(
            zero_one_loss(&model, features.view(), &[0, 1, 0, 1]).unwrap(),
            0.0
        );
        assert_eq!(
            zero_one_loss(&model, features.view(), &[1, 1, 0, 0]).unwrap(),
            0.5
        );
        let constant = LinearModel::zeros(2, 1).unwrap();
        assert_eq!(
            zero_one_loss(&constant, features.view(), &[0, 1, 0, 1]).unwrap(),
            0.5
        );
    }

    #[test]
    fn zero_one_matches_counting_oracle() {
        let (features, classes, model) = random_batch(200, 3, 4, 8);
        let preds = model.predict(features.view()).unwrap();
        let expected = preds
            .iter()
            .zip(&classes)
            .filter(|(p, y)| p != y)
            .count() as f64
            / 200.0;
        assert_eq!(
            zero_one_loss(&model, features.view(), &classes).unwrap(),
            expected
        );
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut model = LinearModel::from_theta(Array2::zeros((2, 1))).unwrap();
        let mut state = OptimizerState::new(2, 0, 0.0).unwrap();
        let grad = array![[1.0], [0.0]];
        adamw_step(&mut model, &mut state, &grad, 0.001).unwrap();
        assert!((model.theta()[(0, 0)] + 0.001).abs() < 1e-6);
        assert_eq!(model.theta()[(1, 0)], 0.0);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adamw_zero_gradient_applies_only_decay() {
        let mut model = LinearModel::from_theta(array![[1.0], [1.0]]).unwrap();
        let mut state = OptimizerState::new(2, 0, 0.001).unwrap();
        let grad = Array2::zeros((2, 1));
        adamw_step(&mut model, &mut state, &grad, 0.001).unwrap();
        assert_abs_diff_eq!(model.theta()[(0, 0)], 1.0 - 1e-6, epsilon = 1e-15);
        let mut plain = LinearModel::from_theta(array![[1.0], [1.0]]).unwrap();
        let mut no_decay = OptimizerState::new(2, 0, 0.0).unwrap();
        adamw_step(&mut plain, &mut no_decay, &grad, 0.001).unwrap();
        assert_eq!(plain.theta()[(0, 0)], 1.0);
    }

    #[test]
    fn cosine_schedule_hits_its_landmarks() {
        assert_eq!(cosine_lr(0.02, 0, 70).unwrap(), 0.02);
        assert_abs_diff_eq!(cosine_lr(0.02, 35, 70).unwrap(), 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_lr(0.02, 70, 70).unwrap(), 0.0, epsilon = 1e-15);
        assert!(cosine_lr(0.02, 71, 70).is_err());
        assert!(cosine_lr(0.02, 0, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = LinearModel::random_init(3, 7, 1.7, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        model.save(&path).unwrap();
        let loaded = LinearModel::load(&path).unwrap();
        assert_eq!(model.theta(), loaded.theta());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("3 8\n"));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        std::fs::write(&path, "2 3\n0 0 0\n").unwrap();
        assert!(matches!(
            LinearModel::load(&path),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
