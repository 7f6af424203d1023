//! Worst-case group reweighting over a chi-square ball.
//!
//! Given per-group losses `l` the inner problem is
//!
//! ```text
//! maximize   sum_a q_a * l_a
//! subject to sum_a q_a = 1
//!            chi2(q || uniform) <= rho
//! ```
//!
//! where `chi2(q || uniform) = (1/n) * sum_a (n * q_a - 1)^2` over `n`
//! groups. The feasible set is a ball around uniform intersected with the
//! sum-to-one plane, not the simplex: entries may go negative once
//! `rho > 1/(n-1)`, which is what lets the worst case actively penalize an
//! over-served group. The maximizer is closed-form:
//!
//! ```text
//! q_a = 1/n + sqrt(rho/n) * (l_a - mean) / ||l - mean||
//! ```
//!
//! with value `mean + sqrt(rho * var)` (population variance), every entry
//! inside `1/n +- sqrt(rho*(n-1))/n`, and uniform returned when all losses
//! are equal. A grid-search oracle over the constraint set double-checks
//! all of this at small group counts.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Deviation norms below `DEGENERATE * scale(losses)` are treated as the
/// equal-loss case, which has no preferred direction.
const DEGENERATE: f64 = 1e-12;

/// Describes one uncertainty set: its radius, the number of groups it
/// weighs, and which structural knobs are on. `classwise` picks one set
/// per class versus a single set over all class-group cells; `use_chi2`
/// distinguishes the chi-square ball from the plain simplex used by
/// exponentiated-gradient ascent; `allow_negative` keeps or clamps the
/// quasi-probability extension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySpec {
    pub rho: f64,
    pub num_groups: usize,
    pub allow_negative: bool,
    pub classwise: bool,
    pub use_chi2: bool,
}

impl UncertaintySpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_groups < 2 {
            return Err(Error::InvalidParameter(format!(
                "uncertainty set needs at least 2 groups, got {}",
                self.num_groups
            )));
        }
        if self.use_chi2 && !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rho must be finite and positive, got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// A weight vector over groups, tagged with the class it reweights.
/// Flattened (non-classwise) weightings use `class_index = 0` and one
/// entry per class-group cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub class_index: usize,
    pub weights: Vec<f64>,
}

impl GroupWeights {
    /// Checks the invariants this vector must satisfy as a member of
    /// `spec`'s constraint set: it sums to one (1e-10), stays inside the
    /// chi-square ball when the spec has one (rho + 1e-8), and stays
    /// non-negative when quasi-probabilities are disallowed.
    pub fn validate(&self, spec: &UncertaintySpec) -> Result<()> {
        if self.weights.len() != spec.num_groups {
            return Err(Error::ShapeMismatch {
                expected: format!("{} weights", spec.num_groups),
                got: format!("{}", self.weights.len()),
            });
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-10 {
            return Err(Error::Constraint(format!("weights sum to {sum}, not 1")));
        }
        if spec.use_chi2 {
            let div = chi2_divergence(&self.weights)?;
            if div > spec.rho + 1e-8 {
                return Err(Error::Constraint(format!(
                    "chi-square divergence {div} exceeds rho {}",
                    spec.rho
                )));
            }
        }
        if !spec.allow_negative {
            if let Some(w) = self.weights.iter().find(|w| **w < -1e-12) {
                return Err(Error::Constraint(format!("negative weight {w}")));
            }
        }
        Ok(())
    }
}

fn check_losses(losses: &[f64]) -> Result<()> {
    if losses.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 group losses, got {}",
            losses.len()
        )));
    }
    if !losses.iter().all(|l| l.is_finite()) {
        return Err(Error::InvalidInput("non-finite group loss".into()));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "rho must be finite and non-negative, got {rho}"
        )));
    }
    Ok(())
}

/// Chi-square divergence of `q` from the uniform distribution over its
/// own length. `q` must sum to one (1e-8).
pub fn chi2_divergence(q: &[f64]) -> Result<f64> {
    if q.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 weights, got {}",
            q.len()
        )));
    }
    if !q.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite weight".into()));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(Error::Constraint(format!("weights sum to {sum}, not 1")));
    }
    let n = q.len() as f64;
    Ok(q.iter().map(|&v| (n * v - 1.0).powi(2)).sum::<f64>() / n)
}

/// Centered deviations with the residual mean subtracted a second time, so
/// the weights built from them sum to one at machine precision even when
/// the deviations are tiny relative to the losses.
fn centered(losses: &[f64]) -> (f64, Vec<f64>, f64) {
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = losses.iter().map(|l| l - mean).collect();
    let resid = dev.iter().sum::<f64>() / n;
    for d in &mut dev {
        *d -= resid;
    }
    let norm = dev.iter().map(|d| d * d).sum::<f64>().sqrt();
    (mean, dev, norm)
}

fn loss_scale(losses: &[f64]) -> f64 {
    losses.iter().fold(1.0, |m, l| m.max(l.abs()))
}

/// Closed-form maximizer of the group-weighted loss over the chi-square
/// ball. Equal losses (up to the degeneracy threshold) return uniform;
/// otherwise the output sums to one, sits exactly on the ball boundary,
/// and respects the coordinate range `1/n +- sqrt(rho*(n-1))/n`.
pub fn best_response(losses: &[f64], rho: f64) -> Result<Vec<f64>> {
    check_losses(losses)?;
    check_rho(rho)?;
    let n = losses.len();
    let (_, dev, norm) = centered(losses);
    if norm <= DEGENERATE * loss_scale(losses) {
        return Ok(vec![1.0 / n as f64; n]);
    }
    let c = (rho / n as f64).sqrt() / norm;
    Ok(dev.iter().map(|d| 1.0 / n as f64 + c * d).collect())
}

/// Value of the inner maximization without materializing the weights:
/// `mean(losses) + sqrt(rho * var(losses))` with population variance.
pub fn worst_case_objective(losses: &[f64], rho: f64) -> Result<f64> {
    check_losses(losses)?;
    check_rho(rho)?;
    let (mean, _, norm) = centered(losses);
    if norm <= DEGENERATE * loss_scale(losses) {
        return Ok(mean);
    }
    let var = norm * norm / losses.len() as f64;
    Ok(mean + (rho * var).sqrt())
}

/// Best response restricted to non-negative weights, via active-set
/// clamping: solve unconstrained, zero out negative entries, and re-solve
/// over the remaining coordinates against the full uniform reference with
/// the full mass and the unchanged divergence budget. Terminates in at
/// most `n` rounds. This is a validated approximation (checked against the grid
/// oracle in tests), not a proven KKT solution: once clamped, a coordinate
/// stays clamped.
pub fn best_response_nonneg(losses: &[f64], rho: f64) -> Result<Vec<f64>> {
    check_losses(losses)?;
    check_rho(rho)?;
    let n = losses.len();
    let mut q = best_response(losses, rho)?;
    let mut free: Vec<usize> = (0..n).collect();
    for _ in 0..n {
        let negatives: Vec<usize> = free.iter().copied().filter(|&a| q[a] < 0.0).collect();
        if negatives.is_empty() {
            break;
        }
        for &a in &negatives {
            q[a] = 0.0;
        }
        free.retain(|a| !negatives.contains(a));
        let f = free.len();
        let k = n - f;
        // Clamping k coordinates costs k/n of the divergence budget and
        // shifts the free mass to 1; the radial term below is what is left
        // for spreading over the free coordinates. It stays non-negative
        // for every active set reachable from a negative entry.
        let radial = (rho / n as f64 - k as f64 / (n * f) as f64).max(0.0);
        let sub: Vec<f64> = free.iter().map(|&a| losses[a]).collect();
        let (_, dev, norm) = centered(&sub);
        if norm <= DEGENERATE * loss_scale(&sub) {
            for &a in &free {
                q[a] = 1.0 / f as f64;
            }
        } else {
            let c = radial.sqrt() / norm;
            for (i, &a) in free.iter().enumerate() {
                q[a] = 1.0 / f as f64 + c * dev[i];
            }
        }
    }
    Ok(q)
}

/// One exponentiated-gradient ascent step on the simplex:
/// `q_a <- q_a * exp(step * l_a)`, renormalized. `current` must lie on the
/// simplex (1e-8); entries inside the tolerance are treated as zero.
pub fn simplex_best_response(losses: &[f64], step_size: f64, current: &[f64]) -> Result<Vec<f64>> {
    check_losses(losses)?;
    if !step_size.is_finite() || step_size < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "step size must be finite and non-negative, got {step_size}"
        )));
    }
    if current.len() != losses.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} weights", losses.len()),
            got: format!("{}", current.len()),
        });
    }
    let sum: f64 = current.iter().sum();
    if (sum - 1.0).abs() > 1e-8 || current.iter().any(|&v| v < -1e-8) {
        return Err(Error::Constraint(format!(
            "current weights are off the simplex (sum {sum})"
        )));
    }
    let max_exp = losses
        .iter()
        .map(|l| step_size * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = current
        .iter()
        .zip(losses)
        .map(|(&q, &l)| q.max(0.0) * (step_size * l - max_exp).exp())
        .collect();
    let total: f64 = scaled.iter().sum();
    // Also rejects NaN and overflow to infinity, either of which would
    // silently zero the renormalized weights.
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Constraint(
            "exponentiated weights lost all mass".into(),
        ));
    }
    Ok(scaled.into_iter().map(|v| v / total).collect())
}

/// Smoothed iterated-best-response update at epoch `t` of `total`:
/// `q + eta * (target - q)` with `eta = 1 - t/total`, so early epochs jump
/// to the best response and late epochs barely move.
pub fn smoothed_ibr_update(
    current: &[f64],
    target: &[f64],
    t: usize,
    total: usize,
) -> Result<Vec<f64>> {
    if total == 0 || t >= total {
        return Err(Error::InvalidParameter(format!(
            "epoch {t} outside schedule of {total} epochs"
        )));
    }
    if current.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} weights", current.len()),
            got: format!("{}", target.len()),
        });
    }
    let eta = 1.0 - t as f64 / total as f64;
    Ok(current
        .iter()
        .zip(target)
        .map(|(&q, &s)| (1.0 - eta) * q + eta * s)
        .collect())
}

/// Builds an orthonormal basis of the zero-sum subspace via Gram-Schmidt
/// over the difference vectors e_k - e_{k+1}.
fn zero_sum_basis(n: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v[k + 1] = -1.0;
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (a, c) in v.iter_mut().zip(b) {
                *a -= dot * c;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in &mut v {
            *a /= norm;
        }
        basis.push(v);
    }
    basis
}

/// Exhaustive maximizer over the sum-to-one slice of the chi-square ball,
/// for cross-checking the closed form at up to 4 groups.
///
/// The objective is linear in `q` and the slice of the ball is a Euclidean
/// ball of radius `sqrt(rho / n)` around uniform, so the maximum sits on
/// the bounding sphere. The oracle therefore scans boundary points by
/// direction angle (`resolution^2` coarse directions), then refines the
/// angular window around the best one; the sphere has no feasibility
/// cliffs, so the refinement cannot stall on a wrong region. Returns the
/// best scanned point and its objective.
pub fn oracle_max(losses: &[f64], rho: f64, resolution: usize) -> Result<(Vec<f64>, f64)> {
    check_losses(losses)?;
    check_rho(rho)?;
    let n = losses.len();
    if n > 4 {
        return Err(Error::OracleScope { num_groups: n });
    }
    if resolution < 3 {
        return Err(Error::InvalidParameter(format!(
            "grid resolution must be at least 3, got {resolution}"
        )));
    }
    let uniform = 1.0 / n as f64;
    let radius = (rho / n as f64).sqrt();
    let basis = zero_sum_basis(n);
    let point = |dir: &[f64]| -> Vec<f64> {
        let mut q = vec![uniform; n];
        for (coeff, b) in dir.iter().zip(&basis) {
            for (entry, base) in q.iter_mut().zip(b) {
                *entry += radius * coeff * base;
            }
        }
        q
    };
    let objective = |q: &[f64]| q.iter().zip(losses).map(|(a, b)| a * b).sum::<f64>();

    // The interior candidate; any boundary point with a non-negative
    // projection beats it, so it only survives degenerate scans.
    let mut best_q = vec![uniform; n];
    let mut best_val = objective(&best_q);
    let mut consider = |dir: &[f64]| {
        let q = point(dir);
        let val = objective(&q);
        if val > best_val {
            best_val = val;
            best_q = q;
        }
    };

    match n {
        2 => {
            // One-dimensional slice: the boundary is two points.
            consider(&[1.0]);
            consider(&[-1.0]);
        }
        3 => {
            // Circle of directions; scan the angle, then zoom.
            let coarse = resolution * resolution;
            let mut center = 0.0f64;
            let mut half = std::f64::consts::PI;
            let mut best_angle = 0.0f64;
            for pass in 0..6 {
                let steps = if pass == 0 { coarse } else { resolution * 4 };
                let spacing = 2.0 * half / steps as f64;
                for k in 0..=steps {
                    let angle = center - half + spacing * k as f64;
                    let dir = [angle.cos(), angle.sin()];
                    let q = point(&dir);
                    let val = objective(&q);
                    if val > best_val {
                        best_val = val;
                        best_q = q;
                        best_angle = angle;
                    }
                }
                center = best_angle;
                half = 2.0 * spacing;
            }
        }
        _ => {
            // Sphere of directions: polar x azimuthal grid, then zoom.
            let mut center = (std::f64::consts::FRAC_PI_2, std::f64::consts::PI);
            let mut half = (std::f64::consts::FRAC_PI_2, std::f64::consts::PI);
            let mut best_dir = center;
            for pass in 0..6 {
                let steps = if pass == 0 { resolution * 2 } else { resolution };
                let s_theta = 2.0 * half.0 / steps as f64;
                let s_phi = 2.0 * half.1 / steps as f64;
                for i in 0..=steps {
                    let theta = center.0 - half.0 + s_theta * i as f64;
                    for j in 0..=steps {
                        let phi = center.1 - half.1 + s_phi * j as f64;
                        let dir = [
                            theta.sin() * phi.cos(),
                            theta.sin() * phi.sin(),
                            theta.cos(),
                        ];
                        let q = point(&dir);
                        let val = objective(&q);
                        if val > best_val {
                            best_val = val;
                            best_q = q;
                            best_dir = (theta, phi);
                        }
                    }
                }
                center = best_dir;
                half = (2.0 * s_theta, 2.0 * s_phi);
            }
        }
    }
    Ok((best_q, best_val))
}
