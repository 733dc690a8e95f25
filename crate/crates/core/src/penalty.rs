//! Grouped norms, group soft-thresholding and Euclidean projections onto
//! L1 and L_{1,2} balls.
//!
//! A group is one wavelet location `j` across all tasks, i.e. column `j` of a
//! [`CoefficientSet`].

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::CoefficientSet;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `sum_j ||eta_(j)||_2`, constrained to an L_{1,2} ball.
    GroupLassoQ2,
    /// `sum_j ||eta_(j)||_1^{1/2}`, constrained to an L1 ball of radius `R^2`.
    GroupBridge,
    /// Entrywise L1, constrained to an L1 ball.
    LassoL1,
}

impl PenaltyKind {
    /// Exponent `q` of the L_{1,q} family this penalty belongs to (bridge has none).
    pub fn q(self) -> Option<f64> {
        match self {
            PenaltyKind::GroupLassoQ2 => Some(2.0),
            PenaltyKind::LassoL1 => Some(1.0),
            PenaltyKind::GroupBridge => None,
        }
    }

    /// Penalty norm `rho(eta)`.
    pub fn norm(self, eta: &CoefficientSet) -> f64 {
        match self {
            PenaltyKind::GroupLassoQ2 => group_lasso_norm(eta, 2.0),
            PenaltyKind::GroupBridge => group_bridge_norm(eta),
            PenaltyKind::LassoL1 => group_lasso_norm(eta, 1.0),
        }
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glasso" | "group_lasso" | "group_lasso_q2" => Ok(PenaltyKind::GroupLassoQ2),
            "gbridge" | "group_bridge" => Ok(PenaltyKind::GroupBridge),
            "lasso" | "lasso_l1" => Ok(PenaltyKind::LassoL1),
            other => invalid(format!("unknown penalty '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: f64,
    /// Ball radius `R`; `f64::INFINITY` for no constraint. For the group
    /// bridge the feasible set is `||eta||_1 <= R^2`.
    pub radius: f64,
    /// Optional per-group weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, lambda: f64, radius: f64) -> Result<Self> {
        let spec = PenaltySpec {
            kind,
            lambda,
            radius,
            weights: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda = {} must be finite and >= 0", self.lambda));
        }
        if !(self.radius > 0.0) {
            return invalid(format!("radius = {} must be positive or infinite", self.radius));
        }
        if let Some(w) = &self.weights {
            if w.iter().any(|v| !(*v >= 0.0)) {
                return invalid("group weights must be >= 0");
            }
        }
        Ok(())
    }

    /// Radius of the ball actually enforced (`R^2` for the bridge).
    pub fn ball_radius(&self) -> f64 {
        match self.kind {
            PenaltyKind::GroupBridge => self.radius * self.radius,
            _ => self.radius,
        }
    }
}

/// `sum_j (sum_m |eta_mj|^q)^{1/q}`.
pub fn group_lasso_norm(eta: &CoefficientSet, q: f64) -> f64 {
    assert!(q >= 1.0, "q must be >= 1");
    eta.0
        .columns()
        .into_iter()
        .map(|col| {
            if q == 1.0 {
                col.iter().map(|v| v.abs()).sum::<f64>()
            } else if q == 2.0 {
                col.iter().map(|v| v * v).sum::<f64>().sqrt()
            } else {
                col.iter().map(|v| v.abs().powf(q)).sum::<f64>().powf(1.0 / q)
            }
        })
        .sum()
}

/// `sum_j ||eta_(j)||_1^{1/2}`.
pub fn group_bridge_norm(eta: &CoefficientSet) -> f64 {
    group_l1_norms(eta).iter().map(|s| s.sqrt()).sum()
}

pub fn group_l1_norms(eta: &CoefficientSet) -> Vec<f64> {
    eta.0
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum())
        .collect()
}

pub fn group_l2_norms(eta: &CoefficientSet) -> Vec<f64> {
    eta.0
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Threshold `theta >= 0` such that `sum_i max(a_i - theta, 0) = radius`
/// for nonnegative `a`; zero when `sum a <= radius`.
pub fn l1_ball_threshold(abs_values: &[f64], radius: f64) -> f64 {
    let total: f64 = abs_values.iter().sum();
    if total <= radius {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..abs_values.len()).collect();
    // descending by magnitude; stable sort keeps index order among ties
    order.sort_by(|&a, &b| abs_values[b].total_cmp(&abs_values[a]));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &i) in order.iter().enumerate() {
        let u = abs_values[i];
        cumsum += u;
        let candidate = (cumsum - radius) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// Euclidean projection onto `{x : ||x||_1 <= radius}`.
pub fn project_l1(v: &[f64], radius: f64) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return invalid(format!("radius = {radius} must be positive"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid("project_l1: non-finite input");
    }
    let abs: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    let theta = l1_ball_threshold(&abs, radius);
    if theta == 0.0 {
        return Ok(v.to_vec());
    }
    Ok(v.iter()
        .map(|x| x.signum() * (x.abs() - theta).max(0.0))
        .collect())
}

/// Euclidean projection onto `{eta : sum_j ||eta_(j)||_2 <= radius}`.
pub fn project_group_l2_ball(eta: &CoefficientSet, radius: f64) -> Result<CoefficientSet> {
    if !(radius > 0.0) {
        return invalid(format!("radius = {radius} must be positive"));
    }
    if !eta.is_finite() {
        return invalid("project_group_l2_ball: non-finite input");
    }
    let mut out = eta.clone();
    project_group_l2_ball_in_place(&mut out.0, radius);
    Ok(out)
}

pub(crate) fn project_group_l2_ball_in_place(eta: &mut Array2<f64>, radius: f64) {
    if radius.is_infinite() {
        return;
    }
    let norms: Vec<f64> = eta
        .columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let theta = l1_ball_threshold(&norms, radius);
    if theta == 0.0 {
        return;
    }
    for (mut col, g) in eta.columns_mut().into_iter().zip(norms) {
        let scale = if g > 0.0 { (g - theta).max(0.0) / g } else { 0.0 };
        col.mapv_inplace(|v| v * scale);
    }
}

pub(crate) fn project_l1_in_place(eta: &mut Array2<f64>, radius: f64) {
    if radius.is_infinite() {
        return;
    }
    let abs: Vec<f64> = eta.iter().map(|v| v.abs()).collect();
    let theta = l1_ball_threshold(&abs, radius);
    if theta == 0.0 {
        return;
    }
    eta.mapv_inplace(|x| x.signum() * (x.abs() - theta).max(0.0));
}

/// Group soft-threshold: column `j` is scaled by `max(0, 1 - t w_j / ||eta_(j)||_2)`.
pub fn group_soft_threshold(eta: &CoefficientSet, t: f64, weights: Option<&[f64]>) -> Result<CoefficientSet> {
    if !(t >= 0.0) {
        return invalid(format!("threshold {t} must be >= 0"));
    }
    if let Some(w) = weights {
        if w.len() != eta.num_groups() {
            return invalid(format!("{} weights for {} groups", w.len(), eta.num_groups()));
        }
    }
    let mut out = eta.clone();
    group_soft_threshold_in_place(&mut out.0, t, weights);
    Ok(out)
}

pub(crate) fn group_soft_threshold_in_place(eta: &mut Array2<f64>, t: f64, weights: Option<&[f64]>) {
    if t == 0.0 {
        return;
    }
    for (j, mut col) in eta.columns_mut().into_iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[j]);
        let g = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        let level = t * w;
        let scale = if g > level { 1.0 - level / g } else { 0.0 };
        col.mapv_inplace(|v| v * scale);
    }
}

/// Entrywise soft-threshold with per-group weights (infinite weight zeroes the
/// group).
pub(crate) fn soft_threshold_in_place(eta: &mut Array2<f64>, t: f64, weights: Option<&[f64]>) {
    if t == 0.0 && weights.is_none_or(|w| w.iter().all(|v| v.is_finite())) {
        return;
    }
    for (j, mut col) in eta.columns_mut().into_iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[j]);
        if w.is_infinite() {
            col.fill(0.0);
            continue;
        }
        let level = t * w;
        col.mapv_inplace(|x| x.signum() * (x.abs() - level).max(0.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn cs(a: Array2<f64>) -> CoefficientSet {
        CoefficientSet(a)
    }

    #[test]
    fn group_lasso_norm_examples() {
        assert_eq!(group_lasso_norm(&CoefficientSet::zeros(2, 3), 2.0), 0.0);
        let eta = cs(array![[3.0, 0.0], [4.0, 0.0]]);
        assert_abs_diff_eq!(group_lasso_norm(&eta, 2.0), 5.0, epsilon = 1e-15);
        let eta = cs(array![[1.0, -2.0], [-3.0, 0.5]]);
        assert_abs_diff_eq!(group_lasso_norm(&eta, 1.0), 6.5, epsilon = 1e-15);
        let g3 = group_lasso_norm(&eta, 3.0);
        let expect = (1.0f64 + 27.0).powf(1.0 / 3.0) + (8.0f64 + 0.125).powf(1.0 / 3.0);
        assert_abs_diff_eq!(g3, expect, epsilon = 1e-12);
    }

    #[test]
    fn group_bridge_norm_examples() {
        assert_eq!(group_bridge_norm(&CoefficientSet::zeros(2, 2)), 0.0);
        let eta = cs(array![[1.0, 0.0], [0.0, 4.0]]);
        assert_abs_diff_eq!(group_bridge_norm(&eta), 3.0, epsilon = 1e-15);
        let scaled = cs(&eta.0 * 9.0);
        assert_abs_diff_eq!(group_bridge_norm(&scaled), 9.0, epsilon = 1e-12);
    }

    #[test]
    fn project_l1_examples() {
        assert_eq!(project_l1(&[0.2, 0.3], 1.0).unwrap(), vec![0.2, 0.3]);
        assert_eq!(project_l1(&[3.0, 0.0], 1.0).unwrap(), vec![1.0, 0.0]);
        let x = project_l1(&[2.0, 1.0], 1.0).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-15);
        let x = project_l1(&[-2.0, 1.5, 0.1], 2.0).unwrap();
        // threshold 0.75 on the two leading entries
        assert_abs_diff_eq!(x[0], -1.25, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.75, epsilon = 1e-15);
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn project_l1_errors() {
        assert!(project_l1(&[f64::NAN], 1.0).is_err());
        assert!(project_l1(&[1.0], 0.0).is_err());
    }

    #[test]
    fn group_ball_examples() {
        let eta = cs(array![[3.0], [4.0]]);
        let p = project_group_l2_ball(&eta, 1.0).unwrap();
        assert_abs_diff_eq!(p.0[[0, 0]], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p.0[[1, 0]], 0.8, epsilon = 1e-15);

        let inner = cs(array![[0.1, 0.0], [0.2, 0.1]]);
        assert_eq!(project_group_l2_ball(&inner, 1.0).unwrap(), inner);

        // group norms 3 and 4
        let eta = cs(array![[3.0, 0.0], [0.0, 4.0]]);
        let p = project_group_l2_ball(&eta, 1.0).unwrap();
        assert_eq!(p.0[[0, 0]], 0.0);
        assert_abs_diff_eq!(p.0[[1, 1]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn soft_threshold_examples() {
        let eta = cs(array![[3.0, 1.0], [4.0, 1.0]]);
        assert_eq!(group_soft_threshold(&eta, 0.0, None).unwrap(), eta);
        let out = group_soft_threshold(&eta, 2.5, None).unwrap();
        assert_abs_diff_eq!(out.0[[0, 0]], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(out.0[[1, 0]], 2.0, epsilon = 1e-15);
        // second column has norm sqrt(2) < 2.5
        assert_eq!(out.0[[0, 1]], 0.0);
        let col2 = cs(array![[2.0], [0.0]]);
        let z = group_soft_threshold(&col2, 3.0, Some(&[1.0])).unwrap();
        assert_eq!(z.0[[0, 0]], 0.0);
    }

    #[test]
    fn entrywise_soft_threshold_with_infinite_weight() {
        let mut a = array![[3.0, -1.0], [0.5, 2.0]];
        soft_threshold_in_place(&mut a, 1.0, Some(&[1.0, f64::INFINITY]));
        assert_eq!(a, array![[2.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn threshold_ties_are_deterministic() {
        let v = [1.0, 1.0, 1.0];
        let x = project_l1(&v, 1.5).unwrap();
        for xi in x {
            assert_abs_diff_eq!(xi, 0.5, epsilon = 1e-15);
        }
    }
}
