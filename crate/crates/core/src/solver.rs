//! Projected spectral gradient solvers for the corrected criterion, the
//! data-augmentation solver for the group bridge, uncorrected baselines and
//! cross-validation along a warm-started lambda path.
//!
//! Every iteration takes the composite step
//! `z = Proj_ball(prox_{lambda/delta}(eta - grad / delta))` and searches along
//! `d = z - eta` with a non-monotone Armijo rule. Because the loss is
//! quadratic, one product `Gamma d` per iteration gives the loss exactly at
//! every trial step.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{predict_rows, CoefficientSet, DesignMatrices};
use crate::error::{invalid, io_err, Error, Result};
use crate::eval::pmse;
use crate::io::{format_matrix_csv, write_atomic, FORMAT_VERSION};
use crate::moments::{corrected_moments, estimate_curvature, CorrectedMoments};
use crate::noise_cov::CovOperator;
use crate::penalty::{
    group_l1_norms, group_soft_threshold_in_place, project_group_l2_ball_in_place, project_l1_in_place,
    soft_threshold_in_place, PenaltyKind, PenaltySpec,
};
use crate::rng::stream_rng;

/// Number of values in the default lambda grid.
pub const DEFAULT_GRID_LEN: usize = 20;
/// Ratio between the smallest and largest default grid values.
pub const DEFAULT_GRID_RATIO: f64 = 1e-3;
/// Multiplier applied to the uncorrected fit's norm when choosing `R`.
pub const RADIUS_FACTOR: f64 = 1.5;

const POWER_ITERATIONS: usize = 30;
const REFRESH_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Barzilai-Borwein (type 1) curvature with non-monotone line search.
    #[default]
    Spectral,
    /// Constant curvature `delta*`, i.e. plain projected gradient.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub tol_rel_obj: f64,
    /// Length of the objective window used by the line search; 1 is monotone.
    pub memory: usize,
    pub sufficient_decrease: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub step_rule: StepRule,
    /// Initial curvature `delta*`. Defaults to a power-iteration estimate of
    /// the largest eigenvalue of `Gamma`.
    pub initial_curvature: Option<f64>,
    /// Outer alternations of the group bridge solver.
    pub max_outer: usize,
    pub record_iterates: bool,
    pub seed: u64,
    /// Starting point; zero when absent.
    #[serde(skip)]
    pub initial: Option<CoefficientSet>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 5000,
            tol_rel_obj: 1e-6,
            memory: 10,
            sufficient_decrease: 1e-4,
            step_min: 1e-10,
            step_max: 1e10,
            step_rule: StepRule::Spectral,
            initial_curvature: None,
            max_outer: 100,
            record_iterates: false,
            seed: 0,
            initial: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.max_outer == 0 {
            return invalid("max_iter and max_outer must be positive");
        }
        if !(self.tol_rel_obj > 0.0) {
            return invalid("tol_rel_obj must be positive");
        }
        if self.memory == 0 {
            return invalid("line-search memory must be >= 1");
        }
        if !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return invalid("sufficient_decrease must lie in (0, 1)");
        }
        if !(self.step_min > 0.0 && self.step_min <= self.step_max) {
            return invalid("step clamp must satisfy 0 < step_min <= step_max");
        }
        if let Some(c) = self.initial_curvature {
            if !(c > 0.0 && c.is_finite()) {
                return invalid("initial_curvature must be positive");
            }
        }
        Ok(())
    }

    fn with_initial(&self, eta: Option<CoefficientSet>) -> SolverConfig {
        SolverConfig {
            initial: eta,
            ..self.clone()
        }
    }
}

/// Augmentation variables of the group bridge solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeState {
    pub theta: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: PenaltyKind,
    pub lambda: f64,
    #[serde(with = "radius_serde")]
    pub radius: f64,
    pub eta_hat: CoefficientSet,
    /// Objective at `eta_hat`.
    pub objective: f64,
    /// Objective per iteration (outer iterations for the group bridge).
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub active_groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeState>,
    /// Iterates `eta^(0), eta^(1), ...` when requested.
    #[serde(skip)]
    pub iterates: Vec<CoefficientSet>,
}

/// Infinite radii are written as `null`.
mod radius_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

// ---------------------------------------------------------------------------
// Composite spectral projected gradient
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Shrink {
    /// Group soft-threshold, L_{1,2} ball.
    Group,
    /// Entrywise soft-threshold, L1 ball.
    Entry,
}

struct Composite<'a> {
    mom: &'a CorrectedMoments,
    shrink: Shrink,
    lambda: f64,
    weights: Option<&'a [f64]>,
    ball: f64,
}

impl Composite<'_> {
    /// `lambda * sum_j w_j ||eta_(j)||`.
    fn penalty(&self, x: &Array2<f64>) -> f64 {
        let weights_finite = self.weights.is_none_or(|w| w.iter().all(|v| v.is_finite()));
        if self.lambda == 0.0 && weights_finite {
            return 0.0;
        }
        let mut total = 0.0;
        for (j, col) in x.columns().into_iter().enumerate() {
            let norm = match self.shrink {
                Shrink::Group => col.iter().map(|v| v * v).sum::<f64>().sqrt(),
                Shrink::Entry => col.iter().map(|v| v.abs()).sum::<f64>(),
            };
            if norm == 0.0 {
                continue;
            }
            total += self.weights.map_or(1.0, |w| w[j]) * norm;
        }
        self.lambda * total
    }

    fn prox_project(&self, v: &mut Array2<f64>, inv_delta: f64) {
        let t = self.lambda * inv_delta;
        match self.shrink {
            Shrink::Group => {
                group_soft_threshold_in_place(v, t, self.weights);
                project_group_l2_ball_in_place(v, self.ball);
            }
            Shrink::Entry => {
                soft_threshold_in_place(v, t, self.weights);
                project_l1_in_place(v, self.ball);
            }
        }
    }

    fn project(&self, v: &mut Array2<f64>) {
        match self.shrink {
            Shrink::Group => project_group_l2_ball_in_place(v, self.ball),
            Shrink::Entry => project_l1_in_place(v, self.ball),
        }
    }
}

struct CoreOut {
    x: Array2<f64>,
    objective: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    iterates: Vec<CoefficientSet>,
}

fn sum_prod(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn non_finite(trace: Vec<f64>) -> Error {
    Error::NumericalFailure {
        message: "objective became non-finite".into(),
        trace,
    }
}

fn spg_core(prob: &Composite, x0: Array2<f64>, cfg: &SolverConfig, delta0: f64) -> Result<CoreOut> {
    let mom = prob.mom;
    let mut x = x0;
    prob.project(&mut x);
    let mut gx = mom.gram_apply(&x);
    let mut loss = mom.loss_from_product(&x, &gx);
    let mut pen = prob.penalty(&x);
    let mut f = loss + pen;
    let mut trace = vec![f];
    if !f.is_finite() {
        return Err(non_finite(trace));
    }
    let mut window: VecDeque<f64> = VecDeque::from([f]);
    let mut best_f = f;
    let mut best_x = x.clone();
    let mut iterates = Vec::new();
    if cfg.record_iterates {
        iterates.push(CoefficientSet(x.clone()));
    }
    let mut delta = delta0.clamp(cfg.step_min, cfg.step_max);
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=cfg.max_iter {
        iterations = it;
        let grad = mom.gradient_from_product(&gx);
        let inv = 1.0 / delta;
        let mut z = &x - &(&grad * inv);
        prob.prox_project(&mut z, inv);
        let d = &z - &x;
        let dd = sum_prod(&d, &d);
        if dd == 0.0 {
            converged = true;
            break;
        }
        let gd = mom.gram_apply(&d);
        let gtd = sum_prod(&grad, &d);
        let dgd = sum_prod(&d, &gd);
        let pz = prob.penalty(&z);
        let decrease = gtd + pz - pen;
        if !(decrease < 0.0) {
            // no descent left at working precision
            converged = true;
            break;
        }
        let f_ref = window.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut alpha = 1.0;
        let (loss_new, pen_new) = loop {
            let l = loss + alpha * gtd + 0.5 * alpha * alpha * dgd;
            let p = if alpha == 1.0 { pz } else { prob.penalty(&(&x + &(&d * alpha))) };
            if l + p <= f_ref + cfg.sufficient_decrease * alpha * decrease || alpha < 1e-12 {
                break (l, p);
            }
            alpha *= 0.5;
        };
        x.scaled_add(alpha, &d);
        gx.scaled_add(alpha, &gd);
        loss = loss_new;
        pen = pen_new;
        if it % REFRESH_EVERY == 0 {
            gx = mom.gram_apply(&x);
            loss = mom.loss_from_product(&x, &gx);
        }
        let f_prev = f;
        f = loss + pen;
        trace.push(f);
        if !f.is_finite() {
            return Err(non_finite(trace));
        }
        window.push_back(f);
        if window.len() > cfg.memory {
            window.pop_front();
        }
        if f < best_f {
            best_f = f;
            best_x.assign(&x);
        }
        if cfg.record_iterates {
            iterates.push(CoefficientSet(x.clone()));
        }
        if cfg.step_rule == StepRule::Spectral && dgd > 0.0 {
            delta = (dgd / dd).clamp(cfg.step_min, cfg.step_max);
        }
        let rel = (f - f_prev).abs() / f_prev.abs().max(f64::MIN_POSITIVE);
        if alpha == 1.0 && rel < cfg.tol_rel_obj {
            converged = true;
            break;
        }
    }
    Ok(CoreOut {
        x: best_x,
        objective: best_f,
        trace,
        iterations,
        converged,
        iterates,
    })
}

fn initial_point(mom: &CorrectedMoments, cfg: &SolverConfig) -> Result<Array2<f64>> {
    match &cfg.initial {
        Some(e) => {
            if e.num_tasks() != mom.num_tasks() || e.num_groups() != mom.p {
                return invalid(format!(
                    "initial point is {:?}, expected ({}, {})",
                    e.0.dim(),
                    mom.num_tasks(),
                    mom.p
                ));
            }
            if !e.is_finite() {
                return invalid("initial point is not finite");
            }
            Ok(e.0.clone())
        }
        None => Ok(Array2::zeros((mom.num_tasks(), mom.p))),
    }
}

fn curvature(mom: &CorrectedMoments, cfg: &SolverConfig) -> f64 {
    cfg.initial_curvature
        .unwrap_or_else(|| estimate_curvature(mom, POWER_ITERATIONS, cfg.seed))
}

fn check_weights(pen: &PenaltySpec, p: usize) -> Result<()> {
    if let Some(w) = &pen.weights {
        if w.len() != p {
            return invalid(format!("{} penalty weights for {p} groups", w.len()));
        }
    }
    Ok(())
}

fn finish(pen: &PenaltySpec, out: CoreOut, bridge: Option<BridgeState>) -> FitResult {
    let eta_hat = CoefficientSet(out.x);
    FitResult {
        kind: pen.kind,
        lambda: pen.lambda,
        radius: pen.radius,
        active_groups: eta_hat.active_groups(),
        eta_hat,
        objective: out.objective,
        objective_trace: out.trace,
        iterations: out.iterations,
        converged: out.converged,
        bridge,
        iterates: out.iterates,
    }
}

fn solve_convex_type(mom: &CorrectedMoments, pen: &PenaltySpec, cfg: &SolverConfig, shrink: Shrink) -> Result<FitResult> {
    pen.validate()?;
    cfg.validate()?;
    check_weights(pen, mom.p)?;
    let prob = Composite {
        mom,
        shrink,
        lambda: pen.lambda,
        weights: pen.weights.as_deref(),
        ball: pen.radius,
    };
    let x0 = initial_point(mom, cfg)?;
    let out = spg_core(&prob, x0, cfg, curvature(mom, cfg))?;
    Ok(finish(pen, out, None))
}

/// Corrected multi-task fit with the L_{1,2} penalty on the L_{1,2} ball.
pub fn spg_glasso(mom: &CorrectedMoments, pen: &PenaltySpec, cfg: &SolverConfig) -> Result<FitResult> {
    if pen.kind != PenaltyKind::GroupLassoQ2 {
        return invalid("spg_glasso needs a group lasso penalty");
    }
    solve_convex_type(mom, pen, cfg, Shrink::Group)
}

/// Entrywise L1 penalty on the L1 ball. Tasks are coupled only through the
/// ball, so single-task moments give the per-task lasso.
pub fn spg_lasso(mom: &CorrectedMoments, pen: &PenaltySpec, cfg: &SolverConfig) -> Result<FitResult> {
    if pen.kind != PenaltyKind::LassoL1 {
        return invalid("spg_lasso needs a lasso penalty");
    }
    solve_convex_type(mom, pen, cfg, Shrink::Entry)
}

/// `theta_j = sqrt(s_j / tau)`, the minimizer of `s_j / theta + tau theta`.
pub fn bridge_theta(s: &[f64], tau: f64) -> Vec<f64> {
    s.iter()
        .map(|&v| if v == 0.0 || tau == 0.0 { 0.0 } else { (v / tau).sqrt() })
        .collect()
}

/// Group bridge criterion `loss + lambda sum_j ||eta_(j)||_1^{1/2}`.
pub fn bridge_objective(eta: &CoefficientSet, lambda: f64, mom: &CorrectedMoments) -> Result<f64> {
    let loss = crate::moments::loss_value(eta, mom)?;
    Ok(loss + lambda * group_l1_norms(eta).iter().map(|s| s.sqrt()).sum::<f64>())
}

/// Augmented criterion `loss + sum_j (s_j / theta_j + tau theta_j)` with
/// `0 / 0 = 0`.
pub fn bridge_augmented_objective(eta: &CoefficientSet, theta: &[f64], tau: f64, mom: &CorrectedMoments) -> Result<f64> {
    if theta.len() != eta.num_groups() {
        return invalid("one theta per group required");
    }
    let loss = crate::moments::loss_value(eta, mom)?;
    let mut total = loss;
    for (s, &t) in group_l1_norms(eta).iter().zip(theta) {
        if t > 0.0 {
            total += s / t + tau * t;
        } else if *s > 0.0 {
            return Ok(f64::INFINITY);
        }
    }
    Ok(total)
}

/// Group bridge by alternating the closed-form `theta` update with a
/// weighted-L1 fit on the L1 ball of radius `R^2`.
pub fn spg_gbridge(mom: &CorrectedMoments, pen: &PenaltySpec, cfg: &SolverConfig) -> Result<FitResult> {
    if pen.kind != PenaltyKind::GroupBridge {
        return invalid("spg_gbridge needs a group bridge penalty");
    }
    pen.validate()?;
    cfg.validate()?;
    let ball = pen.ball_radius();
    let tau = pen.lambda * pen.lambda / 4.0;
    let delta0 = curvature(mom, cfg);
    let mut x = initial_point(mom, cfg)?;
    project_l1_in_place(&mut x, ball);
    let inner_cfg = SolverConfig {
        record_iterates: false,
        ..cfg.clone()
    };

    if pen.lambda == 0.0 {
        let prob = Composite {
            mom,
            shrink: Shrink::Entry,
            lambda: 0.0,
            weights: None,
            ball,
        };
        let out = spg_core(&prob, x, cfg, delta0)?;
        let theta = vec![0.0; mom.p];
        return Ok(finish(pen, out, Some(BridgeState { theta, tau })));
    }

    let mut iterations = 0;
    if x.iter().all(|v| *v == 0.0) {
        // Every weight would be infinite at the origin; start from a lasso fit.
        let prob = Composite {
            mom,
            shrink: Shrink::Entry,
            lambda: pen.lambda,
            weights: None,
            ball,
        };
        let out = spg_core(&prob, x, &inner_cfg, delta0)?;
        iterations += out.iterations;
        x = out.x;
    }
    let mut iterates = Vec::new();
    if cfg.record_iterates {
        iterates.push(CoefficientSet(x.clone()));
    }
    let mut f = bridge_objective(&CoefficientSet(x.clone()), pen.lambda, mom)?;
    let mut trace = vec![f];
    let mut converged = false;
    if x.iter().all(|v| *v == 0.0) {
        converged = true;
    } else {
        for _ in 0..cfg.max_outer {
            let s = group_l1_norms(&CoefficientSet(x.clone()));
            let weights: Vec<f64> = bridge_theta(&s, tau)
                .into_iter()
                .map(|t| if t > 0.0 { 1.0 / t } else { f64::INFINITY })
                .collect();
            let prob = Composite {
                mom,
                shrink: Shrink::Entry,
                lambda: 1.0,
                weights: Some(&weights),
                ball,
            };
            let out = spg_core(&prob, x.clone(), &inner_cfg, delta0)?;
            iterations += out.iterations;
            x = out.x;
            let f_new = bridge_objective(&CoefficientSet(x.clone()), pen.lambda, mom)?;
            if !f_new.is_finite() {
                trace.push(f_new);
                return Err(non_finite(trace));
            }
            trace.push(f_new);
            if cfg.record_iterates {
                iterates.push(CoefficientSet(x.clone()));
            }
            let rel = (f_new - f).abs() / f.abs().max(f64::MIN_POSITIVE);
            f = f_new;
            if rel < cfg.tol_rel_obj {
                converged = true;
                break;
            }
        }
    }
    let eta_hat = CoefficientSet(x);
    let theta = bridge_theta(&group_l1_norms(&eta_hat), tau);
    Ok(FitResult {
        kind: pen.kind,
        lambda: pen.lambda,
        radius: pen.radius,
        active_groups: eta_hat.active_groups(),
        eta_hat,
        objective: f,
        objective_trace: trace,
        iterations,
        converged,
        bridge: Some(BridgeState { theta, tau }),
        iterates,
    })
}

/// Dispatches on the penalty kind.
pub fn fit(mom: &CorrectedMoments, pen: &PenaltySpec, cfg: &SolverConfig) -> Result<FitResult> {
    match pen.kind {
        PenaltyKind::GroupLassoQ2 => spg_glasso(mom, pen, cfg),
        PenaltyKind::GroupBridge => spg_gbridge(mom, pen, cfg),
        PenaltyKind::LassoL1 => spg_lasso(mom, pen, cfg),
    }
}

/// Baseline fit that ignores measurement error (zero noise covariance).
pub fn fit_uncorrected(design: &DesignMatrices, pen: &PenaltySpec, cfg: &SolverConfig) -> Result<FitResult> {
    let mom = corrected_moments(design, &CovOperator::Zero { dim: design.p() })?;
    fit(&mom, pen, cfg)
}

// ---------------------------------------------------------------------------
// Lambda grid and cross-validation
// ---------------------------------------------------------------------------

/// Smallest lambda at which the zero solution is selected.
pub fn lambda_max(mom: &CorrectedMoments, kind: PenaltyKind) -> f64 {
    let m = mom.num_tasks();
    let column = |j: usize| (0..m).map(move |t| mom.tasks[t].gamma[j]);
    (0..mom.p)
        .map(|j| match kind {
            PenaltyKind::GroupLassoQ2 => column(j).map(|v| v * v).sum::<f64>().sqrt(),
            PenaltyKind::LassoL1 => column(j).map(f64::abs).fold(0.0, f64::max),
            PenaltyKind::GroupBridge => 0.5 * column(j).map(f64::abs).sum::<f64>().powf(1.5),
        })
        .fold(0.0, f64::max)
}

/// `len` log-spaced values from `lambda_max` down to `ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, len: usize, ratio: f64) -> Vec<f64> {
    if len == 1 {
        return vec![lambda_max];
    }
    let (hi, lo) = (lambda_max.ln(), (lambda_max * ratio).ln());
    (0..len)
        .map(|i| (hi + (lo - hi) * i as f64 / (len - 1) as f64).exp())
        .collect()
}

pub fn default_lambda_grid(mom: &CorrectedMoments, kind: PenaltyKind) -> Vec<f64> {
    let lmax = lambda_max(mom, kind);
    if lmax > 0.0 {
        lambda_grid(lmax, DEFAULT_GRID_LEN, DEFAULT_GRID_RATIO)
    } else {
        vec![0.0]
    }
}

/// Seeded fold labels: a random permutation, then `rank % folds`.
pub fn fold_labels(n: usize, folds: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, stream));
    let mut labels = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = rank % folds;
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub lambda: f64,
    /// Mean over folds of the validation PMSE summed over tasks.
    pub score: f64,
    pub fold_scores: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    pub best_lambda: f64,
    pub table: Vec<CvRow>,
    /// Refit on all samples at `best_lambda`.
    pub fit: FitResult,
}

fn population_variance(y: &Array1<f64>) -> f64 {
    let mean = y.sum() / y.len() as f64;
    y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64
}

/// K-fold cross-validation over `grid`, warm-starting from the largest lambda
/// down. `pen.lambda` is ignored; `pen.radius` is used for every fit. Ties go
/// to the larger lambda.
pub fn cross_validate(
    design: &DesignMatrices,
    sigma_wav: &CovOperator,
    pen: &PenaltySpec,
    grid: &[f64],
    folds: usize,
    cfg: &SolverConfig,
) -> Result<CvResult> {
    if grid.is_empty() {
        return invalid("lambda grid is empty");
    }
    if grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return invalid("lambda grid values must be finite and >= 0");
    }
    if folds < 2 {
        return invalid("need at least 2 folds");
    }
    cfg.validate()?;
    for m in 0..design.num_tasks() {
        let n = design.n(m);
        if n / folds < 2 {
            return invalid(format!(
                "task {}: {n} samples leave a fold with fewer than 2 samples at {folds} folds",
                design.task_ids[m]
            ));
        }
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].partial_cmp(&grid[a]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| grid[i]).collect();

    let full = corrected_moments(design, sigma_wav)?;
    let cfg = SolverConfig {
        initial_curvature: Some(curvature(&full, cfg)),
        record_iterates: false,
        ..cfg.clone()
    };
    let labels: Vec<Vec<usize>> = (0..design.num_tasks())
        .map(|m| fold_labels(design.n(m), folds, cfg.seed, m as u64))
        .collect();
    let bridge = pen.kind == PenaltyKind::GroupBridge;

    let fold_scores: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let split = |keep: bool| -> Vec<Vec<usize>> {
                labels
                    .iter()
                    .map(|l| (0..l.len()).filter(|&i| (l[i] == k) != keep).collect())
                    .collect()
            };
            let train_rows = split(true);
            let val_rows = split(false);
            let train = design.subset(&train_rows)?;
            let mom = corrected_moments(&train, sigma_wav)?;
            let w_val: Vec<Array2<f64>> = (0..design.num_tasks())
                .map(|m| design.w[m].select(Axis(0), &val_rows[m]))
                .collect();
            let y_val: Vec<Array1<f64>> = (0..design.num_tasks())
                .map(|m| design.y_raw(m).select(Axis(0), &val_rows[m]))
                .collect();
            let var_train: Vec<f64> = (0..design.num_tasks())
                .map(|m| population_variance(&train.y_raw(m)))
                .collect();
            let mut start = cfg.initial.clone();
            let mut scores = Vec::with_capacity(sorted.len());
            for &lambda in &sorted {
                let p = PenaltySpec {
                    lambda,
                    ..pen.clone()
                };
                let init = if bridge { cfg.initial.clone().or(start.clone()) } else { start.clone() };
                match fit(&mom, &p, &cfg.with_initial(init)) {
                    Ok(res) => {
                        let mut score = 0.0;
                        for m in 0..design.num_tasks() {
                            let pred = predict_rows(w_val[m].view(), res.eta_hat.task(m), train.y_means[m]);
                            score += pmse(pred.view(), y_val[m].view(), var_train[m])?;
                        }
                        scores.push(score);
                        start = Some(res.eta_hat);
                    }
                    Err(Error::NumericalFailure { .. }) => scores.push(f64::INFINITY),
                    Err(e) => return Err(e),
                }
            }
            Ok(scores)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = Vec::with_capacity(sorted.len());
    let mut best = 0;
    for (i, &lambda) in sorted.iter().enumerate() {
        let fs: Vec<f64> = fold_scores.iter().map(|f| f[i]).collect();
        let score = fs.iter().sum::<f64>() / folds as f64;
        if score < table.get(best).map_or(f64::INFINITY, |r: &CvRow| r.score) {
            best = i;
        }
        table.push(CvRow {
            lambda,
            score,
            fold_scores: fs,
        });
    }
    let best_lambda = sorted[best];
    let final_pen = PenaltySpec {
        lambda: best_lambda,
        ..pen.clone()
    };
    let fit = fit(&full, &final_pen, &cfg)?;
    Ok(CvResult {
        best_lambda,
        table,
        fit,
    })
}

/// `R = 1.5 x` the penalty norm of the cross-validated uncorrected fit of the
/// same penalty type. Also returns that fit.
pub fn auto_radius(
    design: &DesignMatrices,
    kind: PenaltyKind,
    folds: usize,
    cfg: &SolverConfig,
) -> Result<(f64, CvResult)> {
    let zero = CovOperator::Zero { dim: design.p() };
    let mom = corrected_moments(design, &zero)?;
    let grid = default_lambda_grid(&mom, kind);
    let pen = PenaltySpec::new(kind, 0.0, f64::INFINITY)?;
    let cv = cross_validate(design, &zero, &pen, &grid, folds, cfg)?;
    let norm = kind.norm(&cv.fit.eta_hat);
    let radius = if norm > 0.0 { RADIUS_FACTOR * norm } else { f64::EPSILON };
    Ok((radius, cv))
}

// ---------------------------------------------------------------------------
// Convergence diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    /// `||eta^(t) - eta_ref||_2^2` per recorded iterate.
    pub distances: Vec<f64>,
    /// First `t` with distance at most `delta2`.
    pub first_within: Option<usize>,
    /// Iterates `0..decay_end` form the first decade of decrease.
    pub decay_end: usize,
    /// Slope of `log distance` against `t` over the first decade.
    pub decay_slope: f64,
    pub decay_r2: f64,
    pub final_distance: f64,
    /// Distances are non-increasing from this iterate on.
    pub monotone_from: usize,
}

/// Compares recorded iterates against a reference optimum.
pub fn convergence_trace_check(result: &FitResult, eta_ref: &CoefficientSet, delta2: f64) -> Result<TraceReport> {
    if result.iterates.is_empty() {
        return invalid("fit was run without record_iterates");
    }
    if eta_ref.0.dim() != result.eta_hat.0.dim() {
        return invalid("reference optimum has the wrong shape");
    }
    let distances: Vec<f64> = result
        .iterates
        .iter()
        .map(|e| {
            let d = e.frobenius_distance(eta_ref);
            d * d
        })
        .collect();
    let first_within = distances.iter().position(|&d| d <= delta2);
    let d0 = distances[0];
    let tenth = distances.iter().position(|&d| d <= d0 / 10.0);
    let decay_end = tenth.map_or(distances.len(), |t| t + 1).max(3).min(distances.len());
    let (ts, logs): (Vec<f64>, Vec<f64>) = distances[..decay_end]
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(t, d)| (t as f64, d.ln()))
        .unzip();
    let (decay_slope, _, decay_r2) = if ts.len() >= 2 {
        crate::moments::linear_fit(&ts, &logs)
    } else {
        (0.0, 0.0, 1.0)
    };
    let mut monotone_from = distances.len() - 1;
    while monotone_from > 0 && distances[monotone_from - 1] >= distances[monotone_from] {
        monotone_from -= 1;
    }
    Ok(TraceReport {
        final_distance: *distances.last().unwrap(),
        distances,
        first_within,
        decay_end,
        decay_slope,
        decay_r2,
        monotone_from,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

pub const FIT_JSON: &str = "fit.json";
pub const FIT_COEFFICIENTS: &str = "coefficients.csv";

/// Per-task training statistics needed to predict and score new samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub task_ids: Vec<usize>,
    pub y_means: Vec<f64>,
    /// Population variance of each task's training outcomes.
    pub y_variances: Vec<f64>,
    pub spec: crate::wavelet::WaveletBasisSpec,
}

impl TrainingSummary {
    pub fn from_design(design: &DesignMatrices) -> Self {
        TrainingSummary {
            task_ids: design.task_ids.clone(),
            y_means: design.y_means.clone(),
            y_variances: (0..design.num_tasks()).map(|m| population_variance(&design.y_raw(m))).collect(),
            spec: design.spec,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFile {
    pub format_version: u32,
    pub config: SolverConfig,
    pub result: FitResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingSummary>,
}

/// Writes `fit.json` (config echo, result and optional training summary) and
/// `coefficients.csv` (one row per task).
pub fn save_fit(result: &FitResult, cfg: &SolverConfig, training: Option<&TrainingSummary>, dir: &Path) -> Result<()> {
    let file = FitFile {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        result: result.clone(),
        training: training.cloned(),
    };
    write_atomic(&dir.join(FIT_JSON), serde_json::to_string_pretty(&file)?.as_bytes())?;
    let eta = &result.eta_hat.0;
    let csv = format_matrix_csv(eta.nrows(), eta.ncols(), |r, c| eta[[r, c]]);
    write_atomic(&dir.join(FIT_COEFFICIENTS), csv.as_bytes())
}

pub fn load_fit(dir: &Path) -> Result<FitFile> {
    let path = dir.join(FIT_JSON);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: FitFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            location: path.display().to_string(),
            message: format!("unsupported format_version {}", file.format_version),
        });
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::{WaveletBasisSpec, WaveletFamily};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn identity_moments(gammas: Vec<Array1<f64>>) -> CorrectedMoments {
        let p = gammas[0].len();
        let grams = gammas.iter().map(|_| Array2::eye(p)).collect();
        CorrectedMoments::from_dense(grams, gammas, 1).unwrap()
    }

    fn tight() -> SolverConfig {
        SolverConfig {
            tol_rel_obj: 1e-14,
            ..Default::default()
        }
    }

    fn random_design(seed: u64, m: usize, n: usize) -> DesignMatrices {
        let spec = WaveletBasisSpec::new(WaveletFamily::Haar, 0, 4).unwrap();
        let mut rng = stream_rng(seed, 0);
        let w: Vec<Array2<f64>> = (0..m)
            .map(|_| Array2::from_shape_fn((n, 16), |_| rng.sample(StandardNormal)))
            .collect();
        let y = w
            .iter()
            .map(|wm| {
                let mut beta = Array1::zeros(16);
                beta[0] = 1.0;
                beta[3] = -0.5;
                wm.dot(&beta) + Array1::from_shape_fn(n, |_| 0.3 * rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        DesignMatrices::from_parts(w, y, (0..m).collect(), spec).unwrap()
    }

    #[test]
    fn unconstrained_identity_recovers_gamma() {
        let g = array![1.0, 0.2, 0.0, 0.0];
        let mom = identity_moments(vec![g.clone(), g.clone()]);
        let pen = PenaltySpec::new(PenaltyKind::GroupLassoQ2, 0.0, f64::INFINITY).unwrap();
        let res = spg_glasso(&mom, &pen, &tight()).unwrap();
        for m in 0..2 {
            for j in 0..4 {
                assert_abs_diff_eq!(res.eta_hat.0[[m, j]], g[j], epsilon = 1e-8);
            }
        }
        assert!(res.converged);
    }

    #[test]
    fn large_lambda_gives_zero() {
        let mom = identity_moments(vec![array![1.0, 0.2, 0.0], array![-0.5, 0.1, 0.3]]);
        let lmax = lambda_max(&mom, PenaltyKind::GroupLassoQ2);
        let pen = PenaltySpec::new(PenaltyKind::GroupLassoQ2, lmax, f64::INFINITY).unwrap();
        let res = spg_glasso(&mom, &pen, &tight()).unwrap();
        assert!(res.eta_hat.0.iter().all(|v| *v == 0.0));
        assert!(res.active_groups.is_empty());
    }

    #[test]
    fn lasso_identity_is_soft_threshold() {
        let g = array![1.5, -0.2, 0.7, -3.0];
        let mom = identity_moments(vec![g.clone()]);
        let res = spg_lasso(&mom, &PenaltySpec::new(PenaltyKind::LassoL1, 0.0, f64::INFINITY).unwrap(), &tight()).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(res.eta_hat.0[[0, j]], g[j], epsilon = 1e-8);
        }
        let res = spg_lasso(&mom, &PenaltySpec::new(PenaltyKind::LassoL1, 0.5, f64::INFINITY).unwrap(), &tight()).unwrap();
        let expect = [1.0, 0.0, 0.2, -2.5];
        for j in 0..4 {
            assert_abs_diff_eq!(res.eta_hat.0[[0, j]], expect[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn returned_iterate_is_feasible() {
        let d = random_design(3, 2, 30);
        let mom = corrected_moments(&d, &CovOperator::ScaledIdentity { dim: 16, scale: 0.5 }).unwrap();
        for (kind, r) in [(PenaltyKind::GroupLassoQ2, 0.3), (PenaltyKind::LassoL1, 0.3), (PenaltyKind::GroupBridge, 0.6)] {
            let pen = PenaltySpec::new(kind, 0.01, r).unwrap();
            let res = fit(&mom, &pen, &SolverConfig::default()).unwrap();
            let norm = match kind {
                PenaltyKind::GroupLassoQ2 => crate::penalty::group_lasso_norm(&res.eta_hat, 2.0),
                _ => res.eta_hat.0.iter().map(|v| v.abs()).sum(),
            };
            assert!(norm <= pen.ball_radius() + 1e-8, "{kind:?}: {norm}");
            assert!(res.objective_trace.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn theta_update_example() {
        assert_eq!(bridge_theta(&[4.0, 0.0], 1.0), vec![2.0, 0.0]);
    }

    #[test]
    fn augmented_objective_matches_bridge_at_optimal_theta() {
        let d = random_design(5, 3, 25);
        let mom = corrected_moments(&d, &CovOperator::ScaledIdentity { dim: 16, scale: 0.2 }).unwrap();
        let mut rng = stream_rng(6, 0);
        let mut eta = CoefficientSet(Array2::from_shape_fn((3, 16), |_| rng.sample(StandardNormal)));
        eta.0.column_mut(4).fill(0.0);
        let lambda = 0.7;
        let tau = lambda * lambda / 4.0;
        let theta = bridge_theta(&group_l1_norms(&eta), tau);
        let a = bridge_augmented_objective(&eta, &theta, tau, &mom).unwrap();
        let b = bridge_objective(&eta, lambda, &mom).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-8);
    }

    #[test]
    fn bridge_outer_trace_is_non_increasing() {
        let d = random_design(7, 2, 40);
        let mom = corrected_moments(&d, &CovOperator::ScaledIdentity { dim: 16, scale: 0.3 }).unwrap();
        let pen = PenaltySpec::new(PenaltyKind::GroupBridge, 0.05, 1.5).unwrap();
        let res = spg_gbridge(&mom, &pen, &SolverConfig::default()).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", res.objective_trace);
        }
        let state = res.bridge.unwrap();
        assert!(state.theta.iter().all(|t| *t >= 0.0));
    }

    #[test]
    fn bridge_without_penalty_matches_l1_ball_fit() {
        let d = random_design(8, 2, 40);
        let mom = corrected_moments(&d, &CovOperator::Zero { dim: 16 }).unwrap();
        let r = 1.0;
        let bridge = spg_gbridge(&mom, &PenaltySpec::new(PenaltyKind::GroupBridge, 0.0, r).unwrap(), &tight()).unwrap();
        let lasso = spg_lasso(&mom, &PenaltySpec::new(PenaltyKind::LassoL1, 0.0, r * r).unwrap(), &tight()).unwrap();
        assert!(bridge.eta_hat.frobenius_distance(&lasso.eta_hat) < 1e-6);
    }

    #[test]
    fn bridge_with_huge_lambda_returns_zero() {
        let d = random_design(9, 2, 40);
        let mom = corrected_moments(&d, &CovOperator::Zero { dim: 16 }).unwrap();
        let pen = PenaltySpec::new(PenaltyKind::GroupBridge, 1e6, 10.0).unwrap();
        let res = spg_gbridge(&mom, &pen, &SolverConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.eta_hat.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uncorrected_equals_corrected_with_zero_covariance() {
        let d = random_design(10, 2, 30);
        let pen = PenaltySpec::new(PenaltyKind::GroupLassoQ2, 0.05, f64::INFINITY).unwrap();
        let a = fit_uncorrected(&d, &pen, &SolverConfig::default()).unwrap();
        let mom = corrected_moments(&d, &CovOperator::Zero { dim: 16 }).unwrap();
        let b = spg_glasso(&mom, &pen, &SolverConfig::default()).unwrap();
        assert_eq!(a.eta_hat, b.eta_hat);
    }

    #[test]
    fn monotone_mode_trace_never_increases() {
        let d = random_design(11, 2, 30);
        let pen = PenaltySpec::new(PenaltyKind::GroupLassoQ2, 0.02, f64::INFINITY).unwrap();
        let cfg = SolverConfig {
            memory: 1,
            ..tight()
        };
        let res = fit_uncorrected(&d, &pen, &cfg).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn indefinite_unconstrained_problem_fails_numerically() {
        let mom = CorrectedMoments::from_dense(vec![-Array2::<f64>::eye(2)], vec![array![1.0, 0.0]], 1).unwrap();
        let pen = PenaltySpec::new(PenaltyKind::GroupLassoQ2, 0.0, f64::INFINITY).unwrap();
        let cfg = SolverConfig {
            initial_curvature: Some(1e-10),
            ..Default::default()
        };
        match spg_glasso(&mom, &pen, &cfg) {
            Err(Error::NumericalFailure { trace, .. }) => assert!(!trace.is_empty()),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn grid_shape() {
        let g = lambda_grid(2.0, 20, 1e-3);
        assert_eq!(g.len(), 20);
        assert_abs_diff_eq!(g[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[19], 2e-3, epsilon = 1e-15);
        assert!(g.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn fold_labels_are_balanced() {
        let l = fold_labels(23, 5, 1, 0);
        for k in 0..5 {
            let c = l.iter().filter(|&&v| v == k).count();
            assert!(c == 4 || c == 5);
        }
        assert_eq!(l, fold_labels(23, 5, 1, 0));
    }

    #[test]
    fn cv_single_value_and_determinism() {
        let d = random_design(12, 2, 30);
        let zero = CovOperator::Zero { dim: 16 };
        let pen = PenaltySpec::new(PenaltyKind::GroupLassoQ2, 0.0, f64::INFINITY).unwrap();
        let cfg = SolverConfig::default();
        let cv = cross_validate(&d, &zero, &pen, &[0.3], 5, &cfg).unwrap();
        assert_eq!(cv.best_lambda, 0.3);
        let mom = corrected_moments(&d, &zero).unwrap();
        let grid = default_lambda_grid(&mom, PenaltyKind::GroupLassoQ2);
        let a = cross_validate(&d, &zero, &pen, &grid, 5, &cfg).unwrap();
        let b = cross_validate(&d, &zero, &pen, &grid, 5, &cfg).unwrap();
        assert_eq!(a.best_lambda, b.best_lambda);
        assert_eq!(a.table, b.table);
        assert!(cross_validate(&d, &zero, &pen, &[], 5, &cfg).is_err());
        assert!(cross_validate(&d, &zero, &pen, &grid, 20, &cfg).is_err());
    }

    #[test]
    fn fit_file_round_trip() {
        let d = random_design(13, 2, 20);
        let pen = PenaltySpec::new(PenaltyKind::GroupLassoQ2, 0.05, f64::INFINITY).unwrap();
        let cfg = SolverConfig::default();
        let res = fit_uncorrected(&d, &pen, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_fit(&res, &cfg, None, dir.path()).unwrap();
        let back = load_fit(dir.path()).unwrap();
        assert_eq!(back.result.eta_hat, res.eta_hat);
        assert!(back.result.radius.is_infinite());
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn restart_from_optimum_stays_put() {
        let d = random_design(14, 2, 30);
        let mom = corrected_moments(&d, &CovOperator::ScaledIdentity { dim: 16, scale: 0.3 }).unwrap();
        let pen = PenaltySpec::new(PenaltyKind::GroupLassoQ2, 0.02, 1.0).unwrap();
        let first = spg_glasso(&mom, &pen, &tight()).unwrap();
        let cfg = SolverConfig {
            initial: Some(first.eta_hat.clone()),
            record_iterates: true,
            ..tight()
        };
        let again = spg_glasso(&mom, &pen, &cfg).unwrap();
        let report = convergence_trace_check(&again, &first.eta_hat, 1e-10).unwrap();
        assert!(report.distances.iter().all(|d| *d < 1e-10), "{:?}", report.distances);
    }
}
