//! Corrected moment surrogates `(Gamma_m, gamma_m)`, the corrected quadratic
//! loss, and empirical diagnostics for the curvature and deviation conditions.
//!
//! `Gamma_m = W_m^T W_m / n_m - B^T Sigma_u B` may be indefinite. It is held
//! either densely or implicitly (two products with `W_m` plus the covariance
//! operator), whichever is cheaper per application.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{CoefficientSet, DesignMatrices};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::noise_cov::CovOperator;
use crate::penalty::PenaltyKind;
use crate::rng::stream_rng;

/// Largest `p` for which a dense `Gamma` is ever materialized.
pub const DENSE_GRAM_MAX_P: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GramPolicy {
    #[default]
    Auto,
    Dense,
    Implicit,
}

#[derive(Debug, Clone)]
pub enum GramOperator {
    Dense(Array2<f64>),
    Implicit {
        w: Array2<f64>,
        n: usize,
        cov: Arc<CovOperator>,
    },
}

impl GramOperator {
    pub fn dim(&self) -> usize {
        match self {
            GramOperator::Dense(g) => g.nrows(),
            GramOperator::Implicit { w, .. } => w.ncols(),
        }
    }

    /// `Gamma v`.
    pub fn apply(&self, v: ArrayView1<f64>) -> Array1<f64> {
        match self {
            GramOperator::Dense(g) => linalg::mat_vec(g.view(), v),
            GramOperator::Implicit { w, n, cov } => {
                let support: Vec<usize> = v
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| **x != 0.0)
                    .map(|(j, _)| j)
                    .collect();
                let wv = if support.len() * 2 < v.len() {
                    linalg::mat_vec_sparse(w.view(), v, &support)
                } else {
                    linalg::mat_vec(w.view(), v)
                };
                let mut out = linalg::mat_t_vec(w.view(), wv.view());
                out /= *n as f64;
                if !cov.is_zero() {
                    out -= &cov.apply(v);
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            GramOperator::Dense(g) => g.clone(),
            GramOperator::Implicit { w, n, cov } => w.t().dot(w) / *n as f64 - cov.to_dense(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskMoments {
    pub gram: GramOperator,
    pub gamma: Array1<f64>,
    pub n: usize,
}

/// Per-task corrected surrogates; immutable after construction.
#[derive(Debug, Clone)]
pub struct CorrectedMoments {
    pub tasks: Vec<TaskMoments>,
    pub p: usize,
}

impl CorrectedMoments {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Builds moments directly from explicit operators (useful for tests and
    /// synthetic problems).
    pub fn from_dense(grams: Vec<Array2<f64>>, gammas: Vec<Array1<f64>>, n: usize) -> Result<Self> {
        if grams.len() != gammas.len() || grams.is_empty() {
            return invalid("need one gamma per Gamma");
        }
        let p = gammas[0].len();
        for (g, v) in grams.iter().zip(&gammas) {
            if g.dim() != (p, p) || v.len() != p {
                return invalid("moment shapes disagree");
            }
        }
        Ok(CorrectedMoments {
            tasks: grams
                .into_iter()
                .zip(gammas)
                .map(|(g, v)| TaskMoments {
                    gram: GramOperator::Dense(g),
                    gamma: v,
                    n,
                })
                .collect(),
            p,
        })
    }

    fn check_shape(&self, eta: &CoefficientSet) -> Result<()> {
        if eta.num_tasks() != self.num_tasks() || eta.num_groups() != self.p {
            return invalid(format!(
                "coefficients are {:?}, moments expect ({}, {})",
                eta.0.dim(),
                self.num_tasks(),
                self.p
            ));
        }
        Ok(())
    }

    /// Row `m` is `Gamma_m eta_m`.
    pub fn gram_apply(&self, eta: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(eta.dim());
        for (m, t) in self.tasks.iter().enumerate() {
            out.row_mut(m).assign(&t.gram.apply(eta.row(m)));
        }
        out
    }

    /// Loss from a precomputed `Gamma eta`.
    pub(crate) fn loss_from_product(&self, eta: &Array2<f64>, gram_eta: &Array2<f64>) -> f64 {
        self.tasks
            .iter()
            .enumerate()
            .map(|(m, t)| {
                let e = eta.row(m);
                0.5 * e.dot(&gram_eta.row(m)) - t.gamma.dot(&e)
            })
            .sum()
    }

    pub(crate) fn gradient_from_product(&self, gram_eta: &Array2<f64>) -> Array2<f64> {
        let mut g = gram_eta.clone();
        for (m, t) in self.tasks.iter().enumerate() {
            let mut row = g.row_mut(m);
            row -= &t.gamma;
        }
        g
    }

    /// Restriction to a single task (index `m`).
    pub fn task_subset(&self, m: usize) -> CorrectedMoments {
        CorrectedMoments {
            tasks: vec![self.tasks[m].clone()],
            p: self.p,
        }
    }
}

/// `Gamma_m = W_m^T W_m / n_m - sigma_wav`, `gamma_m = W_m^T y_m / n_m`.
pub fn corrected_moments(design: &DesignMatrices, sigma_wav: &CovOperator) -> Result<CorrectedMoments> {
    corrected_moments_with(design, sigma_wav, GramPolicy::Auto)
}

pub fn corrected_moments_with(
    design: &DesignMatrices,
    sigma_wav: &CovOperator,
    policy: GramPolicy,
) -> Result<CorrectedMoments> {
    let p = design.p();
    if sigma_wav.dim() != p {
        return invalid(format!(
            "covariance dimension {} does not match p = {p}",
            sigma_wav.dim()
        ));
    }
    let cov = Arc::new(sigma_wav.clone());
    let cov_cost = match sigma_wav {
        CovOperator::Zero { .. } | CovOperator::ScaledIdentity { .. } => p,
        CovOperator::Dense(_) => p * p,
        CovOperator::Factored { factor, .. } => 2 * factor.nrows() * p,
    };
    let mut tasks = Vec::with_capacity(design.num_tasks());
    for m in 0..design.num_tasks() {
        let w = &design.w[m];
        let n = w.nrows();
        if w.ncols() != p || design.y_centered[m].len() != n {
            return invalid(format!("task index {m}: design shape mismatch"));
        }
        let gamma = linalg::mat_t_vec(w.view(), design.y_centered[m].view()) / n as f64;
        let dense = match policy {
            GramPolicy::Dense => true,
            GramPolicy::Implicit => false,
            GramPolicy::Auto => p <= DENSE_GRAM_MAX_P && p * p <= 2 * n * p + cov_cost,
        };
        let gram = if dense {
            let mut g = w.t().dot(w) / n as f64;
            match sigma_wav {
                CovOperator::Zero { .. } => {}
                CovOperator::ScaledIdentity { scale, .. } => {
                    g.diag_mut().mapv_inplace(|v| v - scale);
                }
                other => g -= &other.to_dense(),
            }
            GramOperator::Dense(g)
        } else {
            GramOperator::Implicit {
                w: w.clone(),
                n,
                cov: Arc::clone(&cov),
            }
        };
        tasks.push(TaskMoments { gram, gamma, n });
    }
    Ok(CorrectedMoments { tasks, p })
}

/// `sum_m { 1/2 eta_m^T Gamma_m eta_m - <gamma_m, eta_m> }`.
pub fn loss_value(eta: &CoefficientSet, mom: &CorrectedMoments) -> Result<f64> {
    mom.check_shape(eta)?;
    let ge = mom.gram_apply(&eta.0);
    Ok(mom.loss_from_product(&eta.0, &ge))
}

/// Row `m` is `Gamma_m eta_m - gamma_m`.
pub fn loss_gradient(eta: &CoefficientSet, mom: &CorrectedMoments) -> Result<Array2<f64>> {
    mom.check_shape(eta)?;
    let ge = mom.gram_apply(&eta.0);
    Ok(mom.gradient_from_product(&ge))
}

/// Power-iteration estimate of the largest eigenvalue magnitude over tasks,
/// used as the default curvature (inverse step) of the solvers.
pub fn estimate_curvature(mom: &CorrectedMoments, iterations: usize, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 0xC0_FFEE);
    let mut best: f64 = 0.0;
    for t in &mom.tasks {
        let mut v: Array1<f64> = Array1::from_shape_fn(mom.p, |_| rng.sample(StandardNormal));
        let mut lambda: f64 = 0.0;
        for _ in 0..iterations {
            let nv = linalg::norm2(v.as_slice().unwrap());
            if nv == 0.0 {
                break;
            }
            v /= nv;
            let gv = t.gram.apply(v.view());
            lambda = gv.dot(&v).abs().max(linalg::norm2(gv.as_slice().unwrap()));
            v = gv;
        }
        best = best.max(lambda);
    }
    if best.is_finite() && best > 0.0 {
        best
    } else {
        1.0
    }
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Empirical restricted-eigenvalue constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureEstimate {
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau: f64,
    pub alpha1_positive: bool,
}

/// Draws random unit vectors with the given support sizes and reports
/// `alpha1 = min theta^T Gamma theta + tau ||theta||_1^2` and
/// `alpha2 = max theta^T Gamma theta - tau ||theta||_1^2` over tasks and
/// draws. `alpha2` is reported as at least `alpha1`: any larger upper
/// constant still satisfies the upper condition.
pub fn re_diagnostic(
    mom: &CorrectedMoments,
    tau: f64,
    sparsity_levels: &[usize],
    draws: usize,
    seed: u64,
) -> Result<CurvatureEstimate> {
    if draws == 0 {
        return invalid("re_diagnostic needs at least one draw");
    }
    if !(tau >= 0.0) {
        return invalid("tau must be >= 0");
    }
    let p = mom.p;
    let levels: Vec<usize> = if sparsity_levels.is_empty() {
        vec![p]
    } else {
        sparsity_levels.iter().map(|&s| s.clamp(1, p)).collect()
    };
    let mut rng = stream_rng(seed, 0x5EED);
    let mut alpha1 = f64::INFINITY;
    let mut alpha2 = f64::NEG_INFINITY;
    let mut idx: Vec<usize> = (0..p).collect();
    for t in &mom.tasks {
        for &s in &levels {
            for _ in 0..draws {
                let mut theta = Array1::<f64>::zeros(p);
                // partial Fisher-Yates for a random support of size s
                for k in 0..s {
                    let r = rng.gen_range(k..p);
                    idx.swap(k, r);
                    theta[idx[k]] = rng.sample(StandardNormal);
                }
                let nrm = linalg::norm2(theta.as_slice().unwrap());
                if nrm == 0.0 {
                    continue;
                }
                theta /= nrm;
                let quad = t.gram.apply(theta.view()).dot(&theta);
                let l1 = linalg::norm1(theta.as_slice().unwrap());
                alpha1 = alpha1.min(quad + tau * l1 * l1);
                alpha2 = alpha2.max(quad - tau * l1 * l1);
            }
        }
    }
    let alpha2 = alpha2.max(alpha1);
    Ok(CurvatureEstimate {
        alpha1,
        alpha2,
        tau,
        alpha1_positive: alpha1 > 0.0,
    })
}

/// Constants entering the statistical error bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryDiagnostics {
    pub alpha1: f64,
    pub alpha2: f64,
    pub tau: f64,
    /// Group sparsity of the reference coefficients.
    pub k: usize,
    /// `min_{j in S} ||eta0_(j)||_1^{1/2}`.
    pub l: f64,
    pub h1: f64,
    pub h2: f64,
    pub phi_hat: f64,
    pub num_tasks: usize,
    pub q: f64,
    pub radius: f64,
}

impl TheoryDiagnostics {
    pub fn new(curv: CurvatureEstimate, eta0: &CoefficientSet, radius: f64, q: f64, phi_hat: f64) -> Self {
        let s = crate::penalty::group_l1_norms(eta0);
        let support: Vec<f64> = s.into_iter().filter(|v| *v != 0.0).collect();
        let k = support.len();
        let l = support
            .iter()
            .map(|v| v.sqrt())
            .fold(f64::INFINITY, f64::min);
        let l = if k == 0 { 0.0 } else { l };
        let m = eta0.num_tasks();
        let h1 = if l > 0.0 { 1.0 + 3.0 * radius / l } else { f64::INFINITY };
        let h2 = 1.0 + 3.0 * (m as f64).powf((q - 1.0) / q);
        TheoryDiagnostics {
            alpha1: curv.alpha1,
            alpha2: curv.alpha2,
            tau: curv.tau,
            k,
            l,
            h1,
            h2,
            phi_hat,
            num_tasks: m,
            q,
            radius,
        }
    }
}

/// `(L1 bound, L2 bound)` on `||eta_hat - eta0||`. Diagnostic only: the
/// constants are calibrated through `phi_hat`, not guaranteed.
pub fn error_bound(diag: &TheoryDiagnostics, lambda: f64, n: usize, p: usize, kind: PenaltyKind) -> Result<(f64, f64)> {
    if !(diag.alpha1 > 0.0) {
        return Err(Error::DegenerateCurvature(diag.alpha1));
    }
    let rate = diag.phi_hat * ((p as f64).ln() / n as f64).sqrt();
    let mk = (diag.num_tasks * diag.k) as f64;
    match kind {
        PenaltyKind::GroupBridge => {
            let floor = 2.0 * rate * diag.l.max(diag.radius);
            if lambda < floor {
                return invalid(format!("lambda = {lambda} is below the floor {floor}"));
            }
            let scale = rate.max(lambda / diag.l);
            Ok((
                8.0 * diag.h1 * diag.h1 * mk / diag.alpha1 * scale,
                8.0 * diag.h1 * mk.sqrt() / diag.alpha1 * scale,
            ))
        }
        PenaltyKind::GroupLassoQ2 | PenaltyKind::LassoL1 => {
            let q = kind.q().unwrap();
            let m_factor = (diag.num_tasks as f64).powf((q - 1.0) / q);
            let h2 = 1.0 + 3.0 * m_factor;
            let floor = 2.0 * rate * m_factor;
            if lambda < floor {
                return invalid(format!("lambda = {lambda} is below the floor {floor}"));
            }
            let scale = rate.max(lambda);
            Ok((
                8.0 * h2 * h2 * mk / diag.alpha1 * scale,
                8.0 * h2 * mk.sqrt() / diag.alpha1 * scale,
            ))
        }
    }
}

/// One row of a deviation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub n: usize,
    pub deviation_gamma: f64,
    pub deviation_gram: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub rows: Vec<DeviationRow>,
    pub slope_gamma: f64,
    pub slope_gram: f64,
    /// `max_n deviation / sqrt(log p / n)` over both surrogates.
    pub phi_hat: f64,
}

/// Sup-norm deviations of one sample: `||gamma_m - eta0_m||_inf` and
/// `||(Gamma_m - I) eta0_m||_inf`, maximized over tasks. The simulated true
/// coefficients have identity covariance in the wavelet domain.
pub fn sample_deviations(mom: &CorrectedMoments, eta0: &CoefficientSet) -> (f64, f64) {
    let mut dg: f64 = 0.0;
    let mut dgram: f64 = 0.0;
    for (m, t) in mom.tasks.iter().enumerate() {
        let e = eta0.task(m);
        let a = (&t.gamma - &e).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let b = (&t.gram.apply(e) - &e)
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        dg = dg.max(a);
        dgram = dgram.max(b);
    }
    (dg, dgram)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}

/// `(slope, intercept, r_squared)` of an ordinary least-squares line.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        1.0
    };
    (slope, my - slope * mx, r2)
}

/// Monte-Carlo deviation sweep over sample sizes using the simulation
/// generator with known noise covariance. Replicates run in parallel with
/// per-replicate seeds.
pub fn check_deviation(
    n_grid: &[usize],
    cfg: &crate::sim::ScenarioConfig,
    replicates: usize,
) -> Result<DeviationReport> {
    use rayon::prelude::*;

    if n_grid.is_empty() || replicates == 0 {
        return invalid("deviation sweep needs sample sizes and replicates");
    }
    let truth = crate::sim::generate_true_signal(cfg)?;
    let spec = cfg.basis()?;
    let p = spec.p();
    let mut rows = Vec::with_capacity(n_grid.len());
    for (gi, &n) in n_grid.iter().enumerate() {
        let devs: Vec<(f64, f64)> = (0..replicates)
            .into_par_iter()
            .map(|r| -> Result<(f64, f64)> {
                let mut rng = stream_rng(cfg.seed, ((gi as u64) << 32) | r as u64);
                let sample = crate::sim::simulate_sample(cfg, &truth, n, None, &mut rng)?;
                let design = crate::dataset::build_design(&sample.observed)?;
                let sigma = crate::sim::known_wavelet_covariance(cfg, p);
                let mom = corrected_moments(&design, &sigma)?;
                Ok(sample_deviations(&mom, &truth.eta0))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = devs.len() as f64;
        rows.push(DeviationRow {
            n,
            deviation_gamma: devs.iter().map(|d| d.0).sum::<f64>() / k,
            deviation_gram: devs.iter().map(|d| d.1).sum::<f64>() / k,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let g: Vec<f64> = rows.iter().map(|r| r.deviation_gamma).collect();
    let gg: Vec<f64> = rows.iter().map(|r| r.deviation_gram).collect();
    let phi_hat = rows
        .iter()
        .map(|r| {
            let rate = ((p as f64).ln() / r.n as f64).sqrt();
            r.deviation_gamma.max(r.deviation_gram) / rate
        })
        .fold(0.0, f64::max);
    Ok(DeviationReport {
        slope_gamma: if rows.len() > 1 { log_log_slope(&ns, &g) } else { f64::NAN },
        slope_gram: if rows.len() > 1 { log_log_slope(&ns, &gg) } else { f64::NAN },
        rows,
        phi_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::{WaveletBasisSpec, WaveletFamily};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_design(seed: u64, m: usize, n: usize, p0: usize) -> DesignMatrices {
        let spec = WaveletBasisSpec::new(WaveletFamily::Haar, 0, p0).unwrap();
        let p = spec.p();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..m)
            .map(|_| Array2::from_shape_fn((n, p), |_| rng.sample(StandardNormal)))
            .collect();
        let y = (0..m)
            .map(|_| Array1::from_shape_fn(n, |_| rng.sample(StandardNormal)))
            .collect();
        DesignMatrices::from_parts(w, y, (0..m).collect(), spec).unwrap()
    }

    fn random_eta(seed: u64, m: usize, p: usize) -> CoefficientSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CoefficientSet(Array2::from_shape_fn((m, p), |_| rng.sample(StandardNormal)))
    }

    #[test]
    fn zero_covariance_gives_psd_gram() {
        let d = random_design(1, 2, 10, 4);
        let mom = corrected_moments(&d, &CovOperator::Zero { dim: 16 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in &mom.tasks {
            for _ in 0..20 {
                let v = Array1::from_shape_fn(16, |_| rng.sample::<f64, _>(StandardNormal));
                assert!(t.gram.apply(v.view()).dot(&v) >= -1e-12);
            }
        }
    }

    #[test]
    fn zero_outcome_gives_zero_gamma() {
        let mut d = random_design(3, 1, 8, 4);
        d.y_centered[0].fill(0.0);
        let mom = corrected_moments(&d, &CovOperator::Zero { dim: 16 }).unwrap();
        assert!(mom.tasks[0].gamma.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dense_and_implicit_agree() {
        let d = random_design(4, 2, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((5, 16), |_| rng.sample::<f64, _>(StandardNormal));
        for cov in [
            CovOperator::Zero { dim: 16 },
            CovOperator::ScaledIdentity { dim: 16, scale: 0.4 },
            CovOperator::Factored { factor: a.clone(), n_tilde: 5 },
            CovOperator::Dense(a.t().dot(&a) / 5.0),
        ] {
            let md = corrected_moments_with(&d, &cov, GramPolicy::Dense).unwrap();
            let mi = corrected_moments_with(&d, &cov, GramPolicy::Implicit).unwrap();
            let eta = random_eta(6, 2, 16);
            let a = md.gram_apply(&eta.0);
            let b = mi.gram_apply(&eta.0);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gram_is_symmetric_operator() {
        let d = random_design(7, 1, 6, 4);
        let cov = CovOperator::ScaledIdentity { dim: 16, scale: 0.7 };
        let mom = corrected_moments_with(&d, &cov, GramPolicy::Implicit).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let u = Array1::from_shape_fn(16, |_| rng.sample::<f64, _>(StandardNormal));
            let v = Array1::from_shape_fn(16, |_| rng.sample::<f64, _>(StandardNormal));
            let a = mom.tasks[0].gram.apply(v.view()).dot(&u);
            let b = mom.tasks[0].gram.apply(u.view()).dot(&v);
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn large_noise_with_few_samples_is_indefinite() {
        // n < p: W^T W / n has a nontrivial null space, so subtracting a
        // positive multiple of the identity creates negative eigenvalues.
        let d = random_design(9, 1, 10, 8);
        let cov = CovOperator::ScaledIdentity { dim: 64, scale: 0.5 };
        let mom = corrected_moments(&d, &cov).unwrap();
        // power iteration on -Gamma + c I to find the smallest eigenvalue
        let g = mom.tasks[0].gram.to_dense();
        let shift = 100.0;
        let mut v = Array1::<f64>::from_elem(64, 1.0);
        let mut mu = 0.0;
        for _ in 0..2000 {
            let nv = v.dot(&v).sqrt();
            v /= nv;
            let gv = g.dot(&v);
            let w = &v * shift - &gv;
            mu = w.dot(&v);
            v = w;
        }
        let smallest = shift - mu;
        assert!(smallest < -0.4, "smallest eigenvalue {smallest}");
    }

    #[test]
    fn loss_value_examples() {
        let mom = CorrectedMoments::from_dense(
            vec![Array2::eye(3), Array2::eye(3)],
            vec![array![1.0, 0.0, 0.0], array![1.0, 0.0, 0.0]],
            1,
        )
        .unwrap();
        assert_eq!(loss_value(&CoefficientSet::zeros(2, 3), &mom).unwrap(), 0.0);
        let eta = CoefficientSet(array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_abs_diff_eq!(loss_value(&eta, &mom).unwrap(), -1.0, epsilon = 1e-15);
        assert!(loss_value(&CoefficientSet::zeros(1, 3), &mom).is_err());
    }

    #[test]
    fn loss_matches_least_squares_expansion() {
        // (1/2n)||y - W eta||^2 - 1/2 eta^T S eta = loss + ||y||^2 / 2n
        let d = random_design(10, 2, 12, 4);
        let cov = CovOperator::ScaledIdentity { dim: 16, scale: 0.3 };
        let mom = corrected_moments(&d, &cov).unwrap();
        let eta = random_eta(11, 2, 16);
        let mut expanded = 0.0;
        for m in 0..2 {
            let n = d.n(m) as f64;
            let r = &d.y_centered[m] - &d.w[m].dot(&eta.task(m));
            expanded += r.dot(&r) / (2.0 * n) - 0.5 * 0.3 * eta.task(m).dot(&eta.task(m));
            expanded -= d.y_centered[m].dot(&d.y_centered[m]) / (2.0 * n);
        }
        assert_abs_diff_eq!(loss_value(&eta, &mom).unwrap(), expanded, epsilon = 1e-10);
    }

    #[test]
    fn gradient_examples_and_separability() {
        let d = random_design(12, 3, 9, 4);
        let mom = corrected_moments(&d, &CovOperator::ScaledIdentity { dim: 16, scale: 0.2 }).unwrap();
        let g0 = loss_gradient(&CoefficientSet::zeros(3, 16), &mom).unwrap();
        for m in 0..3 {
            for j in 0..16 {
                assert_eq!(g0[[m, j]], -mom.tasks[m].gamma[j]);
            }
        }
        let a = random_eta(13, 3, 16);
        let mut b = a.clone();
        b.0.row_mut(2).fill(5.0);
        let ga = loss_gradient(&a, &mom).unwrap();
        let gb = loss_gradient(&b, &mom).unwrap();
        assert_eq!(ga.row(0), gb.row(0));
        assert_eq!(ga.row(1), gb.row(1));
    }

    #[test]
    fn loss_decreases_along_negative_gradient() {
        let d = random_design(14, 2, 20, 4);
        let mom = corrected_moments(&d, &CovOperator::ScaledIdentity { dim: 16, scale: 0.5 }).unwrap();
        let eta = random_eta(15, 2, 16);
        let g = loss_gradient(&eta, &mom).unwrap();
        let f0 = loss_value(&eta, &mom).unwrap();
        let stepped = CoefficientSet(&eta.0 - &(&g * 1e-4));
        assert!(loss_value(&stepped, &mom).unwrap() < f0);
    }

    #[test]
    fn re_diagnostic_examples() {
        let mom = CorrectedMoments::from_dense(vec![Array2::eye(4)], vec![Array1::zeros(4)], 1).unwrap();
        let c = re_diagnostic(&mom, 0.0, &[1, 2, 4], 20, 1).unwrap();
        assert_abs_diff_eq!(c.alpha1, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.alpha2, 1.0, epsilon = 1e-12);

        let mom = CorrectedMoments::from_dense(vec![Array2::from_diag(&array![2.0, 0.5])], vec![Array1::zeros(2)], 1).unwrap();
        let c = re_diagnostic(&mom, 0.0, &[2], 100, 2).unwrap();
        assert!(c.alpha1 >= 0.5 - 1e-12 && c.alpha1 <= 2.0 + 1e-12);
        assert!(c.alpha2 >= 0.5 - 1e-12 && c.alpha2 <= 2.0 + 1e-12);
        assert!(c.alpha1 <= c.alpha2);
        assert!(re_diagnostic(&mom, 0.0, &[1], 0, 0).is_err());
    }

    fn diag_fixture(m: usize, k: usize) -> TheoryDiagnostics {
        let mut eta0 = CoefficientSet::zeros(m, 50);
        for j in 0..k {
            eta0.0[[0, j]] = 4.0;
        }
        let c = CurvatureEstimate {
            alpha1: 0.5,
            alpha2: 2.0,
            tau: 0.0,
            alpha1_positive: true,
        };
        TheoryDiagnostics::new(c, &eta0, 10.0, 2.0, 1.0)
    }

    #[test]
    fn error_bound_structure() {
        let d1 = diag_fixture(2, 3);
        let d2 = diag_fixture(2, 6);
        assert_eq!(d1.k, 3);
        assert_abs_diff_eq!(d1.l, 2.0, epsilon = 1e-15);
        let (l1a, l2a) = error_bound(&d1, 10.0, 100, 50, PenaltyKind::GroupLassoQ2).unwrap();
        let (l1b, l2b) = error_bound(&d2, 10.0, 100, 50, PenaltyKind::GroupLassoQ2).unwrap();
        assert_abs_diff_eq!(l1b / l1a, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l2b / l2a, 2f64.sqrt(), epsilon = 1e-12);
        // floor 2 phi sqrt(log p / n) sqrt(M)
        let floor = 2.0 * (50f64.ln() / 100.0).sqrt() * 2f64.sqrt();
        assert!(error_bound(&d1, floor * 0.99, 100, 50, PenaltyKind::GroupLassoQ2).is_err());
        assert!(error_bound(&d1, floor * 1.01, 100, 50, PenaltyKind::GroupLassoQ2).is_ok());
        let mut bad = d1.clone();
        bad.alpha1 = -1.0;
        assert!(matches!(
            error_bound(&bad, 1.0, 100, 50, PenaltyKind::GroupLassoQ2),
            Err(Error::DegenerateCurvature(_))
        ));
        let (b1, b2) = error_bound(&d1, 100.0, 100, 50, PenaltyKind::GroupBridge).unwrap();
        let h1 = 1.0 + 3.0 * 10.0 / 2.0;
        assert_abs_diff_eq!(b2, 8.0 * h1 * 6f64.sqrt() / 0.5 * 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(b1, 8.0 * h1 * h1 * 6.0 / 0.5 * 50.0, epsilon = 1e-9);
    }

    #[test]
    fn fit_helpers() {
        let (s, _, r2) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert_abs_diff_eq!(s, 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r2, 1.0, epsilon = 1e-15);
        let slope = log_log_slope(&[100.0, 400.0], &[0.2, 0.1]);
        assert_abs_diff_eq!(slope, -0.5, epsilon = 1e-12);
    }
}
