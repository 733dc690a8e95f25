//! Synthetic multi-task scalar-on-image data and the replicate runner.
//!
//! Images are generated in the wavelet domain (`c ~ N(0, I)`) and synthesized
//! with `B`; measurement noise is drawn the same way with variance `1/snr`,
//! so the wavelet-domain noise covariance is exactly `I / snr`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_design, predict_rows, CoefficientSet, DesignMatrices, MultiTaskDataset, TaskData};
use crate::error::{invalid, Error, Result};
use crate::eval::{coefficient_bias, pmse, reconstruct_beta, support_auc, MetricsRow, METRICS_HEADER};
use crate::io::{format_matrix_csv, write_atomic};
use crate::linalg;
use crate::moments::corrected_moments;
use crate::noise_cov::{estimate_replicates, to_wavelet_domain, CovOperator};
use crate::penalty::{PenaltyKind, PenaltySpec};
use crate::rng::stream_rng;
use crate::solver::{cross_validate, lambda_grid, lambda_max, CvResult, SolverConfig, DEFAULT_GRID_RATIO, RADIUS_FACTOR};
use crate::wavelet::{dwt2, idwt2_rows, ImageGrid, WaveletBasisSpec, WaveletFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Round,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlap {
    /// Common center, sizes scaled across tasks.
    Partial,
    Homogeneous,
    /// Disjoint supports along the image diagonal.
    Minimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceScenario {
    /// Solvers receive the exact `I / snr`.
    Known,
    /// Subjects share one true image across tasks; the covariance is estimated
    /// from a held-out control set.
    UnknownLinked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "p_glasso")]
    PGlasso,
    #[serde(rename = "p_gbridge")]
    PGbridge,
    #[serde(rename = "p_lasso")]
    PLasso,
    #[serde(rename = "glasso")]
    Glasso,
    #[serde(rename = "gbridge")]
    Gbridge,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::PGlasso, Method::PGbridge, Method::PLasso, Method::Glasso, Method::Gbridge];

    pub fn name(self) -> &'static str {
        match self {
            Method::PGlasso => "p_glasso",
            Method::PGbridge => "p_gbridge",
            Method::PLasso => "p_lasso",
            Method::Glasso => "glasso",
            Method::Gbridge => "gbridge",
        }
    }

    pub fn penalty(self) -> PenaltyKind {
        match self {
            Method::PGlasso | Method::Glasso => PenaltyKind::GroupLassoQ2,
            Method::PGbridge | Method::Gbridge => PenaltyKind::GroupBridge,
            Method::PLasso => PenaltyKind::LassoL1,
        }
    }

    pub fn corrected(self) -> bool {
        matches!(self, Method::PGlasso | Method::PGbridge | Method::PLasso)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_tasks: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub p0: usize,
    pub wavelet: WaveletFamily,
    pub j0: usize,
    pub shape: Shape,
    pub overlap: Overlap,
    /// Signal-to-noise ratio of the wavelet coefficients; `null` for
    /// noiseless images.
    pub snr: Option<f64>,
    pub covariance_scenario: CovarianceScenario,
    /// `Var(mean) / sigma^2` of the outcome model.
    pub variance_ratio: f64,
    pub signal_height: f64,
    /// Fraction of pixels covered by the reference-size signal.
    pub support_fraction: f64,
    /// Held-out control subjects used by the unknown-covariance scenario.
    pub n_control: usize,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub folds: usize,
    pub grid_len: usize,
    pub solver: SolverConfig,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            num_tasks: 3,
            n_train: 200,
            n_test: 200,
            p0: 64,
            wavelet: WaveletFamily::Sym4,
            j0: WaveletBasisSpec::DEFAULT_J0,
            shape: Shape::Round,
            overlap: Overlap::Partial,
            snr: Some(3.0),
            covariance_scenario: CovarianceScenario::Known,
            variance_ratio: 9.0,
            signal_height: 1.0,
            support_fraction: 0.08,
            n_control: 200,
            methods: vec![Method::PGlasso, Method::Glasso, Method::PLasso],
            replicates: 20,
            folds: 5,
            grid_len: crate::solver::DEFAULT_GRID_LEN,
            solver: SolverConfig::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn basis(&self) -> Result<WaveletBasisSpec> {
        WaveletBasisSpec::new(self.wavelet, self.j0, self.p0)
    }

    pub fn validate(&self) -> Result<()> {
        self.basis()?;
        if self.num_tasks == 0 {
            return invalid("num_tasks must be >= 1");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return invalid("n_train and n_test must be >= 1");
        }
        if let Some(s) = self.snr {
            if !(s > 0.0) {
                return invalid(format!("snr = {s} must be positive (null for noiseless)"));
            }
        }
        if !(self.variance_ratio > 0.0 && self.variance_ratio.is_finite()) {
            return invalid("variance_ratio must be positive");
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return invalid("support_fraction must lie in (0, 1)");
        }
        if !(self.signal_height != 0.0 && self.signal_height.is_finite()) {
            return invalid("signal_height must be finite and nonzero");
        }
        if self.covariance_scenario == CovarianceScenario::UnknownLinked {
            if self.num_tasks < 2 {
                return invalid("the linked scenario needs at least 2 tasks");
            }
            if self.n_control == 0 {
                return invalid("n_control must be >= 1");
            }
        }
        if self.folds < 2 || self.grid_len == 0 {
            return invalid("folds must be >= 2 and grid_len >= 1");
        }
        self.solver.validate()
    }

    /// Noise variance per wavelet coefficient.
    pub fn noise_variance(&self) -> f64 {
        self.snr.map_or(0.0, |s| 1.0 / s)
    }
}

/// True coefficient images, their supports and wavelet coefficients.
#[derive(Debug, Clone)]
pub struct TrueSignal {
    pub betas: Vec<Array2<f64>>,
    pub masks: Vec<Array2<bool>>,
    pub eta0: CoefficientSet,
}

/// Ring radius of minimal-overlap centres, as a fraction of the side.
const MINIMAL_RING: f64 = 0.25;

/// Membership test on offsets `(dy, dx)` from the shape centre.
type InsideTest = Box<dyn Fn(f64, f64) -> bool>;

fn shape_mask(shape: Shape, p0: usize, area: f64, center: (f64, f64)) -> Result<Array2<bool>> {
    let (cy, cx) = center;
    let (half_h, half_w, test): (f64, f64, InsideTest) = match shape {
        Shape::Round => {
            let r = (area / std::f64::consts::PI).sqrt();
            (r, r, Box::new(move |dy, dx| dy * dy + dx * dx <= r * r))
        }
        Shape::Square => {
            let h = area.sqrt() / 2.0;
            (h, h, Box::new(move |dy: f64, dx: f64| dy.abs() <= h && dx.abs() <= h))
        }
        Shape::Triangle => {
            // equilateral, apex up, centroid at the center
            let side = (4.0 * area / 3f64.sqrt()).sqrt();
            let height = side * 3f64.sqrt() / 2.0;
            let apex = -2.0 * height / 3.0;
            (
                2.0 * height / 3.0,
                side / 2.0,
                Box::new(move |dy: f64, dx: f64| {
                    let depth = dy - apex;
                    (0.0..=height).contains(&depth) && dx.abs() <= depth / height * side / 2.0
                }),
            )
        }
    };
    let size = p0 as f64;
    if cy - half_h < 0.0 || cy + half_h > size || cx - half_w < 0.0 || cx + half_w > size {
        return invalid(format!("{shape:?} signal of area {area:.1} does not fit in a {p0}x{p0} grid"));
    }
    let mask = Array2::from_shape_fn((p0, p0), |(r, c)| test(r as f64 + 0.5 - cy, c as f64 + 0.5 - cx));
    if !mask.iter().any(|b| *b) {
        return invalid("signal support is empty");
    }
    Ok(mask)
}

/// Per-task indicator signals of the configured shape and overlap pattern.
pub fn generate_true_signal(cfg: &ScenarioConfig) -> Result<TrueSignal> {
    let spec = cfg.basis()?;
    let p0 = cfg.p0;
    let m = cfg.num_tasks;
    let base_area = cfg.support_fraction * (p0 * p0) as f64;
    let mid = p0 as f64 / 2.0;
    let mut masks = Vec::with_capacity(m);
    for t in 0..m {
        let (scale, center) = match cfg.overlap {
            Overlap::Homogeneous => (1.0, (mid, mid)),
            Overlap::Partial => {
                // largest signal first, shrinking linearly to 0.8 of the base size
                let s = if m == 1 { 1.0 } else { 1.2 - 0.4 * t as f64 / (m - 1) as f64 };
                (s, (mid, mid))
            }
            Overlap::Minimal => {
                // evenly spaced on a ring around the centre
                if m == 1 {
                    (1.0, (mid, mid))
                } else {
                    let angle = std::f64::consts::TAU * t as f64 / m as f64 + std::f64::consts::FRAC_PI_4;
                    let r = MINIMAL_RING * p0 as f64;
                    (1.0, (mid - r * angle.sin(), mid - r * angle.cos()))
                }
            }
        };
        masks.push(shape_mask(cfg.shape, p0, base_area * scale * scale, center)?);
    }
    if cfg.overlap == Overlap::Minimal {
        for a in 0..m {
            for b in a + 1..m {
                if masks[a].iter().zip(masks[b].iter()).any(|(x, y)| *x && *y) {
                    return invalid("minimal-overlap signals intersect; lower support_fraction or num_tasks");
                }
            }
        }
    }
    let betas: Vec<Array2<f64>> = masks
        .iter()
        .map(|mk| mk.mapv(|b| if b { cfg.signal_height } else { 0.0 }))
        .collect();
    let mut eta0 = CoefficientSet::zeros(m, spec.p());
    for (t, b) in betas.iter().enumerate() {
        let c = dwt2(&ImageGrid::new(b.clone())?, &spec)?;
        eta0.0.row_mut(t).assign(&c);
    }
    Ok(TrueSignal { betas, masks, eta0 })
}

fn standard_normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Clean images of `n` subjects per task.
#[derive(Debug, Clone)]
pub struct GeneratedImages {
    /// Wavelet coefficients `c`, one `n x p` matrix per task.
    pub coeffs: Vec<Array2<f64>>,
    /// Pixel images `x = B c`, one `n x p` matrix per task.
    pub images: Vec<Array2<f64>>,
}

pub fn generate_images(cfg: &ScenarioConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<GeneratedImages> {
    let spec = cfg.basis()?;
    let p = spec.p();
    let coeffs: Vec<Array2<f64>> = match cfg.covariance_scenario {
        CovarianceScenario::Known => (0..cfg.num_tasks)
            .map(|_| standard_normal_matrix(n, p, 1.0, rng))
            .collect(),
        CovarianceScenario::UnknownLinked => {
            let shared = standard_normal_matrix(n, p, 1.0, rng);
            vec![shared; cfg.num_tasks]
        }
    };
    let images = coeffs
        .iter()
        .map(|c| idwt2_rows(c.view(), &spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedImages { coeffs, images })
}

/// Adds noise whose wavelet coefficients are `N(0, 1/snr)`; `None` leaves the
/// images unchanged.
pub fn add_noise(images: &Array2<f64>, snr: Option<f64>, spec: &WaveletBasisSpec, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let Some(snr) = snr else {
        return Ok(images.clone());
    };
    if !(snr > 0.0) {
        return invalid(format!("snr = {snr} must be positive"));
    }
    let e = standard_normal_matrix(images.nrows(), images.ncols(), (1.0 / snr).sqrt(), rng);
    Ok(images + &idwt2_rows(e.view(), spec)?)
}

/// `y_i = <x_i, beta> + N(0, sigma^2)`. Without `sigma`, it is set so that
/// `Var(mean) / sigma^2 = ratio`. Returns the outcomes and the `sigma` used.
pub fn generate_outcome(
    images: &Array2<f64>,
    beta: ArrayView1<f64>,
    ratio: f64,
    sigma: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Array1<f64>, f64)> {
    if beta.len() != images.ncols() {
        return invalid(format!("beta has {} pixels, images have {}", beta.len(), images.ncols()));
    }
    let mean = linalg::mat_vec(images.view(), beta);
    let sigma = match sigma {
        Some(s) => s,
        None => {
            let mu = mean.sum() / mean.len() as f64;
            let var = mean.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / mean.len() as f64;
            if !(var > 0.0) {
                return invalid("mean term has zero variance (beta = 0?)");
            }
            (var / ratio).sqrt()
        }
    };
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let y = mean.mapv(|m| m + noise.sample(rng));
    Ok((y, sigma))
}

/// One simulated sample: observed (noisy) dataset plus the clean truth.
#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub observed: MultiTaskDataset,
    pub clean: GeneratedImages,
    pub sigmas: Vec<f64>,
}

pub fn simulate_sample(
    cfg: &ScenarioConfig,
    truth: &TrueSignal,
    n: usize,
    sigmas: Option<&[f64]>,
    rng: &mut ChaCha8Rng,
) -> Result<SimulatedSample> {
    let spec = cfg.basis()?;
    let clean = generate_images(cfg, n, rng)?;
    let mut tasks = Vec::with_capacity(cfg.num_tasks);
    let mut used = Vec::with_capacity(cfg.num_tasks);
    for m in 0..cfg.num_tasks {
        let beta = Array1::from_iter(truth.betas[m].iter().copied());
        let (y, s) = generate_outcome(
            &clean.images[m],
            beta.view(),
            cfg.variance_ratio,
            sigmas.map(|s| s[m]),
            rng,
        )?;
        used.push(s);
        let noisy = add_noise(&clean.images[m], cfg.snr, &spec, rng)?;
        tasks.push(TaskData::new(m, y, noisy)?);
    }
    Ok(SimulatedSample {
        observed: MultiTaskDataset::new(tasks, spec)?,
        clean,
        sigmas: used,
    })
}

/// Wavelet-domain noise covariance handed to the solvers in the known
/// scenario.
pub fn known_wavelet_covariance(cfg: &ScenarioConfig, p: usize) -> CovOperator {
    match cfg.snr {
        Some(s) => CovOperator::ScaledIdentity { dim: p, scale: 1.0 / s },
        None => CovOperator::Zero { dim: p },
    }
}

/// Replicate-based estimate from `n_control` held-out subjects, each imaged
/// once per task.
pub fn estimate_control_covariance(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<CovOperator> {
    let spec = cfg.basis()?;
    let linked = ScenarioConfig {
        covariance_scenario: CovarianceScenario::UnknownLinked,
        ..cfg.clone()
    };
    let clean = generate_images(&linked, cfg.n_control, rng)?;
    let noisy = clean
        .images
        .iter()
        .map(|x| add_noise(x, cfg.snr, &spec, rng))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = noisy.iter().map(|z| z.view()).collect();
    let est = estimate_replicates(&views)?;
    to_wavelet_domain(&est, &spec)
}

/// Fits methods on one training design, caching the uncorrected fits that
/// set the constraint radius of the corrected ones.
pub struct MethodRunner<'a> {
    design: &'a DesignMatrices,
    sigma: &'a CovOperator,
    folds: usize,
    grid_len: usize,
    solver: SolverConfig,
    uncorrected: BTreeMap<PenaltyKind, CvResult>,
}

impl<'a> MethodRunner<'a> {
    pub fn new(design: &'a DesignMatrices, sigma: &'a CovOperator, folds: usize, grid_len: usize, solver: SolverConfig) -> Self {
        MethodRunner {
            design,
            sigma,
            folds,
            grid_len,
            solver,
            uncorrected: BTreeMap::new(),
        }
    }

    fn grid(design: &DesignMatrices, kind: PenaltyKind, len: usize) -> Result<Vec<f64>> {
        let zero = CovOperator::Zero { dim: design.p() };
        let mom = corrected_moments(design, &zero)?;
        let lmax = lambda_max(&mom, kind);
        Ok(if lmax > 0.0 { lambda_grid(lmax, len, DEFAULT_GRID_RATIO) } else { vec![0.0] })
    }

    fn cv(
        &self,
        design: &DesignMatrices,
        sigma: &CovOperator,
        kind: PenaltyKind,
        radius: f64,
        initial: Option<CoefficientSet>,
    ) -> Result<CvResult> {
        let grid = Self::grid(design, kind, self.grid_len)?;
        let pen = PenaltySpec::new(kind, 0.0, radius)?;
        let cfg = SolverConfig {
            initial,
            ..self.solver.clone()
        };
        cross_validate(design, sigma, &pen, &grid, self.folds, &cfg)
    }

    fn uncorrected(&mut self, kind: PenaltyKind) -> Result<&CvResult> {
        if !self.uncorrected.contains_key(&kind) {
            let initial = if kind == PenaltyKind::GroupBridge {
                Some(self.uncorrected(PenaltyKind::GroupLassoQ2)?.fit.eta_hat.clone())
            } else {
                None
            };
            let zero = CovOperator::Zero { dim: self.design.p() };
            let cv = self.cv(self.design, &zero, kind, f64::INFINITY, initial)?;
            self.uncorrected.insert(kind, cv);
        }
        Ok(&self.uncorrected[&kind])
    }

    fn radius(kind: PenaltyKind, eta: &CoefficientSet) -> f64 {
        let norm = kind.norm(eta);
        if norm > 0.0 {
            RADIUS_FACTOR * norm
        } else {
            f64::EPSILON
        }
    }

    /// Coefficient estimate of `method`.
    pub fn fit(&mut self, method: Method) -> Result<CoefficientSet> {
        match method {
            Method::Glasso | Method::Gbridge => Ok(self.uncorrected(method.penalty())?.fit.eta_hat.clone()),
            Method::PGlasso => {
                let base = self.uncorrected(PenaltyKind::GroupLassoQ2)?.fit.eta_hat.clone();
                let r = Self::radius(PenaltyKind::GroupLassoQ2, &base);
                Ok(self.cv(self.design, self.sigma, PenaltyKind::GroupLassoQ2, r, None)?.fit.eta_hat)
            }
            Method::PGbridge => {
                let base = self.uncorrected(PenaltyKind::GroupBridge)?.fit.eta_hat.clone();
                let start = self.uncorrected(PenaltyKind::GroupLassoQ2)?.fit.eta_hat.clone();
                let r = Self::radius(PenaltyKind::GroupBridge, &base);
                Ok(self.cv(self.design, self.sigma, PenaltyKind::GroupBridge, r, Some(start))?.fit.eta_hat)
            }
            Method::PLasso => {
                // one independent corrected lasso per task
                let m_total = self.design.num_tasks();
                let mut out = CoefficientSet::zeros(m_total, self.design.p());
                for m in 0..m_total {
                    let single = DesignMatrices::from_parts(
                        vec![self.design.w[m].clone()],
                        vec![self.design.y_raw(m)],
                        vec![self.design.task_ids[m]],
                        self.design.spec,
                    )?;
                    let zero = CovOperator::Zero { dim: single.p() };
                    let base = self.cv(&single, &zero, PenaltyKind::LassoL1, f64::INFINITY, None)?;
                    let r = Self::radius(PenaltyKind::LassoL1, &base.fit.eta_hat);
                    let cv = self.cv(&single, self.sigma, PenaltyKind::LassoL1, r, None)?;
                    out.0.row_mut(m).assign(&cv.fit.eta_hat.task(0));
                }
                Ok(out)
            }
        }
    }
}

/// Per-task metrics of a coefficient estimate on held-out data.
pub fn evaluate_fit(
    eta: &CoefficientSet,
    train: &DesignMatrices,
    test: &DesignMatrices,
    truth: &TrueSignal,
) -> Result<Vec<(f64, f64, f64)>> {
    let spec = train.spec;
    (0..train.num_tasks())
        .map(|m| {
            let y_train = train.y_raw(m);
            let mu = y_train.sum() / y_train.len() as f64;
            let var = y_train.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / y_train.len() as f64;
            let pred = predict_rows(test.w[m].view(), eta.task(m), train.y_means[m]);
            let e = pmse(pred.view(), test.y_raw(m).view(), var)?;
            let beta_hat = reconstruct_beta(eta.task(m), &spec)?;
            let bias = coefficient_bias(beta_hat.values().view(), truth.betas[m].view())?;
            let auc = support_auc(beta_hat.values().view(), truth.masks[m].view())?;
            Ok((e, bias, auc))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<ReplicateFailure>,
    /// Replicate-averaged coefficient images per `(method, task)`.
    pub mean_betas: BTreeMap<(Method, usize), Array2<f64>>,
}

struct ReplicateOutput {
    rows: Vec<MetricsRow>,
    failures: Vec<ReplicateFailure>,
    betas: Vec<(Method, usize, Array2<f64>)>,
}

fn run_replicate(cfg: &ScenarioConfig, truth: &TrueSignal, r: usize) -> Result<ReplicateOutput> {
    let mut rng = stream_rng(cfg.seed, r as u64);
    let spec = cfg.basis()?;
    let train = simulate_sample(cfg, truth, cfg.n_train, None, &mut rng)?;
    let test = simulate_sample(cfg, truth, cfg.n_test, Some(&train.sigmas), &mut rng)?;
    let sigma = match cfg.covariance_scenario {
        CovarianceScenario::Known => known_wavelet_covariance(cfg, spec.p()),
        CovarianceScenario::UnknownLinked => estimate_control_covariance(cfg, &mut rng)?,
    };
    let train_design = build_design(&train.observed)?;
    let test_design = build_design(&test.observed)?;
    let solver = SolverConfig {
        seed: cfg.seed ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..cfg.solver.clone()
    };
    let mut runner = MethodRunner::new(&train_design, &sigma, cfg.folds, cfg.grid_len, solver);
    let mut out = ReplicateOutput {
        rows: Vec::new(),
        failures: Vec::new(),
        betas: Vec::new(),
    };
    for &method in &cfg.methods {
        let result = runner
            .fit(method)
            .and_then(|eta| evaluate_fit(&eta, &train_design, &test_design, truth).map(|m| (eta, m)));
        match result {
            Ok((eta, metrics)) => {
                for (m, (e, bias, auc)) in metrics.into_iter().enumerate() {
                    out.rows.push(MetricsRow {
                        replicate: r,
                        method: method.name().to_string(),
                        task: m,
                        pmse: e,
                        bias,
                        auc,
                    });
                    out.betas.push((method, m, reconstruct_beta(eta.task(m), &spec)?.into_values()));
                }
            }
            Err(e) => out.failures.push(ReplicateFailure {
                replicate: r,
                method,
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Runs `cfg.replicates` independent replicates (in parallel, each with its
/// own seed stream) and collects per-task metrics. Solver failures are
/// recorded, not fatal.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport> {
    cfg.validate()?;
    if cfg.methods.is_empty() {
        return invalid("no methods configured");
    }
    let truth = generate_true_signal(cfg)?;
    let outputs = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, &truth, r))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut sums: BTreeMap<(Method, usize), (Array2<f64>, usize)> = BTreeMap::new();
    for o in outputs {
        rows.extend(o.rows);
        failures.extend(o.failures);
        for (method, m, b) in o.betas {
            let entry = sums
                .entry((method, m))
                .or_insert_with(|| (Array2::zeros(b.dim()), 0));
            entry.0 += &b;
            entry.1 += 1;
        }
    }
    let mean_betas = sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect();
    Ok(ScenarioReport {
        rows,
        failures,
        mean_betas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub task: usize,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Mean and sample standard deviation of every metric by method and task.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.method.clone(), r.task)).or_default().push(r);
    }
    let mut out = Vec::new();
    for ((method, task), rs) in groups {
        for (name, get) in [
            ("pmse", (|r: &MetricsRow| r.pmse) as fn(&MetricsRow) -> f64),
            ("bias", |r| r.bias),
            ("auc", |r| r.auc),
        ] {
            let v: Vec<f64> = rs.iter().map(|r| get(r)).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            out.push(SummaryRow {
                method: method.clone(),
                task,
                metric: name.to_string(),
                mean,
                sd,
                count: v.len(),
            });
        }
    }
    out
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const FAILURES_CSV: &str = "failures.csv";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

pub fn coefficient_file(method: Method, task: usize) -> String {
    format!("coef_{}_{task}.csv", method.name())
}

/// Writes `metrics.csv`, `summary.csv`, `failures.csv` and the averaged
/// coefficient images `coef_<method>_<task>.csv`.
pub fn write_scenario_outputs(report: &ScenarioReport, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(METRICS_CSV), metrics_csv(&report.rows).as_bytes())?;
    let mut s = String::from("method,task,metric,mean,sd,count\n");
    for r in summarize(&report.rows) {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.method, r.task, r.metric, r.mean, r.sd, r.count));
    }
    write_atomic(&dir.join(SUMMARY_CSV), s.as_bytes())?;
    let mut f = String::from("replicate,method,message\n");
    for x in &report.failures {
        f.push_str(&format!("{},{},\"{}\"\n", x.replicate, x.method, x.message.replace('"', "'")));
    }
    write_atomic(&dir.join(FAILURES_CSV), f.as_bytes())?;
    for ((method, task), img) in &report.mean_betas {
        let csv = format_matrix_csv(img.nrows(), img.ncols(), |r, c| img[[r, c]]);
        write_atomic(&dir.join(coefficient_file(*method, *task)), csv.as_bytes())?;
    }
    Ok(())
}

/// Mean of a metric over all rows of `method` and `task` (`None` for all
/// tasks).
pub fn metric_mean(rows: &[MetricsRow], method: Method, task: Option<usize>, metric: fn(&MetricsRow) -> f64) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method.name() && task.is_none_or(|t| r.task == t))
        .map(metric)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            p0: 16,
            j0: 2,
            n_train: 40,
            n_test: 40,
            ..Default::default()
        }
    }

    fn jaccard(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
        let inter = a.iter().zip(b.iter()).filter(|(x, y)| **x && **y).count() as f64;
        let union = a.iter().zip(b.iter()).filter(|(x, y)| **x || **y).count() as f64;
        inter / union
    }

    #[test]
    fn overlap_patterns() {
        for shape in [Shape::Round, Shape::Square, Shape::Triangle] {
            let cfg = ScenarioConfig {
                shape,
                overlap: Overlap::Homogeneous,
                ..Default::default()
            };
            let t = generate_true_signal(&cfg).unwrap();
            assert_eq!(t.betas[0], t.betas[1]);
            assert_eq!(t.betas[1], t.betas[2]);

            let cfg = ScenarioConfig {
                shape,
                overlap: Overlap::Minimal,
                ..Default::default()
            };
            let t = generate_true_signal(&cfg).unwrap();
            for a in 0..3 {
                for b in a + 1..3 {
                    assert_eq!(jaccard(&t.masks[a], &t.masks[b]), 0.0);
                }
            }

            let cfg = ScenarioConfig {
                shape,
                ..Default::default()
            };
            let t = generate_true_signal(&cfg).unwrap();
            for a in 0..3 {
                for b in a + 1..3 {
                    let j = jaccard(&t.masks[a], &t.masks[b]);
                    assert!(j > 0.0 && j < 1.0, "{shape:?}: {j}");
                }
            }
            // areas scale by 1.2^2, 1 and 0.8^2 around the base fraction
            for (mk, scale) in t.masks.iter().zip([1.2f64, 1.0, 0.8]) {
                let frac = mk.iter().filter(|b| **b).count() as f64 / 4096.0;
                let want = cfg.support_fraction * scale * scale;
                assert!((frac / want - 1.0).abs() < 0.1, "{shape:?}: {frac} vs {want}");
            }
        }
    }

    #[test]
    fn oversized_shape_rejected() {
        let cfg = ScenarioConfig {
            support_fraction: 0.9,
            ..Default::default()
        };
        assert!(generate_true_signal(&cfg).is_err());
    }

    #[test]
    fn eta0_is_transform_of_beta() {
        let cfg = small();
        let t = generate_true_signal(&cfg).unwrap();
        let spec = cfg.basis().unwrap();
        let back = reconstruct_beta(t.eta0.task(1), &spec).unwrap();
        for (a, b) in back.values().iter().zip(t.betas[1].iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn image_coefficients_have_unit_variance() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = generate_images(&cfg, 1000, &mut rng).unwrap();
        for j in [0, 17, 255] {
            let col = g.coeffs[0].column(j);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 1000.0;
            assert!((var - 1.0).abs() < 0.2, "{var}");
        }
        let mean_sq: f64 = g.images[0].outer_iter().map(|r| r.dot(&r)).sum::<f64>() / 1000.0;
        assert!((mean_sq / 256.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn linked_images_are_shared() {
        let cfg = ScenarioConfig {
            covariance_scenario: CovarianceScenario::UnknownLinked,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = generate_images(&cfg, 5, &mut rng).unwrap();
        assert_eq!(g.images[0], g.images[1]);
        assert_eq!(g.images[1], g.images[2]);
    }

    #[test]
    fn noise_ratio_matches_snr() {
        let cfg = small();
        let spec = cfg.basis().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = generate_images(&cfg, 1000, &mut rng).unwrap();
        assert_eq!(add_noise(&g.images[0], None, &spec, &mut rng).unwrap(), g.images[0]);
        let noisy = add_noise(&g.images[0], Some(4.0), &spec, &mut rng).unwrap();
        let e = crate::wavelet::dwt2_rows((&noisy - &g.images[0]).view(), &spec).unwrap();
        let signal: f64 = g.coeffs[0].iter().map(|v| v * v).sum();
        let noise: f64 = e.iter().map(|v| v * v).sum();
        let ratio = signal / noise;
        assert!((ratio / 4.0 - 1.0).abs() < 0.15, "{ratio}");
    }

    #[test]
    fn outcome_model() {
        let cfg = small();
        let t = generate_true_signal(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = generate_images(&cfg, 2000, &mut rng).unwrap();
        let beta = Array1::from_iter(t.betas[0].iter().copied());
        assert!(generate_outcome(&g.images[0], Array1::zeros(256).view(), 9.0, None, &mut rng).is_err());
        let (y, sigma) = generate_outcome(&g.images[0], beta.view(), 9.0, None, &mut rng).unwrap();
        let mean = g.images[0].dot(&beta);
        let resid = &y - &mean;
        let var = |v: &Array1<f64>| {
            let m = v.mean().unwrap();
            v.mapv(|x| (x - m).powi(2)).mean().unwrap()
        };
        let r = var(&mean) / var(&resid);
        assert!((7.5..=10.5).contains(&r), "{r}");
        assert!(sigma > 0.0);
        let doubled = g.images[0].dot(&(&beta * 2.0));
        for (a, b) in doubled.iter().zip(mean.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn methods_parse_and_reject_unknown() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("wnet".parse::<Method>().is_err());
        let bad = r#"{"methods": ["p_glasso", "wnet"]}"#;
        assert!(serde_json::from_str::<ScenarioConfig>(bad).is_err());
        let ok: ScenarioConfig = serde_json::from_str(r#"{"p0": 32, "snr": null}"#).unwrap();
        assert_eq!(ok.p0, 32);
        assert!(ok.snr.is_none());
    }

    #[test]
    fn tiny_scenario_is_deterministic() {
        let cfg = ScenarioConfig {
            replicates: 2,
            grid_len: 4,
            methods: vec![Method::PGlasso, Method::Glasso, Method::PLasso, Method::PGbridge, Method::Gbridge],
            ..small()
        };
        let a = run_scenario(&cfg).unwrap();
        let b = run_scenario(&cfg).unwrap();
        assert!(a.failures.is_empty(), "{:?}", a.failures);
        assert_eq!(a.rows.len(), 2 * 5 * 3);
        assert_eq!(metrics_csv(&a.rows), metrics_csv(&b.rows));
        for r in &a.rows {
            assert!(r.pmse.is_finite() && r.bias >= 0.0 && (0.0..=1.0).contains(&r.auc));
        }
    }

    #[test]
    fn noiseless_corrected_equals_zero_covariance_run() {
        let cfg = ScenarioConfig {
            snr: None,
            replicates: 1,
            grid_len: 3,
            methods: vec![Method::PGlasso],
            ..small()
        };
        let a = run_scenario(&cfg).unwrap();
        assert_eq!(metrics_csv(&a.rows), metrics_csv(&run_scenario(&cfg).unwrap().rows));
        assert_eq!(known_wavelet_covariance(&cfg, 4), CovOperator::Zero { dim: 4 });
    }
}
