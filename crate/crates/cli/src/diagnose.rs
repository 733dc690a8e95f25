//! `diagnostics.csv` has the fixed columns `section,quantity,value`.
//!
//! | section | quantities | needs |
//! |---|---|---|
//! | `curvature` | `alpha1`, `alpha2`, `tau`, `alpha1_positive` | data, covariance |
//! | `deviation` | `gamma`, `gram`, `phi_hat` | data, covariance, truth |
//! | `error_bound` | `l1_bound`, `l2_bound`, `l1_error`, `l2_error` | the above plus a fit |
//! | `convergence` | `iterations`, `first_within`, `decay_slope`, `decay_r2`, `final_distance`, `monotone_from`, `saved_distance` | data, covariance, fit |
//! | `deviation_sweep` | `gamma_n<N>`, `gram_n<N>`, `slope_gamma`, `slope_gram`, `phi_hat` | a sweep config |
//!
//! Convergence distances are squared and measured against a tightly re-solved
//! optimum; `saved_distance` is that of the saved fit. `first_within` is empty
//! when the threshold is never reached. Sections whose inputs are missing are
//! skipped with a notice on stderr.

use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use soir_core::moments::{check_deviation, error_bound, re_diagnostic, sample_deviations, CurvatureEstimate};
use soir_core::solver::{convergence_trace_check, load_fit, FitFile};
use soir_core::{
    build_design, corrected_moments, load_dataset, CorrectedMoments, Error, PenaltyKind, PenaltySpec, ScenarioConfig, SolverConfig,
    TheoryDiagnostics,
};

use crate::error::CliError;
use crate::fit::wavelet_covariance;
use crate::output::{self, Global};
use crate::simulate::read_truth;

pub const DIAGNOSTICS_CSV: &str = "diagnostics.csv";
const REFERENCE_TOL: f64 = 1e-13;
const REFERENCE_MAX_ITER: usize = 50_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviationSweep {
    pub scenario: ScenarioConfig,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
}

impl Default for DeviationSweep {
    fn default() -> Self {
        DeviationSweep {
            scenario: ScenarioConfig::default(),
            n_grid: vec![100, 200, 400, 800],
            replicates: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub data: Option<PathBuf>,
    pub noise_cov: Option<PathBuf>,
    pub assume_noiseless: bool,
    pub truth: Option<PathBuf>,
    /// Fit whose lambda, radius and solver settings are diagnosed.
    pub fit: Option<PathBuf>,
    /// Tolerance term of the curvature condition. Defaults to 0 without
    /// noise and `log p / n` otherwise.
    pub tau: Option<f64>,
    /// Support sizes of the random directions; empty means dense.
    pub sparsity_levels: Vec<usize>,
    pub draws: usize,
    /// Squared-distance threshold reported as `first_within`.
    pub convergence_tol: f64,
    pub deviation_sweep: Option<DeviationSweep>,
    pub seed: u64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            data: None,
            noise_cov: None,
            assume_noiseless: false,
            truth: None,
            fit: None,
            tau: None,
            sparsity_levels: vec![1, 4, 16, 64],
            draws: 200,
            convergence_tol: 1e-6,
            deviation_sweep: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub noise_cov: Option<PathBuf>,
    #[arg(long)]
    pub assume_noiseless: bool,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub draws: Option<usize>,
    /// Run a simulated deviation sweep over these sample sizes.
    #[arg(long, value_delimiter = ',')]
    pub sweep_n: Option<Vec<usize>>,
    #[arg(long)]
    pub sweep_replicates: Option<usize>,
}

struct Table(String);

impl Table {
    fn push(&mut self, section: &str, quantity: &str, value: impl std::fmt::Display) {
        self.0.push_str(&format!("{section},{quantity},{value}\n"));
    }
}

fn resolve(global: &Global, args: DiagnoseArgs) -> Result<DiagnoseConfig, CliError> {
    let mut cfg: DiagnoseConfig = global.load()?;
    cfg.data = output::optional_path(args.data, cfg.data.take())?;
    cfg.noise_cov = output::optional_path(args.noise_cov, cfg.noise_cov.take())?;
    cfg.assume_noiseless |= args.assume_noiseless;
    cfg.truth = output::optional_path(args.truth, cfg.truth.take())?;
    cfg.fit = output::optional_path(args.fit, cfg.fit.take())?;
    cfg.tau = args.tau.or(cfg.tau);
    cfg.draws = args.draws.unwrap_or(cfg.draws);
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if args.sweep_n.is_some() || args.sweep_replicates.is_some() {
        let sweep = cfg.deviation_sweep.get_or_insert_with(DeviationSweep::default);
        if let Some(n) = args.sweep_n {
            sweep.n_grid = n;
        }
        if let Some(r) = args.sweep_replicates {
            sweep.replicates = r;
        }
    }
    if let Some(sweep) = &mut cfg.deviation_sweep {
        sweep.scenario.seed = cfg.seed;
        sweep.scenario.validate()?;
    }
    if let Some(t) = cfg.tau {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(CliError::usage(format!("tau = {t} must be finite and >= 0")));
        }
    }
    if cfg.draws == 0 {
        return Err(CliError::usage("draws must be >= 1"));
    }
    Ok(cfg)
}

pub fn run(global: &Global, args: DiagnoseArgs) -> Result<(), CliError> {
    let cfg = resolve(global, args)?;
    let mut table = Table(String::from("section,quantity,value\n"));

    let fit = cfg.fit.as_deref().map(load_fit).transpose()?;
    let problem = match &cfg.data {
        None => {
            output::notice("no --data; skipping curvature, deviation, error_bound and convergence");
            None
        }
        Some(dir) => {
            let design = build_design(&load_dataset(dir)?)?;
            let sigma = wavelet_covariance(&design, cfg.noise_cov.as_deref(), cfg.assume_noiseless)?;
            let mom = corrected_moments(&design, &sigma)?;
            let n = (0..design.num_tasks()).map(|m| design.n(m)).min().unwrap_or(1);
            Some((design, sigma.is_zero(), mom, n))
        }
    };

    let mut sweep_phi = None;
    if let Some(sweep) = &cfg.deviation_sweep {
        let report = check_deviation(&sweep.n_grid, &sweep.scenario, sweep.replicates)?;
        for r in &report.rows {
            table.push("deviation_sweep", &format!("gamma_n{}", r.n), r.deviation_gamma);
            table.push("deviation_sweep", &format!("gram_n{}", r.n), r.deviation_gram);
        }
        table.push("deviation_sweep", "slope_gamma", report.slope_gamma);
        table.push("deviation_sweep", "slope_gram", report.slope_gram);
        table.push("deviation_sweep", "phi_hat", report.phi_hat);
        sweep_phi = Some(report.phi_hat);
    }

    if let Some((design, noiseless, mom, n)) = &problem {
        let p = design.p();
        let tau = if *noiseless { 0.0 } else { cfg.tau.unwrap_or((p as f64).ln() / *n as f64) };
        let curv = re_diagnostic(mom, tau, &cfg.sparsity_levels, cfg.draws, cfg.seed)?;
        table.push("curvature", "alpha1", curv.alpha1);
        table.push("curvature", "alpha2", curv.alpha2);
        table.push("curvature", "tau", curv.tau);
        table.push("curvature", "alpha1_positive", u8::from(curv.alpha1_positive));

        let truth = match &cfg.truth {
            Some(dir) => Some(read_truth(dir, &design.task_ids, &design.spec)?),
            None => {
                output::notice("no --truth; skipping deviation and error_bound");
                None
            }
        };
        let mut phi_hat = sweep_phi;
        if let Some(t) = &truth {
            let (dg, dgram) = sample_deviations(mom, &t.eta0);
            let rate = ((p as f64).ln() / *n as f64).sqrt();
            let phi = dg.max(dgram) / rate;
            table.push("deviation", "gamma", dg);
            table.push("deviation", "gram", dgram);
            table.push("deviation", "phi_hat", phi);
            phi_hat.get_or_insert(phi);
        }
        match (&truth, &fit) {
            (Some(t), Some(f)) => bound_section(&mut table, curv, &t.eta0, f, phi_hat.unwrap_or(0.0), *n, p),
            (Some(_), None) => output::notice("no --fit; skipping error_bound"),
            _ => {}
        }
        match &fit {
            Some(f) => convergence_section(&mut table, mom, f, cfg.convergence_tol)?,
            None => output::notice("no --fit; skipping convergence"),
        }
    }
    if problem.is_none() && cfg.deviation_sweep.is_none() {
        output::notice("nothing to diagnose; pass --data or --sweep-n");
    }

    let out = global.out_dir()?;
    let outputs = vec![output::write_text(out, DIAGNOSTICS_CSV, &table.0)?];
    global.manifest("diagnose", &cfg, cfg.seed, outputs)
}

fn bound_section(
    table: &mut Table,
    curv: CurvatureEstimate,
    eta0: &soir_core::CoefficientSet,
    fit: &FitFile,
    phi_hat: f64,
    n: usize,
    p: usize,
) {
    let r = &fit.result;
    if eta0.0.dim() != r.eta_hat.0.dim() {
        output::notice("truth and fit have different shapes; skipping error_bound");
        return;
    }
    let q = r.kind.q().unwrap_or(1.0);
    let diag = TheoryDiagnostics::new(curv, eta0, r.radius, q, phi_hat);
    match error_bound(&diag, r.lambda, n, p, r.kind) {
        Ok((l1, l2)) => {
            table.push("error_bound", "l1_bound", l1);
            table.push("error_bound", "l2_bound", l2);
        }
        Err(Error::DegenerateCurvature(a)) => {
            output::notice(&format!("alpha1 = {a} is not positive; bounds are vacuous"));
        }
        Err(e) => output::notice(&format!("error bound not applicable: {e}")),
    }
    let diff = &r.eta_hat.0 - &eta0.0;
    let l1 = match r.kind {
        PenaltyKind::GroupBridge | PenaltyKind::LassoL1 => diff.iter().map(|v| v.abs()).sum::<f64>(),
        PenaltyKind::GroupLassoQ2 => diff
            .columns()
            .into_iter()
            .map(|c| c.dot(&c).sqrt())
            .sum::<f64>(),
    };
    table.push("error_bound", "l1_error", l1);
    table.push("error_bound", "l2_error", diff.mapv(|v| v * v).sum().sqrt());
}

/// Re-runs the saved fit with iterates recorded and measures their distance
/// to a tightly converged optimum of the same problem.
fn convergence_section(table: &mut Table, mom: &CorrectedMoments, fit: &FitFile, tol: f64) -> Result<(), CliError> {
    let r = &fit.result;
    if r.eta_hat.0.dim() != (mom.num_tasks(), mom.p) {
        output::notice("fit does not match the data shape; skipping convergence");
        return Ok(());
    }
    let pen = PenaltySpec::new(r.kind, r.lambda, r.radius)?;
    let reference = soir_core::fit(
        mom,
        &pen,
        &SolverConfig {
            tol_rel_obj: REFERENCE_TOL,
            max_iter: fit.config.max_iter.max(REFERENCE_MAX_ITER),
            record_iterates: false,
            ..fit.config.clone()
        },
    )?;
    let traced = soir_core::fit(
        mom,
        &pen,
        &SolverConfig {
            record_iterates: true,
            ..fit.config.clone()
        },
    )?;
    let report = convergence_trace_check(&traced, &reference.eta_hat, tol)?;
    table.push("convergence", "iterations", traced.iterations);
    table.push(
        "convergence",
        "first_within",
        report.first_within.map_or(String::new(), |t| t.to_string()),
    );
    table.push("convergence", "decay_slope", report.decay_slope);
    table.push("convergence", "decay_r2", report.decay_r2);
    table.push("convergence", "final_distance", report.final_distance);
    table.push("convergence", "monotone_from", report.monotone_from);
    let saved = r.eta_hat.frobenius_distance(&reference.eta_hat);
    table.push("convergence", "saved_distance", saved * saved);
    Ok(())
}
