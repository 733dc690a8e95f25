use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use soir_core::dataset::predict_rows;
use soir_core::eval::export_pgm;
use soir_core::moments::corrected_moments;
use soir_core::noise_cov::to_wavelet_domain;
use soir_core::solver::{
    auto_radius, lambda_grid, lambda_max, load_fit, save_fit, FitFile, TrainingSummary, DEFAULT_GRID_LEN,
    DEFAULT_GRID_RATIO, FIT_COEFFICIENTS, FIT_JSON,
};
use soir_core::{
    build_design, coefficient_bias, cross_validate, load_covariance, load_dataset, pmse, reconstruct_beta, support_auc,
    CovOperator, DesignMatrices, Error, PenaltyKind, PenaltySpec, SolverConfig,
};

use crate::error::CliError;
use crate::output::{self, Global};
use crate::simulate::read_truth;

pub const CV_CSV: &str = "cv.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const EVALUATION_CSV: &str = "evaluation.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub data: Option<PathBuf>,
    pub noise_cov: Option<PathBuf>,
    pub assume_noiseless: bool,
    pub penalty: PenaltyKind,
    /// Fixed penalty level; cross-validated when absent.
    pub lambda: Option<f64>,
    /// Constraint radius; chosen automatically when absent.
    pub radius: Option<f64>,
    pub folds: usize,
    pub grid_len: usize,
    pub solver: SolverConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            data: None,
            noise_cov: None,
            assume_noiseless: false,
            penalty: PenaltyKind::GroupLassoQ2,
            lambda: None,
            radius: None,
            folds: 5,
            grid_len: DEFAULT_GRID_LEN,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Image noise covariance directory (from `estimate-noise`).
    #[arg(long)]
    pub noise_cov: Option<PathBuf>,
    /// Fit without noise correction.
    #[arg(long)]
    pub assume_noiseless: bool,
    /// glasso, gbridge or lasso.
    #[arg(long)]
    pub penalty: Option<PenaltyKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub grid_len: Option<usize>,
}

/// Noise covariance in the wavelet domain for `design`, honouring the
/// explicit noiseless opt-out.
pub fn wavelet_covariance(
    design: &DesignMatrices,
    noise_cov: Option<&Path>,
    assume_noiseless: bool,
) -> Result<CovOperator, CliError> {
    match (noise_cov, assume_noiseless) {
        (Some(_), true) => Err(CliError::usage("--noise-cov and --assume-noiseless are mutually exclusive")),
        (None, false) => Err(CliError::usage(
            "no noise covariance given; pass --noise-cov DIR or --assume-noiseless",
        )),
        (None, true) => Ok(CovOperator::Zero { dim: design.p() }),
        (Some(dir), false) => {
            let cov = load_covariance(dir)?;
            if cov.dim() != design.p() {
                return Err(CliError::Core(Error::Format {
                    location: dir.display().to_string(),
                    message: format!("covariance dimension {} does not match {} pixels", cov.dim(), design.p()),
                }));
            }
            let n_min = (0..design.num_tasks()).map(|m| design.n(m)).min().unwrap_or(0);
            if let Some(w) = cov.sample_size_warning(n_min) {
                output::warn(&w);
            }
            Ok(to_wavelet_domain(&cov, &design.spec)?)
        }
    }
}

fn resolve_fit(global: &Global, args: FitArgs) -> Result<FitConfig, CliError> {
    let mut cfg: FitConfig = global.load()?;
    cfg.data = Some(output::required_path(args.data, cfg.data.take(), "data")?);
    cfg.noise_cov = output::optional_path(args.noise_cov, cfg.noise_cov.take())?;
    cfg.assume_noiseless |= args.assume_noiseless;
    if let Some(p) = args.penalty {
        cfg.penalty = p;
    }
    cfg.lambda = args.lambda.or(cfg.lambda);
    cfg.radius = args.radius.or(cfg.radius);
    cfg.folds = args.folds.unwrap_or(cfg.folds);
    cfg.grid_len = args.grid_len.unwrap_or(cfg.grid_len);
    if let Some(s) = global.seed {
        cfg.solver.seed = s;
    }
    if let Some(l) = cfg.lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(CliError::usage(format!("lambda = {l} must be finite and >= 0")));
        }
    }
    if let Some(r) = cfg.radius {
        if !(r > 0.0 && r.is_finite()) {
            return Err(CliError::usage(format!("radius = {r} must be finite and positive")));
        }
    }
    if cfg.folds < 2 || cfg.grid_len == 0 {
        return Err(CliError::usage("folds must be >= 2 and grid_len >= 1"));
    }
    cfg.solver.validate()?;
    Ok(cfg)
}

pub fn run_fit(global: &Global, args: FitArgs, force_cv: bool) -> Result<(), CliError> {
    if force_cv && args.lambda.is_some() {
        return Err(CliError::usage("cv selects lambda itself; use fit --lambda for a fixed value"));
    }
    let mut cfg = resolve_fit(global, args)?;
    if force_cv {
        cfg.lambda = None;
    }
    let data = cfg.data.clone().expect("resolved");
    let design = build_design(&load_dataset(&data)?)?;
    let sigma = wavelet_covariance(&design, cfg.noise_cov.as_deref(), cfg.assume_noiseless)?;
    let kind = cfg.penalty;

    // The bridge starts from the cross-validated uncorrected group lasso.
    let mut solver = cfg.solver.clone();
    if kind == PenaltyKind::GroupBridge {
        let (_, base) = auto_radius(&design, PenaltyKind::GroupLassoQ2, cfg.folds, &solver)?;
        solver.initial = Some(base.fit.eta_hat);
    }
    let radius = match cfg.radius {
        Some(r) => r,
        None if sigma.is_zero() => f64::INFINITY,
        None => auto_radius(&design, kind, cfg.folds, &solver)?.0,
    };

    let out = global.out_dir()?;
    let mut outputs = Vec::new();
    let result = match cfg.lambda {
        Some(l) => {
            let mom = corrected_moments(&design, &sigma)?;
            soir_core::fit(&mom, &PenaltySpec::new(kind, l, radius)?, &solver)?
        }
        None => {
            let zero = CovOperator::Zero { dim: design.p() };
            let lmax = lambda_max(&corrected_moments(&design, &zero)?, kind);
            let grid = if lmax > 0.0 {
                lambda_grid(lmax, cfg.grid_len, DEFAULT_GRID_RATIO)
            } else {
                vec![0.0]
            };
            let pen = PenaltySpec::new(kind, 0.0, radius)?;
            let cv = cross_validate(&design, &sigma, &pen, &grid, cfg.folds, &solver)?;
            let mut csv = String::from("lambda,score");
            for k in 0..cfg.folds {
                csv.push_str(&format!(",fold_{k}"));
            }
            csv.push('\n');
            for row in &cv.table {
                csv.push_str(&format!("{},{}", row.lambda, row.score));
                for s in &row.fold_scores {
                    csv.push_str(&format!(",{s}"));
                }
                csv.push('\n');
            }
            outputs.push(output::write_text(out, CV_CSV, &csv)?);
            cv.fit
        }
    };
    if !result.converged {
        output::warn(&format!("solver stopped after {} iterations without converging", result.iterations));
    }
    save_fit(&result, &solver, Some(&TrainingSummary::from_design(&design)), out)?;
    outputs.push(FIT_JSON.into());
    outputs.push(FIT_COEFFICIENTS.into());
    eprintln!(
        "lambda = {}, radius = {}, active groups = {}, objective = {}",
        result.lambda,
        result.radius,
        result.active_groups.len(),
        result.objective
    );
    let command = if force_cv { "cv" } else { "fit" };
    let seed = cfg.solver.seed;
    global.manifest(command, &cfg, seed, outputs)
}

// ---------------------------------------------------------------------------
// predict / evaluate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub fit: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `fit` or `cv`.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Dataset to predict for (outcome files may hold placeholders).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// The saved fit, its training summary and the design of `data`, with task
/// ids and basis checked against each other.
fn load_fit_and_data(fit_dir: &Path, data: &Path) -> Result<(FitFile, TrainingSummary, DesignMatrices), CliError> {
    let fit = load_fit(fit_dir)?;
    let training = fit.training.clone().ok_or_else(|| {
        CliError::Core(Error::Format {
            location: fit_dir.join(FIT_JSON).display().to_string(),
            message: "fit has no training summary; refit with this tool".into(),
        })
    })?;
    let design = build_design(&load_dataset(data)?)?;
    if design.spec != training.spec {
        return Err(CliError::Core(Error::Format {
            location: data.display().to_string(),
            message: "dataset basis differs from the basis the model was fitted in".into(),
        }));
    }
    for id in &design.task_ids {
        if !training.task_ids.contains(id) {
            return Err(CliError::Core(Error::Format {
                location: data.display().to_string(),
                message: format!("task {id} was not part of the fit"),
            }));
        }
    }
    Ok((fit, training, design))
}

fn task_row(training: &TrainingSummary, id: usize) -> usize {
    training.task_ids.iter().position(|t| *t == id).expect("checked")
}

pub fn run_predict(global: &Global, args: PredictArgs) -> Result<(), CliError> {
    let mut cfg: PredictConfig = global.load()?;
    cfg.fit = Some(output::required_path(args.fit, cfg.fit.take(), "fit")?);
    cfg.data = Some(output::required_path(args.data, cfg.data.take(), "data")?);
    let (fit, training, design) = load_fit_and_data(cfg.fit.as_deref().unwrap(), cfg.data.as_deref().unwrap())?;
    let eta = &fit.result.eta_hat;
    let mut csv = String::from("task,index,prediction\n");
    for (m, &id) in design.task_ids.iter().enumerate() {
        let row = task_row(&training, id);
        let pred = predict_rows(design.w[m].view(), eta.task(row), training.y_means[row]);
        for (i, v) in pred.iter().enumerate() {
            csv.push_str(&format!("{id},{i},{v}\n"));
        }
    }
    let out = global.out_dir()?;
    let outputs = vec![output::write_text(out, PREDICTIONS_CSV, &csv)?];
    let seed = global.seed.unwrap_or(fit.config.seed);
    global.manifest("predict", &cfg, seed, outputs)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub fit: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Directory with `beta_<task>.csv` and `support_<task>.csv`.
    pub truth: Option<PathBuf>,
    /// Also export each fitted coefficient image as a 16-bit PGM.
    pub pgm: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Held-out dataset.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// True coefficients, for bias and support AUC.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub pgm: bool,
}

pub fn run_evaluate(global: &Global, args: EvaluateArgs) -> Result<(), CliError> {
    let mut cfg: EvaluateConfig = global.load()?;
    cfg.fit = Some(output::required_path(args.fit, cfg.fit.take(), "fit")?);
    cfg.data = Some(output::required_path(args.data, cfg.data.take(), "data")?);
    cfg.truth = output::optional_path(args.truth, cfg.truth.take())?;
    cfg.pgm |= args.pgm;
    let (fit, training, design) = load_fit_and_data(cfg.fit.as_deref().unwrap(), cfg.data.as_deref().unwrap())?;
    let truth = cfg
        .truth
        .as_deref()
        .map(|dir| read_truth(dir, &design.task_ids, &design.spec))
        .transpose()?;
    let eta = &fit.result.eta_hat;
    let out = global.out_dir()?;
    let mut outputs = Vec::new();
    let mut csv = String::from("task,n,pmse,bias,auc\n");
    for (m, &id) in design.task_ids.iter().enumerate() {
        let row = task_row(&training, id);
        let pred = predict_rows(design.w[m].view(), eta.task(row), training.y_means[row]);
        let e = pmse(pred.view(), design.y_raw(m).view(), training.y_variances[row])?;
        let beta = reconstruct_beta(eta.task(row), &design.spec)?;
        let (bias, auc) = match &truth {
            Some(t) => (
                coefficient_bias(beta.values().view(), t.betas[m].view())?.to_string(),
                support_auc(beta.values().view(), t.masks[m].view())?.to_string(),
            ),
            None => (String::new(), String::new()),
        };
        csv.push_str(&format!("{id},{},{e},{bias},{auc}\n", design.n(m)));
        if cfg.pgm {
            let name = format!("beta_{id}.pgm");
            export_pgm(beta.values(), &out.join(&name))?;
            outputs.push(name);
            outputs.push(format!("beta_{id}.json"));
        }
    }
    outputs.insert(0, output::write_text(out, EVALUATION_CSV, &csv)?);
    let seed = global.seed.unwrap_or(fit.config.seed);
    global.manifest("evaluate", &cfg, seed, outputs)
}
