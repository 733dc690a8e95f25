use std::path::Path;

use clap::Args;
use soir_core::dataset::save_dataset;
use soir_core::noise_cov::{save_covariance, NoiseCovariance};
use soir_core::rng::stream_rng;
use soir_core::sim::{
    add_noise, generate_images, generate_true_signal, simulate_sample, write_scenario_outputs, CovarianceScenario,
    TrueSignal, FAILURES_CSV, METRICS_CSV, SUMMARY_CSV,
};
use soir_core::{dwt2, CoefficientSet, Error, ImageGrid, Method, MultiTaskDataset, ScenarioConfig, TaskData, WaveletBasisSpec};

use crate::error::CliError;
use crate::output::{self, Global};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Number of Monte-Carlo replicates (overrides the config).
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Comma-separated methods: p_glasso, p_gbridge, p_lasso, glasso, gbridge.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Write one simulated train/test dataset with its truth and noise
    /// covariance instead of running the replicate study.
    #[arg(long)]
    pub dataset: bool,
}

pub fn run(global: &Global, args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg: ScenarioConfig = global.load()?;
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(ms) = args.methods {
        cfg.methods = ms.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?;
    }
    cfg.validate()?;
    let out = global.out_dir()?;
    if args.dataset {
        let outputs = write_dataset_bundle(&cfg, out)?;
        return global.manifest("simulate --dataset", &cfg, cfg.seed, outputs);
    }
    if cfg.replicates == 0 || cfg.methods.is_empty() {
        return Err(CliError::usage("need at least one replicate and one method"));
    }
    let report = soir_core::run_scenario(&cfg)?;
    write_scenario_outputs(&report, out)?;
    if !report.failures.is_empty() {
        output::warn(&format!("{} method fits failed; see {FAILURES_CSV}", report.failures.len()));
    }
    let mut outputs: Vec<String> = [METRICS_CSV, SUMMARY_CSV, FAILURES_CSV].map(String::from).to_vec();
    outputs.extend(
        report
            .mean_betas
            .keys()
            .map(|(m, t)| soir_core::sim::coefficient_file(*m, *t)),
    );
    global.manifest("simulate", &cfg, cfg.seed, outputs)
}

const TRAIN_STREAM: u64 = 0xDA7A_0000;
const TEST_STREAM: u64 = 0xDA7A_0001;
const CONTROL_STREAM: u64 = 0xDA7A_0002;

/// `train/`, `test/`, `truth/`, `noise_cov/` (the known covariance) and
/// `controls/` (repeated noisy scans of held-out subjects).
fn write_dataset_bundle(cfg: &ScenarioConfig, out: &Path) -> Result<Vec<String>, CliError> {
    let truth = generate_true_signal(cfg)?;
    let train = simulate_sample(cfg, &truth, cfg.n_train, None, &mut stream_rng(cfg.seed, TRAIN_STREAM))?;
    let test = simulate_sample(
        cfg,
        &truth,
        cfg.n_test,
        Some(&train.sigmas),
        &mut stream_rng(cfg.seed, TEST_STREAM),
    )?;
    save_dataset(&train.observed, &out.join("train"))?;
    save_dataset(&test.observed, &out.join("test"))?;
    write_truth(&truth, &out.join("truth"))?;

    let spec = cfg.basis()?;
    let p = spec.p();
    let cov = match cfg.snr {
        Some(s) => NoiseCovariance::scaled_identity(p, 1.0 / s)?,
        None => NoiseCovariance::zero(p),
    };
    save_covariance(&cov, &out.join("noise_cov"))?;

    // Every control subject is scanned once per group with independent noise.
    let linked = ScenarioConfig {
        covariance_scenario: CovarianceScenario::UnknownLinked,
        num_tasks: cfg.num_tasks.max(2),
        ..cfg.clone()
    };
    let mut rng = stream_rng(cfg.seed, CONTROL_STREAM);
    let clean = generate_images(&linked, cfg.n_control, &mut rng)?;
    let groups = clean
        .images
        .iter()
        .enumerate()
        .map(|(g, x)| {
            let noisy = add_noise(x, cfg.snr, &spec, &mut rng)?;
            TaskData::new(g, ndarray::Array1::zeros(cfg.n_control), noisy)
        })
        .collect::<Result<Vec<_>, _>>()?;
    save_dataset(&MultiTaskDataset::new(groups, spec)?, &out.join("controls"))?;
    Ok(["train", "test", "truth", "noise_cov", "controls"].map(String::from).to_vec())
}

pub fn beta_file(task: usize) -> String {
    format!("beta_{task}.csv")
}

pub fn support_file(task: usize) -> String {
    format!("support_{task}.csv")
}

/// True coefficient images and supports, one pair of CSV matrices per task.
pub fn write_truth(truth: &TrueSignal, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    for (t, (b, m)) in truth.betas.iter().zip(&truth.masks).enumerate() {
        output::write_matrix(dir, &beta_file(t), b)?;
        output::write_matrix(dir, &support_file(t), &m.mapv(|v| if v { 1.0 } else { 0.0 }))?;
    }
    Ok(())
}

/// Reads the truth for `task_ids` and checks it against the basis.
pub fn read_truth(dir: &Path, task_ids: &[usize], spec: &WaveletBasisSpec) -> Result<TrueSignal, CliError> {
    let mut betas = Vec::with_capacity(task_ids.len());
    let mut masks = Vec::with_capacity(task_ids.len());
    let mut eta0 = CoefficientSet::zeros(task_ids.len(), spec.p());
    for (row, &t) in task_ids.iter().enumerate() {
        let beta = output::read_matrix(&dir.join(beta_file(t)))?;
        let support = output::read_matrix(&dir.join(support_file(t)))?;
        for (name, m) in [("beta", &beta), ("support", &support)] {
            if m.dim() != (spec.p0, spec.p0) {
                return Err(CliError::Core(Error::Format {
                    location: dir.join(format!("{name}_{t}.csv")).display().to_string(),
                    message: format!("expected a {0}x{0} matrix, found {1:?}", spec.p0, m.dim()),
                }));
            }
        }
        let c = dwt2(&ImageGrid::new(beta.clone())?, spec)?;
        eta0.0.row_mut(row).assign(&c);
        betas.push(beta);
        masks.push(support.mapv(|v| v != 0.0));
    }
    Ok(TrueSignal { betas, masks, eta0 })
}
