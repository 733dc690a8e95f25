use std::path::PathBuf;

use clap::{Args, ValueEnum};
use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};
use soir_core::dataset::load_image_groups;
use soir_core::noise_cov::{CovMode, COV_DENSE, COV_FACTOR, COV_HEADER};
use soir_core::{estimate_direct, estimate_replicates, save_covariance};

use crate::error::CliError;
use crate::output::{self, Global};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Each image group is one repeated scan of the same subjects, in the
    /// same order.
    #[default]
    Replicates,
    /// Every image is a pure noise realization.
    Direct,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateNoiseConfig {
    pub input: Option<PathBuf>,
    pub mode: NoiseMode,
    /// Training sample size the estimate will be used with; enables the
    /// sample-size warning.
    pub n_train: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateNoiseArgs {
    /// Dataset-layout directory holding the scans (outcome files optional).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<NoiseMode>,
    #[arg(long)]
    pub n_train: Option<usize>,
}

pub fn run(global: &Global, args: EstimateNoiseArgs) -> Result<(), CliError> {
    let mut cfg: EstimateNoiseConfig = global.load()?;
    cfg.input = Some(output::required_path(args.input, cfg.input.take(), "input")?);
    cfg.mode = args.mode.unwrap_or(cfg.mode);
    cfg.n_train = args.n_train.or(cfg.n_train);
    let (groups, _spec) = load_image_groups(cfg.input.as_deref().unwrap())?;
    let cov = match cfg.mode {
        NoiseMode::Replicates => {
            if groups.len() < 2 {
                return Err(CliError::usage(format!(
                    "replicate mode needs at least 2 replicate groups, found {}",
                    groups.len()
                )));
            }
            let views: Vec<_> = groups.iter().map(|g| g.view()).collect();
            estimate_replicates(&views)?
        }
        NoiseMode::Direct => {
            let views: Vec<_> = groups.iter().map(|g| g.view()).collect();
            let all = concatenate(Axis(0), &views).map_err(|e| CliError::usage(e.to_string()))?;
            estimate_direct(all.view())?
        }
    };
    if let Some(n) = cfg.n_train {
        if let Some(w) = cov.sample_size_warning(n) {
            output::warn(&w);
        }
    }
    let out = global.out_dir()?;
    save_covariance(&cov, out)?;
    let mut outputs = vec![COV_HEADER.to_string()];
    match cov.mode() {
        CovMode::Factored => outputs.push(COV_FACTOR.into()),
        CovMode::Dense => outputs.push(COV_DENSE.into()),
        CovMode::Zero | CovMode::ScaledIdentity => {}
    }
    let seed = global.seed.unwrap_or(0);
    global.manifest("estimate-noise", &cfg, seed, outputs)
}
