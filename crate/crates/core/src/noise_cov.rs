//! Measurement-noise covariance: representations and estimators.
//!
//! Covariances estimated from data are kept in factored form `A^T A / n_tilde`
//! and only ever applied through matrix-vector products.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::io::{read_f64_le, write_atomic, write_f64_le, FORMAT_VERSION};
use crate::linalg;
use crate::wavelet::{conjugate_covariance, WaveletBasisSpec};

/// A symmetric positive semi-definite operator of dimension `p`.
#[derive(Debug, Clone, PartialEq)]
pub enum CovOperator {
    Zero { dim: usize },
    ScaledIdentity { dim: usize, scale: f64 },
    Dense(Array2<f64>),
    /// `factor^T factor / n_tilde`.
    Factored { factor: Array2<f64>, n_tilde: usize },
}

impl CovOperator {
    pub fn dim(&self) -> usize {
        match self {
            CovOperator::Zero { dim } | CovOperator::ScaledIdentity { dim, .. } => *dim,
            CovOperator::Dense(m) => m.nrows(),
            CovOperator::Factored { factor, .. } => factor.ncols(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            CovOperator::Zero { .. } => true,
            CovOperator::ScaledIdentity { scale, .. } => *scale == 0.0,
            CovOperator::Dense(m) => m.iter().all(|v| *v == 0.0),
            CovOperator::Factored { factor, .. } => factor.iter().all(|v| *v == 0.0),
        }
    }

    pub fn apply(&self, v: ArrayView1<f64>) -> Array1<f64> {
        match self {
            CovOperator::Zero { dim } => Array1::zeros(*dim),
            CovOperator::ScaledIdentity { scale, .. } => v.to_owned() * *scale,
            CovOperator::Dense(m) => linalg::mat_vec(m.view(), v),
            CovOperator::Factored { factor, n_tilde } => {
                let av = linalg::mat_vec(factor.view(), v);
                linalg::mat_t_vec(factor.view(), av.view()) / *n_tilde as f64
            }
        }
    }

    pub fn quad_form(&self, v: ArrayView1<f64>) -> f64 {
        match self {
            CovOperator::Factored { factor, n_tilde } => {
                let av = linalg::mat_vec(factor.view(), v);
                av.iter().map(|x| x * x).sum::<f64>() / *n_tilde as f64
            }
            _ => self.apply(v).dot(&v),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            CovOperator::Zero { dim } => Array2::zeros((*dim, *dim)),
            CovOperator::ScaledIdentity { dim, scale } => Array2::eye(*dim) * *scale,
            CovOperator::Dense(m) => m.clone(),
            CovOperator::Factored { factor, n_tilde } => {
                factor.t().dot(factor) / *n_tilde as f64
            }
        }
    }

    /// Diagonal entries.
    pub fn diagonal(&self) -> Array1<f64> {
        match self {
            CovOperator::Zero { dim } => Array1::zeros(*dim),
            CovOperator::ScaledIdentity { dim, scale } => Array1::from_elem(*dim, *scale),
            CovOperator::Dense(m) => m.diag().to_owned(),
            CovOperator::Factored { factor, n_tilde } => {
                let mut d = Array1::zeros(factor.ncols());
                for row in factor.outer_iter() {
                    d.zip_mut_with(&row, |acc, v| *acc += v * v);
                }
                d / *n_tilde as f64
            }
        }
    }

    fn mode(&self) -> CovMode {
        match self {
            CovOperator::Zero { .. } => CovMode::Zero,
            CovOperator::ScaledIdentity { .. } => CovMode::ScaledIdentity,
            CovOperator::Dense(_) => CovMode::Dense,
            CovOperator::Factored { .. } => CovMode::Factored,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovMode {
    Dense,
    Factored,
    Zero,
    ScaledIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Known,
    EstimatedDirect,
    EstimatedReplicates,
}

/// Image-domain noise covariance with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    pub op: CovOperator,
    pub provenance: Provenance,
}

impl NoiseCovariance {
    pub fn zero(p: usize) -> Self {
        NoiseCovariance {
            op: CovOperator::Zero { dim: p },
            provenance: Provenance::Known,
        }
    }

    pub fn scaled_identity(p: usize, scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return invalid(format!("noise variance {scale} must be finite and >= 0"));
        }
        Ok(NoiseCovariance {
            op: CovOperator::ScaledIdentity { dim: p, scale },
            provenance: Provenance::Known,
        })
    }

    pub fn dense(m: Array2<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return invalid("dense covariance must be square");
        }
        Ok(NoiseCovariance {
            op: CovOperator::Dense(m),
            provenance: Provenance::Known,
        })
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn mode(&self) -> CovMode {
        self.op.mode()
    }

    /// Number of noise realizations behind an estimate (`n_tilde`), if any.
    pub fn effective_samples(&self) -> Option<usize> {
        match &self.op {
            CovOperator::Factored { n_tilde, .. } => Some(*n_tilde),
            _ => None,
        }
    }

    /// Warning text when the estimate is built from no more noise realizations
    /// than the training sample size `n`.
    pub fn sample_size_warning(&self, n: usize) -> Option<String> {
        let n_tilde = self.effective_samples()?;
        if n_tilde <= n {
            Some(format!(
                "noise covariance estimated from {n_tilde} effective samples, not more than the training size {n}; error bounds may not apply"
            ))
        } else {
            None
        }
    }
}

fn check_finite_rows(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return invalid(format!("{what}: row {i} has non-finite values"));
        }
    }
    Ok(())
}

/// `U0^T U0 / n0` from directly observed noise vectors (rows of `u0`).
pub fn estimate_direct(u0: ArrayView2<f64>) -> Result<NoiseCovariance> {
    if u0.nrows() == 0 {
        return invalid("need at least one noise vector");
    }
    check_finite_rows(u0, "noise vectors")?;
    Ok(NoiseCovariance {
        op: CovOperator::Factored {
            factor: u0.to_owned(),
            n_tilde: u0.nrows(),
        },
        provenance: Provenance::EstimatedDirect,
    })
}

/// Pooled within-subject covariance from `M >= 2` replicate groups sharing
/// the same subjects: `sum_i sum_m (z_mi - zbar_i)(z_mi - zbar_i)^T / (n*(M-1))`.
pub fn estimate_replicates(groups: &[ArrayView2<f64>]) -> Result<NoiseCovariance> {
    let m = groups.len();
    if m < 2 {
        return invalid(format!("replicate estimator needs M >= 2 groups, got {m}"));
    }
    let (n_star, p) = groups[0].dim();
    if n_star == 0 {
        return invalid("replicate groups are empty");
    }
    for (g, z) in groups.iter().enumerate() {
        if z.dim() != (n_star, p) {
            return invalid(format!(
                "replicate group {g} has shape {:?}, expected {:?}",
                z.dim(),
                (n_star, p)
            ));
        }
        check_finite_rows(*z, &format!("replicate group {g}"))?;
    }
    // shifted by the first group, so identical replicates give exact zeros
    let base = groups[0];
    let mut shift = Array2::<f64>::zeros((n_star, p));
    for z in &groups[1..] {
        shift += &(z - &base);
    }
    shift /= m as f64;
    let mean = &base + &shift;
    let mut factor = Array2::<f64>::zeros((n_star * m, p));
    for (g, z) in groups.iter().enumerate() {
        let mut block = factor.slice_mut(ndarray::s![g * n_star..(g + 1) * n_star, ..]);
        block.assign(z);
        block -= &mean;
    }
    Ok(NoiseCovariance {
        op: CovOperator::Factored {
            factor,
            n_tilde: n_star * (m - 1),
        },
        provenance: Provenance::EstimatedReplicates,
    })
}

/// `B^T Sigma_u B`, preserving the representation mode.
pub fn to_wavelet_domain(cov: &NoiseCovariance, spec: &WaveletBasisSpec) -> Result<CovOperator> {
    conjugate_covariance(&cov.op, spec)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CovHeader {
    format_version: u32,
    mode: CovMode,
    provenance: Provenance,
    p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_tilde: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    endianness: String,
}

pub const COV_HEADER: &str = "covariance.json";
pub const COV_FACTOR: &str = "factor.bin";
pub const COV_DENSE: &str = "dense.bin";

/// Writes `covariance.json` plus `factor.bin` / `dense.bin` into `dir`.
pub fn save_covariance(cov: &NoiseCovariance, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut header = CovHeader {
        format_version: FORMAT_VERSION,
        mode: cov.mode(),
        provenance: cov.provenance,
        p: cov.dim(),
        n_tilde: None,
        rows: None,
        scale: None,
        endianness: "little".into(),
    };
    match &cov.op {
        CovOperator::Zero { .. } => {}
        CovOperator::ScaledIdentity { scale, .. } => header.scale = Some(*scale),
        CovOperator::Dense(m) => {
            write_f64_le(&dir.join(COV_DENSE), m.iter().copied())?;
        }
        CovOperator::Factored { factor, n_tilde } => {
            header.n_tilde = Some(*n_tilde);
            header.rows = Some(factor.nrows());
            write_f64_le(&dir.join(COV_FACTOR), factor.iter().copied())?;
        }
    }
    let json = serde_json::to_vec_pretty(&header)?;
    write_atomic(&dir.join(COV_HEADER), &json)
}

pub fn load_covariance(dir: &Path) -> Result<NoiseCovariance> {
    let header_path = dir.join(COV_HEADER);
    let text = fs::read(&header_path).map_err(io_err(&header_path))?;
    let header: CovHeader = serde_json::from_slice(&text).map_err(|e| Error::Format {
        location: header_path.display().to_string(),
        message: e.to_string(),
    })?;
    if header.endianness != "little" {
        return Err(Error::Format {
            location: header_path.display().to_string(),
            message: format!("unsupported endianness '{}'", header.endianness),
        });
    }
    let missing = |field: &str| Error::Format {
        location: header_path.display().to_string(),
        message: format!("mode {:?} requires field '{field}'", header.mode),
    };
    let op = match header.mode {
        CovMode::Zero => CovOperator::Zero { dim: header.p },
        CovMode::ScaledIdentity => CovOperator::ScaledIdentity {
            dim: header.p,
            scale: header.scale.ok_or_else(|| missing("scale"))?,
        },
        CovMode::Dense => {
            let data = read_f64_le(&dir.join(COV_DENSE), header.p * header.p)?;
            CovOperator::Dense(Array2::from_shape_vec((header.p, header.p), data).unwrap())
        }
        CovMode::Factored => {
            let rows = header.rows.ok_or_else(|| missing("rows"))?;
            let n_tilde = header.n_tilde.ok_or_else(|| missing("n_tilde"))?;
            let data = read_f64_le(&dir.join(COV_FACTOR), rows * header.p)?;
            CovOperator::Factored {
                factor: Array2::from_shape_vec((rows, header.p), data).unwrap(),
                n_tilde,
            }
        }
    };
    Ok(NoiseCovariance {
        op,
        provenance: header.provenance,
    })
}
