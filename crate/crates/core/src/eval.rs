//! Evaluation metrics and coefficient-image reconstruction.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::{write_atomic, FORMAT_VERSION};
use crate::wavelet::{idwt2, ImageGrid, WaveletBasisSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub replicate: usize,
    pub method: String,
    pub task: usize,
    pub pmse: f64,
    pub bias: f64,
    pub auc: f64,
}

pub const METRICS_HEADER: &str = "replicate,method,task,pmse,bias,auc";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.replicate, self.method, self.task, self.pmse, self.bias, self.auc
        )
    }
}

/// Mean squared prediction error divided by the training outcome variance.
pub fn pmse(y_pred: ArrayView1<f64>, y_test: ArrayView1<f64>, var_train: f64) -> Result<f64> {
    if y_pred.len() != y_test.len() {
        return invalid(format!("{} predictions for {} outcomes", y_pred.len(), y_test.len()));
    }
    if y_test.is_empty() {
        return invalid("no test outcomes");
    }
    if !(var_train > 0.0) {
        return invalid(format!("training variance {var_train} must be positive"));
    }
    let mse = y_pred
        .iter()
        .zip(y_test.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y_test.len() as f64;
    Ok(mse / var_train)
}

/// Pixelwise mean absolute error.
pub fn coefficient_bias(beta_hat: ArrayView2<f64>, beta_true: ArrayView2<f64>) -> Result<f64> {
    if beta_hat.dim() != beta_true.dim() {
        return invalid(format!("shapes {:?} and {:?} differ", beta_hat.dim(), beta_true.dim()));
    }
    let n = beta_hat.len() as f64;
    Ok(beta_hat
        .iter()
        .zip(beta_true.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Area under the ROC curve of the scores `|beta_hat|` for the true support,
/// via the Mann-Whitney statistic with midranks for ties.
pub fn support_auc(beta_hat: ArrayView2<f64>, support: ArrayView2<bool>) -> Result<f64> {
    if beta_hat.dim() != support.dim() {
        return invalid(format!("shapes {:?} and {:?} differ", beta_hat.dim(), support.dim()));
    }
    let positives = support.iter().filter(|b| **b).count();
    let negatives = support.len() - positives;
    if positives == 0 || negatives == 0 {
        return invalid("support mask must be neither empty nor full");
    }
    let mut scored: Vec<(f64, bool)> = beta_hat
        .iter()
        .zip(support.iter())
        .map(|(v, s)| (v.abs(), *s))
        .collect();
    if scored.iter().any(|(v, _)| v.is_nan()) {
        return invalid("scores contain NaN");
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the midrank
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * scored[i..j].iter().filter(|(_, s)| *s).count() as f64;
        i = j;
    }
    let (np, nn) = (positives as f64, negatives as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Coefficient image of one task: the inverse transform of its row.
pub fn reconstruct_beta(eta_row: ArrayView1<f64>, spec: &WaveletBasisSpec) -> Result<ImageGrid> {
    idwt2(eta_row, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub format_version: u32,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Value mapped to gray level 0.
    pub min: f64,
    /// Value mapped to gray level `maxval`.
    pub max: f64,
}

/// Writes a 16-bit binary PGM (linear rescale of `[min, max]` to
/// `[0, 65535]`) and a JSON sidecar with the same stem.
pub fn export_pgm(image: &Array2<f64>, path: &Path) -> Result<PgmSidecar> {
    if image.is_empty() || image.iter().any(|v| !v.is_finite()) {
        return invalid("image must be nonempty and finite");
    }
    let min = image.iter().copied().fold(f64::INFINITY, f64::min);
    let max = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (height, width) = image.dim();
    let mut bytes = format!("P5\n{width} {height}\n65535\n").into_bytes();
    let span = max - min;
    for &v in image.iter() {
        let level = if span > 0.0 { ((v - min) / span * 65535.0).round() as u16 } else { 0 };
        bytes.extend_from_slice(&level.to_be_bytes());
    }
    write_atomic(path, &bytes)?;
    let sidecar = PgmSidecar {
        format_version: FORMAT_VERSION,
        width,
        height,
        maxval: u16::MAX,
        min,
        max,
    };
    write_atomic(&path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::{dwt2, WaveletFamily};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn indicator(p0: usize, lo: usize, hi: usize) -> (Array2<f64>, Array2<bool>) {
        let mask = Array2::from_shape_fn((p0, p0), |(r, c)| r >= lo && r < hi && c >= lo && c < hi);
        (mask.mapv(|b| if b { 1.0 } else { 0.0 }), mask)
    }

    #[test]
    fn pmse_examples() {
        let y = array![1.0, 2.0, 3.0];
        assert_eq!(pmse(y.view(), y.view(), 1.0).unwrap(), 0.0);
        assert!(pmse(y.view(), array![1.0].view(), 1.0).is_err());
        assert!(pmse(y.view(), y.view(), 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train: Array1<f64> = Array1::from_shape_fn(5000, |_| rng.gen::<f64>() * 4.0);
        let test: Array1<f64> = Array1::from_shape_fn(5000, |_| rng.gen::<f64>() * 4.0);
        let mean = train.mean().unwrap();
        let var = train.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        let pred = Array1::from_elem(5000, mean);
        assert!((pmse(pred.view(), test.view(), var).unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn pmse_shift_invariant() {
        let a = array![0.3, -1.0, 2.0];
        let b = array![0.0, -0.5, 2.5];
        let x = pmse(a.view(), b.view(), 2.0).unwrap();
        let y = pmse((&a + 7.0).view(), (&b + 7.0).view(), 2.0).unwrap();
        assert_abs_diff_eq!(x, y, epsilon = 1e-12);
    }

    #[test]
    fn bias_examples() {
        let (beta, _) = indicator(16, 4, 8);
        assert_eq!(coefficient_bias(beta.view(), beta.view()).unwrap(), 0.0);
        let shifted = &beta + 0.1;
        assert_abs_diff_eq!(coefficient_bias(shifted.view(), beta.view()).unwrap(), 0.1, epsilon = 1e-12);
        let zero = Array2::zeros((16, 16));
        assert_abs_diff_eq!(coefficient_bias(zero.view(), beta.view()).unwrap(), 16.0 / 256.0, epsilon = 1e-15);
        assert!(coefficient_bias(zero.view(), Array2::zeros((4, 4)).view()).is_err());
    }

    #[test]
    fn auc_examples() {
        let (beta, mask) = indicator(64, 20, 40);
        assert_eq!(support_auc(beta.view(), mask.view()).unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Array2::from_shape_fn((64, 64), |_| rng.gen::<f64>());
        let auc = support_auc(noise.view(), mask.view()).unwrap();
        assert!((auc - 0.5).abs() < 0.05, "{auc}");

        let ties = Array2::<f64>::zeros((64, 64));
        assert_eq!(support_auc(ties.view(), mask.view()).unwrap(), 0.5);

        let empty = Array2::from_elem((64, 64), false);
        assert!(support_auc(beta.view(), empty.view()).is_err());
        assert!(support_auc(beta.view(), Array2::from_elem((64, 64), true).view()).is_err());
    }

    #[test]
    fn auc_monotone_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, mask) = indicator(16, 3, 9);
        let scores = Array2::from_shape_fn((16, 16), |(r, _)| rng.gen::<f64>() + if r > 5 { 0.3 } else { 0.0 });
        let a = support_auc(scores.view(), mask.view()).unwrap();
        let b = support_auc(scores.mapv(|v| (3.0 * v).exp()).view(), mask.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reconstruct_round_trip() {
        let spec = WaveletBasisSpec::new(WaveletFamily::Sym4, 3, 32).unwrap();
        let (beta, _) = indicator(32, 8, 20);
        let eta = dwt2(&ImageGrid::new(beta.clone()).unwrap(), &spec).unwrap();
        let back = reconstruct_beta(eta.view(), &spec).unwrap();
        for (a, b) in back.values().iter().zip(beta.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(back.frobenius_norm(), eta.dot(&eta).sqrt(), epsilon = 1e-10);
        let zero = reconstruct_beta(Array1::zeros(1024).view(), &spec).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));
        assert!(reconstruct_beta(Array1::zeros(10).view(), &spec).is_err());
    }

    #[test]
    fn pgm_export() {
        let dir = tempfile::tempdir().unwrap();
        let img = array![[0.0, 1.0], [-1.0, 0.5]];
        let side = export_pgm(&img, &dir.path().join("b.pgm")).unwrap();
        assert_eq!((side.min, side.max), (-1.0, 1.0));
        let bytes = std::fs::read(dir.path().join("b.pgm")).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 8);
        assert_eq!(&bytes[header.len() + 4..header.len() + 6], &[0, 0]);
        assert!(dir.path().join("b.json").exists());
    }
}
