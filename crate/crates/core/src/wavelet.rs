//! Orthonormal periodic 2-D discrete wavelet transform.
//!
//! Images are square with a power-of-two side `p0` and are vectorized
//! row-major, so an image is also a vector of length `p = p0 * p0`. The
//! transform is applied separably (rows, then columns) from the finest scale
//! down to the primary level `j0`, with periodic extension at the borders.
//!
//! Coefficient vectors use a fixed canonical order:
//!
//! 1. the `2^j0 x 2^j0` approximation block (row-major);
//! 2. for each level `j = j0, j0 + 1, ..., J` (coarse to fine) the three
//!    `2^j x 2^j` detail blocks, orientation `q = 1, 2, 3`, each row-major.
//!
//! Orientation 1 is high-pass along rows and low-pass along columns,
//! orientation 2 is low-pass along rows and high-pass along columns and
//! orientation 3 is high-pass in both directions.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::noise_cov::CovOperator;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

const HAAR: [f64; 2] = [FRAC_1_SQRT_2, FRAC_1_SQRT_2];

// Least-asymmetric Daubechies filter with four vanishing moments, solved to
// full double precision from the orthonormality and moment equations.
const SYM4: [f64; 8] = [
    0.032_223_100_604_051_466,
    -0.012_603_967_262_031_304,
    -0.099_219_543_576_633_53,
    0.297_857_795_605_306_06,
    0.803_738_751_805_132_1,
    0.497_618_667_632_775,
    -0.029_635_527_646_002_493,
    -0.075_765_714_789_502_21,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    Sym4,
}

impl WaveletFamily {
    /// Scaling (low-pass) filter.
    pub fn lowpass(self) -> &'static [f64] {
        match self {
            WaveletFamily::Haar => &HAAR,
            WaveletFamily::Sym4 => &SYM4,
        }
    }

    /// Wavelet (high-pass) filter, the alternating flip of the low-pass filter.
    pub fn highpass(self) -> Vec<f64> {
        let h = self.lowpass();
        let l = h.len();
        (0..l)
            .map(|n| {
                let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
                sign * h[l - 1 - n]
            })
            .collect()
    }

    pub fn vanishing_moments(self) -> usize {
        self.lowpass().len() / 2
    }
}

impl std::str::FromStr for WaveletFamily {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "haar" => Ok(WaveletFamily::Haar),
            "sym4" => Ok(WaveletFamily::Sym4),
            other => invalid(format!("unknown wavelet family '{other}'")),
        }
    }
}

/// Defines the orthonormal basis `B` used throughout: family, primary level
/// and padded side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveletBasisSpec {
    pub family: WaveletFamily,
    pub j0: usize,
    pub p0: usize,
}

impl WaveletBasisSpec {
    pub const DEFAULT_J0: usize = 3;

    pub fn new(family: WaveletFamily, j0: usize, p0: usize) -> Result<Self> {
        let spec = WaveletBasisSpec { family, j0, p0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p0 < 2 || !self.p0.is_power_of_two() {
            return invalid(format!("p0 = {} must be a power of two >= 2", self.p0));
        }
        if self.j0 > self.max_level() {
            return invalid(format!(
                "j0 = {} exceeds the maximum level J = {}",
                self.j0,
                self.max_level()
            ));
        }
        Ok(())
    }

    /// `J = log2(p0) - 1`, the finest detail level.
    pub fn max_level(&self) -> usize {
        self.p0.trailing_zeros() as usize - 1
    }

    /// Number of coefficients, `p0^2`.
    pub fn p(&self) -> usize {
        self.p0 * self.p0
    }

    /// Canonical-vector offset of the detail block `(level, q)`.
    pub fn detail_offset(&self, level: usize, q: usize) -> usize {
        assert!(level >= self.j0 && level <= self.max_level() && (1..=3).contains(&q));
        let approx = 1usize << (2 * self.j0);
        // each finer level j contributes 3 * 4^j coefficients
        let below: usize = (self.j0..level).map(|j| 3usize << (2 * j)).sum();
        approx + below + (q - 1) * (1usize << (2 * level))
    }
}

/// A square image of power-of-two side, with the placement of the original
/// (unpadded) data recorded for cropping.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    values: Array2<f64>,
    offset: (usize, usize),
    raw_shape: (usize, usize),
}

impl ImageGrid {
    /// Wraps an array that already has power-of-two square shape.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r == 0 || !r.is_power_of_two() {
            return invalid(format!("image must be square with power-of-two side, got {r}x{c}"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("image contains non-finite values");
        }
        Ok(ImageGrid {
            values,
            offset: (0, 0),
            raw_shape: (r, c),
        })
    }

    pub fn from_vec(p0: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != p0 * p0 {
            return invalid(format!("expected {} values, got {}", p0 * p0, data.len()));
        }
        let values = Array2::from_shape_vec((p0, p0), data)
            .map_err(|e| crate::Error::InvalidInput(e.to_string()))?;
        ImageGrid::new(values)
    }

    pub fn zeros(p0: usize) -> Self {
        ImageGrid {
            values: Array2::zeros((p0, p0)),
            offset: (0, 0),
            raw_shape: (p0, p0),
        }
    }

    pub fn side(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Row-major flat view of the pixels.
    pub fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("image storage is standard layout")
    }

    pub fn offset(&self) -> (usize, usize) {
        self.offset
    }

    pub fn raw_shape(&self) -> (usize, usize) {
        self.raw_shape
    }

    /// Undo [`pad_to_pow2`].
    pub fn crop(&self) -> Array2<f64> {
        let (r0, c0) = self.offset;
        let (h, w) = self.raw_shape;
        self.values
            .slice(ndarray::s![r0..r0 + h, c0..c0 + w])
            .to_owned()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Zero-pads `raw` to the smallest enclosing power-of-two square, centering
/// the original block.
pub fn pad_to_pow2(raw: ArrayView2<f64>) -> Result<ImageGrid> {
    let (h, w) = raw.dim();
    if h == 0 || w == 0 {
        return invalid("cannot pad an empty image");
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return invalid("image contains non-finite values");
    }
    let side = h.max(w).next_power_of_two();
    let offset = ((side - h) / 2, (side - w) / 2);
    let mut values = Array2::zeros((side, side));
    values
        .slice_mut(ndarray::s![offset.0..offset.0 + h, offset.1..offset.1 + w])
        .assign(&raw);
    Ok(ImageGrid {
        values,
        offset,
        raw_shape: (h, w),
    })
}

/// Periodic single-level analysis of `input` (even length) into
/// `[approximation | detail]`.
fn analyze_1d(input: &[f64], out: &mut [f64], h: &[f64], g: &[f64]) {
    let n = input.len();
    let half = n / 2;
    let l = h.len();
    for k in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        let base = 2 * k;
        if base + l <= n {
            let window = &input[base..base + l];
            for t in 0..l {
                a += h[t] * window[t];
                d += g[t] * window[t];
            }
        } else {
            for t in 0..l {
                let x = input[(base + t) % n];
                a += h[t] * x;
                d += g[t] * x;
            }
        }
        out[k] = a;
        out[half + k] = d;
    }
}

/// Inverse of [`analyze_1d`].
fn synthesize_1d(input: &[f64], out: &mut [f64], h: &[f64], g: &[f64]) {
    let n = input.len();
    let half = n / 2;
    let l = h.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..half {
        let a = input[k];
        let d = input[half + k];
        let base = 2 * k;
        for t in 0..l {
            out[(base + t) % n] += a * h[t] + d * g[t];
        }
    }
}

/// One separable analysis level on the top-left `s x s` block of a row-major
/// `p0 x p0` buffer.
fn analyze_level(buf: &mut [f64], p0: usize, s: usize, h: &[f64], g: &[f64], scratch: &mut Vec<f64>) {
    scratch.resize(2 * s, 0.0);
    let (line, out) = scratch.split_at_mut(s);
    for r in 0..s {
        let row = &mut buf[r * p0..r * p0 + s];
        line.copy_from_slice(row);
        analyze_1d(line, out, h, g);
        row.copy_from_slice(out);
    }
    for c in 0..s {
        for r in 0..s {
            line[r] = buf[r * p0 + c];
        }
        analyze_1d(line, out, h, g);
        for r in 0..s {
            buf[r * p0 + c] = out[r];
        }
    }
}

fn synthesize_level(buf: &mut [f64], p0: usize, s: usize, h: &[f64], g: &[f64], scratch: &mut Vec<f64>) {
    scratch.resize(2 * s, 0.0);
    let (line, out) = scratch.split_at_mut(s);
    for c in 0..s {
        for r in 0..s {
            line[r] = buf[r * p0 + c];
        }
        synthesize_1d(line, out, h, g);
        for r in 0..s {
            buf[r * p0 + c] = out[r];
        }
    }
    for r in 0..s {
        let row = &mut buf[r * p0..r * p0 + s];
        line.copy_from_slice(row);
        synthesize_1d(line, out, h, g);
        row.copy_from_slice(out);
    }
}

/// Copies between the in-place (Mallat) layout and the canonical vector order.
fn mallat_to_canonical(buf: &[f64], spec: &WaveletBasisSpec, out: &mut [f64]) {
    let p0 = spec.p0;
    let a = 1usize << spec.j0;
    let mut pos = 0;
    for r in 0..a {
        out[pos..pos + a].copy_from_slice(&buf[r * p0..r * p0 + a]);
        pos += a;
    }
    for level in spec.j0..=spec.max_level() {
        let s = 1usize << level;
        for (r0, c0) in [(0, s), (s, 0), (s, s)] {
            for r in 0..s {
                let start = (r0 + r) * p0 + c0;
                out[pos..pos + s].copy_from_slice(&buf[start..start + s]);
                pos += s;
            }
        }
    }
}

fn canonical_to_mallat(coeffs: &[f64], spec: &WaveletBasisSpec, buf: &mut [f64]) {
    let p0 = spec.p0;
    let a = 1usize << spec.j0;
    let mut pos = 0;
    for r in 0..a {
        buf[r * p0..r * p0 + a].copy_from_slice(&coeffs[pos..pos + a]);
        pos += a;
    }
    for level in spec.j0..=spec.max_level() {
        let s = 1usize << level;
        for (r0, c0) in [(0, s), (s, 0), (s, s)] {
            for r in 0..s {
                let start = (r0 + r) * p0 + c0;
                buf[start..start + s].copy_from_slice(&coeffs[pos..pos + s]);
                pos += s;
            }
        }
    }
}

/// Forward transform of a row-major image slice of length `p`.
pub fn dwt2_slice(image: &[f64], spec: &WaveletBasisSpec) -> Result<Vec<f64>> {
    if image.len() != spec.p() {
        return invalid(format!(
            "image has {} pixels, basis expects {}",
            image.len(),
            spec.p()
        ));
    }
    let h = spec.family.lowpass();
    let g = spec.family.highpass();
    let mut buf = image.to_vec();
    let mut scratch = Vec::new();
    let mut s = spec.p0;
    while s > (1usize << spec.j0) {
        analyze_level(&mut buf, spec.p0, s, h, &g, &mut scratch);
        s /= 2;
    }
    let mut out = vec![0.0; spec.p()];
    mallat_to_canonical(&buf, spec, &mut out);
    Ok(out)
}

/// Inverse transform returning a row-major pixel vector.
pub fn idwt2_slice(coeffs: &[f64], spec: &WaveletBasisSpec) -> Result<Vec<f64>> {
    if coeffs.len() != spec.p() {
        return invalid(format!(
            "coefficient vector has length {}, basis expects {}",
            coeffs.len(),
            spec.p()
        ));
    }
    let h = spec.family.lowpass();
    let g = spec.family.highpass();
    let mut buf = vec![0.0; spec.p()];
    canonical_to_mallat(coeffs, spec, &mut buf);
    let mut scratch = Vec::new();
    let mut s = 2usize << spec.j0;
    while s <= spec.p0 {
        synthesize_level(&mut buf, spec.p0, s, h, &g, &mut scratch);
        s *= 2;
    }
    Ok(buf)
}

/// Wavelet coefficients `B^T x` of an image, in canonical order.
pub fn dwt2(img: &ImageGrid, spec: &WaveletBasisSpec) -> Result<Array1<f64>> {
    if img.side() != spec.p0 {
        return invalid(format!(
            "image side {} does not match basis side {}",
            img.side(),
            spec.p0
        ));
    }
    dwt2_slice(img.as_slice(), spec).map(Array1::from)
}

/// Synthesis `B c`.
pub fn idwt2(coeffs: ArrayView1<f64>, spec: &WaveletBasisSpec) -> Result<ImageGrid> {
    let flat: Vec<f64> = coeffs.iter().copied().collect();
    let pixels = idwt2_slice(&flat, spec)?;
    let values = Array2::from_shape_vec((spec.p0, spec.p0), pixels)
        .expect("length checked by idwt2_slice");
    Ok(ImageGrid {
        values,
        offset: (0, 0),
        raw_shape: (spec.p0, spec.p0),
    })
}

/// Applies `B^T` to every row of `rows` (each row a vectorized image).
pub fn dwt2_rows(rows: ArrayView2<f64>, spec: &WaveletBasisSpec) -> Result<Array2<f64>> {
    if rows.ncols() != spec.p() {
        return invalid(format!(
            "rows have length {}, basis expects {}",
            rows.ncols(),
            spec.p()
        ));
    }
    let mut out = Array2::zeros(rows.dim());
    let mut line = vec![0.0; spec.p()];
    for (src, mut dst) in rows.outer_iter().zip(out.outer_iter_mut()) {
        line.iter_mut().zip(src.iter()).for_each(|(l, s)| *l = *s);
        let c = dwt2_slice(&line, spec)?;
        dst.iter_mut().zip(c).for_each(|(d, v)| *d = v);
    }
    Ok(out)
}

/// Applies `B` to every row of `rows` (each row a coefficient vector).
pub fn idwt2_rows(rows: ArrayView2<f64>, spec: &WaveletBasisSpec) -> Result<Array2<f64>> {
    if rows.ncols() != spec.p() {
        return invalid(format!(
            "rows have length {}, basis expects {}",
            rows.ncols(),
            spec.p()
        ));
    }
    let mut out = Array2::zeros(rows.dim());
    let mut line = vec![0.0; spec.p()];
    for (src, mut dst) in rows.outer_iter().zip(out.outer_iter_mut()) {
        line.iter_mut().zip(src.iter()).for_each(|(l, s)| *l = *s);
        let x = idwt2_slice(&line, spec)?;
        dst.iter_mut().zip(x).for_each(|(d, v)| *d = v);
    }
    Ok(out)
}

/// Wavelet-domain conjugate `B^T Sigma B` of an image-domain covariance.
///
/// Factored operators stay factored (the factor rows are transformed), so no
/// `p x p` matrix is formed for them.
pub fn conjugate_covariance(sigma: &CovOperator, spec: &WaveletBasisSpec) -> Result<CovOperator> {
    let p = spec.p();
    if sigma.dim() != p {
        return invalid(format!(
            "covariance has dimension {}, basis expects {}",
            sigma.dim(),
            p
        ));
    }
    match sigma {
        CovOperator::Zero { .. } | CovOperator::ScaledIdentity { .. } => Ok(sigma.clone()),
        CovOperator::Dense(m) => {
            let asym = m
                .indexed_iter()
                .map(|((i, j), v)| (v - m[[j, i]]).abs())
                .fold(0.0, f64::max);
            if asym > 1e-8 {
                return invalid(format!("dense covariance is asymmetric (max deviation {asym:e})"));
            }
            // rows, then columns; valid because Sigma is symmetric
            let half = dwt2_rows(m.view(), spec)?;
            let full = dwt2_rows(half.t(), spec)?;
            let sym = (&full + &full.t()) * 0.5;
            Ok(CovOperator::Dense(sym))
        }
        CovOperator::Factored { factor, n_tilde } => Ok(CovOperator::Factored {
            factor: dwt2_rows(factor.view(), spec)?,
            n_tilde: *n_tilde,
        }),
    }
}
