//! Seeded fixtures shared by the benchmarks.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use soir_core::{build_design, DesignMatrices, ImageGrid, MultiTaskDataset, TaskData, WaveletBasisSpec, WaveletFamily};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}

pub fn gaussian_image(p0: usize, seed: u64) -> ImageGrid {
    ImageGrid::new(gaussian_matrix(p0, p0, seed)).expect("square image")
}

/// `m` tasks of `n` Gaussian images whose outcomes depend on a few pixels.
pub fn gaussian_design(m: usize, n: usize, p0: usize, seed: u64) -> DesignMatrices {
    let spec = WaveletBasisSpec::new(WaveletFamily::Haar, 1, p0).expect("valid basis");
    let p = spec.p();
    let mut r = rng(seed);
    let tasks = (0..m)
        .map(|t| {
            let x = Array2::from_shape_fn((n, p), |_| r.sample::<f64, _>(StandardNormal));
            let noise = Array1::from_shape_fn(n, |_| 0.5 * r.sample::<f64, _>(StandardNormal));
            let y = &x.column(0) + &(&x.column(p / 2) * (t as f64 + 1.0)) + noise;
            TaskData::new(t, y, x).expect("consistent shapes")
        })
        .collect();
    build_design(&MultiTaskDataset::new(tasks, spec).expect("valid dataset")).expect("design")
}
