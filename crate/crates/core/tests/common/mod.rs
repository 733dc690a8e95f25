//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use soir_core::CorrectedMoments;

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Projection onto the L1 ball by enumerating every support set. On a fixed
/// support with the signs of `v`, the boundary candidate shrinks all entries
/// by the same amount; the feasible candidate nearest to `v` wins.
pub fn brute_project_l1(v: &[f64], radius: f64) -> Vec<f64> {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= radius {
        return v.to_vec();
    }
    let d = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << d) {
        let support: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
        let total: f64 = support.iter().map(|&i| v[i].abs()).sum();
        let theta = (total - radius) / support.len() as f64;
        if theta < 0.0 || support.iter().any(|&i| v[i].abs() < theta) {
            continue;
        }
        let mut x = vec![0.0; d];
        for &i in &support {
            x[i] = v[i].signum() * (v[i].abs() - theta);
        }
        let dist: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
            best = Some((dist, x));
        }
    }
    best.expect("some support is feasible").1
}

/// Same enumeration for the L_{1,2} ball over the columns of `v`.
pub fn brute_project_group(v: &Array2<f64>, radius: f64) -> Array2<f64> {
    let norms: Vec<f64> = v.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    if norms.iter().sum::<f64>() <= radius {
        return v.clone();
    }
    let g = norms.len();
    let mut best: Option<(f64, Array2<f64>)> = None;
    for mask in 1u32..(1 << g) {
        let support: Vec<usize> = (0..g).filter(|j| mask >> j & 1 == 1).collect();
        let total: f64 = support.iter().map(|&j| norms[j]).sum();
        let theta = (total - radius) / support.len() as f64;
        if theta < 0.0 || support.iter().any(|&j| norms[j] < theta) {
            continue;
        }
        let mut x = Array2::zeros(v.dim());
        for &j in &support {
            let s = (norms[j] - theta) / norms[j];
            x.column_mut(j).assign(&(&v.column(j) * s));
        }
        let dist = (&x - v).mapv(|a| a * a).sum();
        if best.as_ref().is_none_or(|(bd, _)| dist < *bd) {
            best = Some((dist, x));
        }
    }
    best.expect("some support is feasible").1
}

/// Random convex moments: `Gamma_m = W^T W / n` and `gamma_m = W^T y / n`
/// with a sparse shared truth.
pub fn random_moments(rng: &mut ChaCha8Rng, m: usize, n: usize, p: usize) -> CorrectedMoments {
    let active: Vec<usize> = (0..p).filter(|j| j % 4 == 0).collect();
    let mut grams = Vec::new();
    let mut gammas = Vec::new();
    for _ in 0..m {
        let w = normal_matrix(rng, n, p);
        let mut beta = Array1::zeros(p);
        for &j in &active {
            beta[j] = 1.0 + rng.gen::<f64>();
        }
        let noise = Array1::from(normal_vec(rng, n, 0.5));
        let y = w.dot(&beta) + noise;
        grams.push(w.t().dot(&w) / n as f64);
        gammas.push(w.t().dot(&y) / n as f64);
    }
    CorrectedMoments::from_dense(grams, gammas, n).unwrap()
}

pub fn dense_parts(mom: &CorrectedMoments) -> (Vec<Array2<f64>>, Vec<Array1<f64>>) {
    (
        mom.tasks.iter().map(|t| t.gram.to_dense()).collect(),
        mom.tasks.iter().map(|t| t.gamma.clone()).collect(),
    )
}

/// `sum_m (1/2 e^T G e - g^T e) + lambda * penalty`, evaluated directly.
pub fn penalized_objective(grams: &[Array2<f64>], gammas: &[Array1<f64>], eta: &Array2<f64>, lambda: f64, group: bool) -> f64 {
    let mut loss = 0.0;
    for (m, (g, v)) in grams.iter().zip(gammas).enumerate() {
        let e = eta.row(m);
        loss += 0.5 * e.dot(&g.dot(&e)) - v.dot(&e);
    }
    let pen: f64 = if group {
        eta.columns().into_iter().map(|c| c.dot(&c).sqrt()).sum()
    } else {
        eta.iter().map(|x| x.abs()).sum()
    };
    loss + lambda * pen
}

/// Exact block coordinate descent for the unconstrained group lasso. Each
/// block update solves `min_b sum_m (a_m b_m^2 / 2 + c_m b_m) + lambda ||b||`
/// through a scalar equation in `r = ||b||`.
pub fn bcd_group_lasso(grams: &[Array2<f64>], gammas: &[Array1<f64>], lambda: f64, sweeps: usize) -> Array2<f64> {
    let m = grams.len();
    let p = gammas[0].len();
    let mut eta = Array2::<f64>::zeros((m, p));
    for _ in 0..sweeps {
        let mut moved = 0.0f64;
        for j in 0..p {
            let a: Vec<f64> = (0..m).map(|k| grams[k][[j, j]]).collect();
            // linear coefficient with block j removed
            let c: Vec<f64> = (0..m)
                .map(|k| grams[k].row(j).dot(&eta.row(k)) - a[k] * eta[[k, j]] - gammas[k][j])
                .collect();
            let cn = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            let new: Vec<f64> = if cn <= lambda {
                vec![0.0; m]
            } else {
                // ||b(r)|| = r with b_k = -c_k r / (a_k r + lambda); phi is decreasing in r
                let phi = |r: f64| -> f64 {
                    (0..m).map(|k| (c[k] / (a[k] * r + lambda)).powi(2)).sum::<f64>().sqrt() - 1.0
                };
                let (mut lo, mut hi) = (0.0, 1.0);
                while phi(hi) > 0.0 {
                    hi *= 2.0;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if phi(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let r = 0.5 * (lo + hi);
                (0..m).map(|k| -c[k] * r / (a[k] * r + lambda)).collect()
            };
            for k in 0..m {
                moved = moved.max((new[k] - eta[[k, j]]).abs());
                eta[[k, j]] = new[k];
            }
        }
        if moved < 1e-14 {
            break;
        }
    }
    eta
}

/// Cyclic coordinate descent for the unconstrained lasso.
pub fn cd_lasso(grams: &[Array2<f64>], gammas: &[Array1<f64>], lambda: f64, sweeps: usize) -> Array2<f64> {
    let m = grams.len();
    let p = gammas[0].len();
    let mut eta = Array2::<f64>::zeros((m, p));
    for k in 0..m {
        for _ in 0..sweeps {
            let mut moved = 0.0f64;
            for j in 0..p {
                let a = grams[k][[j, j]];
                let c = grams[k].row(j).dot(&eta.row(k)) - a * eta[[k, j]] - gammas[k][j];
                let new = if c.abs() <= lambda { 0.0 } else { -(c - lambda * c.signum()) / a };
                moved = moved.max((new - eta[[k, j]]).abs());
                eta[[k, j]] = new;
            }
            if moved < 1e-14 {
                break;
            }
        }
    }
    eta
}

/// Ordinary least squares through the normal equations, solved by Cholesky.
pub fn ols(w: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let (n, p) = w.dim();
    let a = nalgebra::DMatrix::from_fn(n, p, |i, j| w[[i, j]]);
    let b = nalgebra::DVector::from_fn(n, |i, _| y[i]);
    let gram = a.transpose() * &a;
    let rhs = a.transpose() * b;
    let sol = gram.cholesky().expect("full-rank design").solve(&rhs);
    Array1::from_iter(sol.iter().copied())
}
