//! Small dense kernels used on the hot paths (matrix-vector products against
//! row-major design matrices).

use ndarray::{Array1, ArrayView1, ArrayView2};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators so the compiler can vectorize without reassociation
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `A x` for a row-major `A`.
pub fn mat_vec(a: ArrayView2<f64>, x: ArrayView1<f64>) -> Array1<f64> {
    assert_eq!(a.ncols(), x.len());
    match (a.as_slice(), x.as_slice()) {
        (Some(_), Some(xs)) => a.outer_iter().map(|row| dot(row.as_slice().unwrap(), xs)).collect(),
        _ => a.dot(&x),
    }
}

/// `A x` restricted to the listed columns (`x` is zero elsewhere).
pub fn mat_vec_sparse(a: ArrayView2<f64>, x: ArrayView1<f64>, support: &[usize]) -> Array1<f64> {
    assert_eq!(a.ncols(), x.len());
    a.outer_iter()
        .map(|row| support.iter().map(|&j| row[j] * x[j]).sum())
        .collect()
}

/// `A^T r` for a row-major `A`, accumulated row by row.
pub fn mat_t_vec(a: ArrayView2<f64>, r: ArrayView1<f64>) -> Array1<f64> {
    assert_eq!(a.nrows(), r.len());
    let mut out = Array1::zeros(a.ncols());
    match a.as_slice() {
        Some(_) => {
            let o = out.as_slice_mut().unwrap();
            for (row, &ri) in a.outer_iter().zip(r.iter()) {
                if ri != 0.0 {
                    axpy(ri, row.as_slice().unwrap(), o);
                }
            }
        }
        None => out.assign(&a.t().dot(&r)),
    }
    out
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn norm1(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}
