//! Small dense helpers for the row-major matrices used in the hot loops.
//!
//! The dimensions here are tiny (feature vectors of length 7 in the
//! benchmark), so plain loops over slices beat any general-purpose
//! matrix library once allocation is taken into account.

use nalgebra::DMatrix;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = A x` for a row-major `rows x cols` matrix.
#[inline]
pub fn mat_vec(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), cols);
    for (row, o) in a.chunks_exact(cols).zip(out.iter_mut()) {
        *o = dot(row, x);
    }
}

/// `out += Aᵀ y` for a row-major `rows x cols` matrix.
#[inline]
pub fn mat_t_vec_add(a: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (row, &yi) in a.chunks_exact(cols).zip(y) {
        if yi != 0.0 {
            for (o, &aij) in out.iter_mut().zip(row) {
                *o += aij * yi;
            }
        }
    }
}

/// Quadratic form `xᵀ A x` for a square row-major matrix.
#[inline]
pub fn quad_form(a: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    a.chunks_exact(n)
        .zip(x)
        .map(|(row, &xi)| xi * dot(row, x))
        .sum()
}

/// `xᵀ A x` for a symmetric row-major `A`, reading the upper triangle only.
#[inline]
pub fn quad_form_sym(a: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let row = &a[i * n + i..(i + 1) * n];
        let xs = &x[i..];
        let off: f64 = row[1..].iter().zip(&xs[1..]).map(|(r, v)| r * v).sum();
        acc += xs[0] * (row[0] * xs[0] + 2.0 * off);
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

pub fn to_dmatrix(a: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, a)
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Replace `a` by `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quad_form_matches_explicit_product() {
        let a = [2.0, 1.0, 1.0, 3.0];
        let x = [1.0, -2.0];
        // 2 - 2 - 2 + 12
        assert_eq!(quad_form(&a, &x), 10.0);
        assert_eq!(quad_form_sym(&a, &x), 10.0);
    }

    #[test]
    fn symmetric_form_agrees_on_three_by_three() {
        let a = [4.0, -1.0, 0.5, -1.0, 2.0, 0.25, 0.5, 0.25, 1.0];
        let x = [0.3, -1.2, 2.0];
        assert!((quad_form(&a, &x) - quad_form_sym(&a, &x)).abs() < 1e-12);
    }

    #[test]
    fn transpose_product_accumulates() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![1.0; 3];
        mat_t_vec_add(&a, 3, &[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-2.0, -2.0, -2.0]);
    }
}
