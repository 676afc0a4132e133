//! Dense kernels and small-matrix factorizations.
//!
//! All kernels work on row-major slices and accumulate in a fixed order, so a
//! row's result never depends on which other rows share the batch.

use ndarray::{Array1, Array2};

use crate::error::{shape_err, Error, Result};

/// `out[r, :] += sum_k a[r, k] * b[k, :]` with `a: rows x inner`, `b: inner x cols`.
pub(crate) fn gemm_acc(a: &[f64], inner: usize, b: &[f64], cols: usize, out: &mut [f64]) {
    debug_assert_eq!(b.len(), inner * cols);
    for (a_row, out_row) in a.chunks_exact(inner).zip(out.chunks_exact_mut(cols)) {
        for (&a_rk, b_row) in a_row.iter().zip(b.chunks_exact(cols)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_rk * bv;
            }
        }
    }
}

/// `out[r, i] = sum_o a[r, o] * b[i, o]` with `a: rows x m`, `b: n x m`.
pub(crate) fn gemm_bt(a: &[f64], m: usize, b: &[f64], out: &mut [f64]) {
    let n = b.len() / m;
    for (a_row, out_row) in a.chunks_exact(m).zip(out.chunks_exact_mut(n)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(m)) {
            *o = dot(a_row, b_row);
        }
    }
}

/// `out[i, :] += sum_r a[r, i] * b[r, :]` with `a: rows x n`, `b: rows x m`.
pub(crate) fn gemm_at_acc(a: &[f64], n: usize, b: &[f64], m: usize, out: &mut [f64]) {
    for (a_row, b_row) in a.chunks_exact(n).zip(b.chunks_exact(m)) {
        for (&a_ri, out_row) in a_row.iter().zip(out.chunks_exact_mut(m)) {
            if a_ri == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = sigma`.
pub fn cholesky(sigma: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, m) = sigma.dim();
    if n != m {
        return shape_err(format!("cholesky needs a square matrix, got {n}x{m}"));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (sigma[[i, j]], sigma[[j, i]]);
            if (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::Domain(format!(
                    "cholesky input not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = sigma[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = sigma[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: &Array2<f64>, b: &[f64]) -> Array1<f64> {
    let n = b.len();
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solves `Lᵀ x = y` for lower-triangular `L`.
pub fn solve_upper_t(l: &Array2<f64>, y: &[f64]) -> Array1<f64> {
    let n = y.len();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Precomputed quantities of a positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    pub chol: Array2<f64>,
    pub inverse: Array2<f64>,
    pub log_det: f64,
}

impl SpdFactor {
    pub fn new(sigma: &Array2<f64>) -> Result<Self> {
        let chol = cholesky(sigma)?;
        let n = chol.nrows();
        let mut inverse = Array2::zeros((n, n));
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let y = solve_lower(&chol, &e);
            let x = solve_upper_t(&chol, y.as_slice().unwrap());
            inverse.column_mut(c).assign(&x);
        }
        let log_det = 2.0 * chol.diag().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            chol,
            inverse,
            log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    pub fn is_identity(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| self.chol[[i, j]] == if i == j { 1.0 } else { 0.0 }))
    }

    /// `vᵀ Σ⁻¹ v`
    pub fn quad_inv(&self, v: &[f64]) -> f64 {
        let y = solve_lower(&self.chol, v);
        y.iter().map(|t| t * t).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn reconstruct(l: &Array2<f64>) -> Array2<f64> {
        l.dot(&l.t())
    }

    #[test]
    fn cholesky_identity() {
        let eye = Array2::<f64>::eye(4);
        assert_eq!(cholesky(&eye).unwrap(), eye);
    }

    #[test]
    fn cholesky_two_by_two_hand_value() {
        let s = array![[1.0, 0.6], [0.6, 1.0]];
        let l = cholesky(&s).unwrap();
        assert!((l[[0, 0]] - 1.0).abs() < 1e-15);
        assert!((l[[1, 0]] - 0.6).abs() < 1e-15);
        assert!((l[[1, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(l[[0, 1]], 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite_and_names_pivot() {
        let s = array![[1.0, 1.1], [1.1, 1.0]];
        match cholesky(&s) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected decomposition error, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_reconstruction_error_is_tiny() {
        let k = 6;
        let mut s = Array2::<f64>::from_elem((k, k), 0.35);
        for i in 0..k {
            s[[i, i]] = 1.0 + i as f64 * 0.1;
        }
        let l = cholesky(&s).unwrap();
        let err = (&reconstruct(&l) - &s)
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10);
    }

    #[test]
    fn spd_inverse_and_logdet() {
        let s = array![[4.0, 1.0], [1.0, 3.0]];
        let f = SpdFactor::new(&s).unwrap();
        let prod = s.dot(&f.inverse);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[[i, j]] - want).abs() < 1e-14);
            }
        }
        assert!((f.log_det - 11.0_f64.ln()).abs() < 1e-14);
        let v = [1.0, -2.0];
        let direct = {
            let w = f.inverse.dot(&array![1.0, -2.0]);
            1.0 * w[0] - 2.0 * w[1]
        };
        assert!((f.quad_inv(&v) - direct).abs() < 1e-13);
    }

    #[test]
    fn kernels_agree_with_ndarray() {
        let a = array![[1.0, 2.0, -1.0], [0.5, -3.0, 2.0]];
        let b = array![[1.0, 0.0], [2.0, 1.0], [-1.0, 4.0]];
        let mut out = vec![0.0; 4];
        gemm_acc(a.as_slice().unwrap(), 3, b.as_slice().unwrap(), 2, &mut out);
        let want = a.dot(&b);
        assert_eq!(out, want.as_slice().unwrap());

        let mut bt = vec![0.0; 6];
        let c = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let d = array![[1.0, -1.0], [0.0, 2.0]];
        gemm_bt(c.as_slice().unwrap(), 2, d.as_slice().unwrap(), &mut bt);
        assert_eq!(bt, c.dot(&d.t()).as_slice().unwrap());

        let mut at = vec![0.0; 6];
        gemm_at_acc(a.as_slice().unwrap(), 3, d.as_slice().unwrap(), 2, &mut at);
        assert_eq!(at, a.t().dot(&d).as_slice().unwrap());
    }
}
