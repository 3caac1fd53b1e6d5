//! Small dense complex linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

pub fn to_complex(m: &RMat) -> CMat {
    m.map(c)
}

pub fn to_complex_vec(v: &[f64]) -> CVec {
    CVec::from_iterator(v.len(), v.iter().map(|&x| c(x)))
}

pub fn real_part(m: &CMat) -> RMat {
    m.map(|z| z.re)
}

/// Row-major nested vectors.
pub fn rows(m: &RMat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Option<RMat> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return None;
    }
    Some(RMat::from_fn(n, k, |i, j| rows[i][j]))
}

/// Serializes a real matrix as an array of rows.
pub fn serialize_rows<S: serde::Serializer>(m: &RMat, s: S) -> Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&rows(m), s)
}

pub fn max_imag(m: &CMat) -> f64 {
    m.iter().map(|z| z.im.abs()).fold(0.0, f64::max)
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn conj(m: &CMat) -> CMat {
    m.map(|z| z.conj())
}

/// Conjugate transpose.
pub fn adjoint(m: &CMat) -> CMat {
    m.adjoint()
}

pub fn mat_pow(m: &CMat, k: usize) -> CMat {
    let mut out = CMat::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

pub fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Ratio of extreme singular values; infinite for singular input.
pub fn condition_number(m: &CMat) -> f64 {
    let s = m.clone().svd(false, false).singular_values;
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Orthonormal basis of `{x : m x = 0}` from singular values below `tol`.
pub fn null_space_real(m: &RMat, tol: f64) -> Vec<RVec> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.resize(n, 0.0);
    let mut out = Vec::new();
    for (j, &s) in sv.iter().enumerate() {
        if s <= tol {
            out.push(v_t.row(j).transpose().into_owned());
        }
    }
    out
}

/// Complex analogue of [`null_space_real`].
pub fn null_space_complex(m: &CMat, tol: f64) -> Vec<CVec> {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    sv.resize(n, 0.0);
    let mut out = Vec::new();
    for (j, &s) in sv.iter().enumerate() {
        if s <= tol {
            // rows of V^H are conjugated right singular vectors
            out.push(v_t.row(j).transpose().map(|z| z.conj()));
        }
    }
    out
}

/// Numerical rank with absolute threshold `tol`.
pub fn rank_real(m: &RMat, tol: f64) -> usize {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .filter(|&&s| s > tol)
        .count()
}

/// Hermitian part `(m + m^*) / 2`.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).map(|z| z * 0.5)
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_hermitian_eigenvalue(m: &CMat) -> f64 {
    let h = hermitian_part(m);
    // embed as a real symmetric 2d x 2d matrix [[Re, -Im], [Im, Re]]
    let d = h.nrows();
    let mut r = RMat::zeros(2 * d, 2 * d);
    for i in 0..d {
        for j in 0..d {
            let z = h[(i, j)];
            r[(i, j)] = z.re;
            r[(i + d, j + d)] = z.re;
            r[(i, j + d)] = -z.im;
            r[(i + d, j)] = z.im;
        }
    }
    r.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_spaces() {
        let m = RMat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let ns = null_space_real(&m, 1e-10);
        assert_eq!(ns.len(), 1);
        assert!((&m * &ns[0]).norm() < 1e-12);
        let z = to_complex(&RMat::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        assert_eq!(null_space_complex(&z, 1e-10).len(), 1);
        let zero = CMat::zeros(3, 3);
        assert_eq!(null_space_complex(&zero, 1e-10).len(), 3);
    }

    #[test]
    fn psd_check() {
        let m = to_complex(&RMat::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert!(min_hermitian_eigenvalue(&m).abs() < 1e-12);
        assert_eq!(binomial(4, 2), 6.0);
    }
}
