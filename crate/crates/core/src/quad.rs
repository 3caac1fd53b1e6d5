//! Adaptive Gauss–Kronrod quadrature of vector-valued integrands.
//!
//! Complex matrix integrands are flattened to real vectors by the callers; the
//! error estimate is the max-norm of the Gauss/Kronrod difference.

use std::collections::BinaryHeap;

use thiserror::Error;

pub const DEFAULT_QUAD_TOL: f64 = 1e-9;
pub const DEFAULT_T_MAX: f64 = 1e4;
const MAX_INTERVALS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadError {
    #[error("quadrature did not reach tolerance {tol:e} (estimated error {err:e})")]
    NotConverged { tol: f64, err: f64 },
    #[error("integrand tail has not decayed by T = {t_max}")]
    TailNotDecayed { t_max: f64 },
    #[error("integrand returned a non-finite value at {0}")]
    NonFinite(f64),
}

// 15-point Kronrod abscissae on [-1, 1] (non-negative half) and weights
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// 7-point Gauss weights for the odd-indexed Kronrod nodes
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Integral value with its estimated absolute error and, for improper
/// integrals, the truncation horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadResult {
    pub value: Vec<f64>,
    pub error: f64,
    pub horizon: Option<f64>,
}

struct Panel {
    a: f64,
    b: f64,
    value: Vec<f64>,
    err: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

fn gk15<F>(f: &mut F, a: f64, b: f64) -> Result<Panel, QuadError>
where
    F: FnMut(f64) -> Vec<f64>,
{
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let fc = f(mid);
    let n = fc.len();
    let mut k = vec![0.0; n];
    let mut g = vec![0.0; n];
    for i in 0..n {
        k[i] = WGK[7] * fc[i];
        g[i] = WG[3] * fc[i];
    }
    for j in 0..7 {
        let x = half * XGK[j];
        let f1 = f(mid - x);
        let f2 = f(mid + x);
        for i in 0..n {
            let s = f1[i] + f2[i];
            k[i] += WGK[j] * s;
            if j % 2 == 1 {
                g[i] += WG[j / 2] * s;
            }
        }
    }
    let mut err = 0.0f64;
    for i in 0..n {
        k[i] *= half;
        g[i] *= half;
        if !k[i].is_finite() {
            return Err(QuadError::NonFinite(mid));
        }
        err = err.max((k[i] - g[i]).abs());
    }
    Ok(Panel {
        a,
        b,
        value: k,
        err,
    })
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Integral of `f` over `[a, b]` to absolute-or-relative tolerance `tol`.
pub fn integrate<F>(mut f: F, a: f64, b: f64, tol: f64) -> Result<QuadResult, QuadError>
where
    F: FnMut(f64) -> Vec<f64>,
{
    integrate_inner(&mut f, a, b, tol)
}

fn integrate_inner<F>(f: &mut F, a: f64, b: f64, tol: f64) -> Result<QuadResult, QuadError>
where
    F: FnMut(f64) -> Vec<f64>,
{
    if a == b {
        return Ok(QuadResult {
            value: vec![0.0; f(a).len()],
            error: 0.0,
            horizon: None,
        });
    }
    let first = gk15(f, a, b)?;
    let mut total = first.value.clone();
    let mut err = first.err;
    let mut heap = BinaryHeap::new();
    heap.push(first);
    loop {
        let target = tol * max_norm(&total).max(1.0);
        if err <= target {
            return Ok(QuadResult {
                value: total,
                error: err,
                horizon: None,
            });
        }
        if heap.len() >= MAX_INTERVALS {
            return Err(QuadError::NotConverged { tol, err });
        }
        let worst = heap.pop().expect("heap is non-empty");
        let mid = 0.5 * (worst.a + worst.b);
        let left = gk15(f, worst.a, mid)?;
        let right = gk15(f, mid, worst.b)?;
        for i in 0..total.len() {
            total[i] += left.value[i] + right.value[i] - worst.value[i];
        }
        err += left.err + right.err - worst.err;
        heap.push(left);
        heap.push(right);
        // re-sum errors occasionally to avoid drift from cancellation
        if heap.len() % 64 == 0 {
            err = heap.iter().map(|p| p.err).sum();
        }
    }
}

/// Integral over `[0, oo)` by doubling panels `[0, h], [h, 2h], [2h, 4h], ..`
/// until two consecutive panels fall below tolerance, up to `t_max`.
pub fn integrate_to_infinity<F>(
    mut f: F,
    h: f64,
    tol: f64,
    t_max: f64,
) -> Result<QuadResult, QuadError>
where
    F: FnMut(f64) -> Vec<f64>,
{
    let first = integrate_inner(&mut f, 0.0, h, tol)?;
    let mut total = first.value;
    let mut error = first.error;
    let mut lo = h;
    let mut quiet = 0;
    while quiet < 2 {
        let hi = 2.0 * lo;
        if lo >= t_max {
            return Err(QuadError::TailNotDecayed { t_max });
        }
        let part = integrate_inner(&mut f, lo, hi, tol)?;
        for (t, p) in total.iter_mut().zip(&part.value) {
            *t += p;
        }
        error += part.error;
        if max_norm(&part.value) <= tol * max_norm(&total).max(1.0) {
            quiet += 1;
        } else {
            quiet = 0;
        }
        lo = hi;
    }
    Ok(QuadResult {
        value: total,
        error,
        horizon: Some(lo),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_and_exponentials() {
        let v = integrate(|x| vec![x * x, x.exp()], 0.0, 2.0, 1e-12).unwrap().value;
        assert!((v[0] - 8.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - (2f64.exp() - 1.0)).abs() < 1e-12);
        let v = integrate(|x| vec![x.sqrt()], 0.0, 1.0, 1e-10).unwrap().value;
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn improper() {
        let r = integrate_to_infinity(|x| vec![(-x).exp(), x * (-2.0 * x).exp()], 1.0, 1e-11, 1e4)
            .unwrap();
        assert!(r.horizon.unwrap() > 20.0);
        let v = r.value;
        assert!((v[0] - 1.0).abs() < 1e-10);
        assert!((v[1] - 0.25).abs() < 1e-10);
        assert!(matches!(
            integrate_to_infinity(|_| vec![1.0], 1.0, 1e-9, 100.0),
            Err(QuadError::TailNotDecayed { .. })
        ));
    }
}
