//! Centerings, scalings and covariance functions of the limit processes.
//!
//! Branching-process limits (`W1`, `W2`, `Ws`, `W_{J,k}`, `V_J`) are computed from
//! the Jordan decomposition and quadrature; urn limits (`Y1`, `Y2`, `Ys`,
//! `Y_{J,k}`, `Z_J`) are affine images of them.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{binomial, c, factorial, real_part, to_complex, to_complex_vec, CMat, RMat, RVec};
use crate::quad::{integrate, integrate_to_infinity, QuadError, DEFAULT_QUAD_TOL, DEFAULT_T_MAX};
use crate::sim::TimeScale;
use crate::spectral::{EigenClass, SpectralDecomposition, SpectralError, UrnSubcase};
use crate::urn::{mean_matrix, ReplacementStructure, UrnError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitError {
    #[error(transparent)]
    Urn(#[from] UrnError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error("times must satisfy 0 <= t1 <= t2, got t1 = {t1}, t2 = {t2}")]
    TimeOrder { t1: f64, t2: f64 },
    #[error("time {t} outside the domain [0, {bound}) where the urn still has mass")]
    OutsideDomain { t: f64, bound: f64 },
    #[error("time {0} must be positive for this law")]
    NonPositiveTime(f64),
    #[error("no small eigenvalues; the small-component law is undefined")]
    NoSmallComponents,
    #[error("no {0} block")]
    NoBlock(&'static str),
    #[error("block {0} is not {1}")]
    WrongClass(usize, &'static str),
    #[error("kappa = {kappa} outside 1..={m}")]
    Kappa { kappa: usize, m: usize },
    #[error("the balanced eigenvalue block for the colour weights was not identified")]
    NoABlock,
    #[error("law {law} does not apply to subcase {subcase}")]
    SubcaseMismatch { law: Law, subcase: UrnSubcase },
    #[error("oscillatory composition needs a non-real eigenvalue")]
    RealEigenvalue,
    #[error("mu has {got} entries, structure has {expected} colours")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Law {
    W1,
    W2,
    Ws,
    WJk,
    VJ,
    Y1,
    Y2,
    Ys,
    YJk,
    Yc,
    ZJ,
    Zl,
    ZS,
}

impl std::fmt::Display for Law {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Law {
    pub const ALL: [Law; 13] = [
        Law::W1,
        Law::W2,
        Law::Ws,
        Law::WJk,
        Law::VJ,
        Law::Y1,
        Law::Y2,
        Law::Ys,
        Law::YJk,
        Law::Yc,
        Law::ZJ,
        Law::Zl,
        Law::ZS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Law::W1 => "W1",
            Law::W2 => "W2",
            Law::Ws => "Ws",
            Law::WJk => "WJk",
            Law::VJ => "VJ",
            Law::Y1 => "Y1",
            Law::Y2 => "Y2",
            Law::Ys => "Ys",
            Law::YJk => "YJk",
            Law::Yc => "Yc",
            Law::ZJ => "ZJ",
            Law::Zl => "Zl",
            Law::ZS => "ZS",
        }
    }

    /// Laws that do not depend on time.
    pub fn is_time_free(self) -> bool {
        matches!(self, Law::VJ | Law::ZJ | Law::Zl | Law::ZS)
    }

    pub fn parse(s: &str) -> Option<Law> {
        Law::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
    }
}

/// Covariance `Cov(X(t2), conj X(t1))` and pseudo-covariance `Cov(X(t2), X(t1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitCovariance {
    pub law: Law,
    pub times: Vec<f64>,
    pub blocks: Vec<usize>,
    pub kappa: Vec<usize>,
    pub cov: CMat,
    pub pseudo_cov: CMat,
    pub quad_error: f64,
    pub horizon: Option<f64>,
}

impl LimitCovariance {
    fn real(law: Law, times: Vec<f64>, cov: RMat, quad_error: f64, horizon: Option<f64>) -> Self {
        let cov = to_complex(&cov);
        Self {
            law,
            times,
            blocks: Vec::new(),
            kappa: Vec::new(),
            pseudo_cov: cov.clone(),
            cov,
            quad_error,
            horizon,
        }
    }

    pub fn real_cov(&self) -> RMat {
        real_part(&self.cov)
    }
}

/// `int_0^{t1} (t1 - v)^p (t2 - v)^q v^r dv` in closed form.
pub fn polynomial_integral(p: usize, q: usize, r: usize, t1: f64, t2: f64) -> f64 {
    // (t2 - v) = (t2 - t1) + (t1 - v), then the Beta integral
    let gap = t2 - t1;
    (0..=q)
        .map(|k| {
            let a = p + k;
            binomial(q, k)
                * gap.powi((q - k) as i32)
                * t1.powi((a + r + 1) as i32)
                * factorial(a)
                * factorial(r)
                / factorial(a + r + 1)
        })
        .sum()
}

/// `Re(Y) cos(phi) - Im(Y) sin(phi)` with `phi = Im(lambda) log(n/N) t / S`.
pub fn oscillatory_compose(
    lambda: Complex64,
    s: f64,
    n: f64,
    big_n: f64,
    t: f64,
    re_part: &[f64],
    im_part: &[f64],
) -> Result<Vec<f64>, LimitError> {
    if lambda.im == 0.0 {
        return Err(LimitError::RealEigenvalue);
    }
    let phi = lambda.im * (n / big_n).ln() * t / s;
    let (sin, cos) = phi.sin_cos();
    Ok(re_part
        .iter()
        .zip(im_part)
        .map(|(re, im)| re * cos - im * sin)
        .collect())
}

fn flatten_real(m: &RMat) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn unflatten_real(v: &[f64], d: usize) -> RMat {
    RMat::from_column_slice(d, d, v)
}

fn flatten_complex(m: &CMat) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * m.len());
    out.extend(m.iter().map(|z| z.re));
    out.extend(m.iter().map(|z| z.im));
    out
}

fn unflatten_complex(v: &[f64], d: usize) -> CMat {
    let n = d * d;
    CMat::from_iterator(d, d, (0..n).map(|k| Complex64::new(v[k], v[n + k])))
}

fn symmetrize(m: &RMat) -> RMat {
    (m + m.transpose()) * 0.5
}

/// Everything the covariance formulas need for one structure and initial
/// proportion vector `mu`.
#[derive(Debug, Clone)]
pub struct LimitContext {
    structure: ReplacementStructure,
    dec: SpectralDecomposition,
    mu: RVec,
    moments: Vec<RMat>,
    balance: Option<f64>,
    beta1: f64,
    quad_tol: f64,
    t_max: f64,
}

impl LimitContext {
    pub fn new(structure: &ReplacementStructure, mu: &[f64]) -> Result<Self, LimitError> {
        let dec = mean_matrix(structure).spectral()?.clone();
        Self::with_decomposition(structure, mu, dec)
    }

    pub fn with_decomposition(
        structure: &ReplacementStructure,
        mu: &[f64],
        dec: SpectralDecomposition,
    ) -> Result<Self, LimitError> {
        let d = structure.dim();
        if mu.len() != d {
            return Err(LimitError::Dimension {
                expected: d,
                got: mu.len(),
            });
        }
        let moments = (0..d)
            .map(|i| structure.second_moment(i))
            .collect::<Result<Vec<_>, _>>()?;
        let beta1 = structure.weights().iter().zip(mu).map(|(a, m)| a * m).sum();
        Ok(Self {
            structure: structure.clone(),
            dec,
            mu: RVec::from_column_slice(mu),
            moments,
            balance: structure.balance(),
            beta1,
            quad_tol: DEFAULT_QUAD_TOL,
            t_max: DEFAULT_T_MAX,
        })
    }

    pub fn with_tolerance(mut self, quad_tol: f64) -> Self {
        self.quad_tol = quad_tol;
        self
    }

    pub fn decomposition(&self) -> &SpectralDecomposition {
        &self.dec
    }

    pub fn structure(&self) -> &ReplacementStructure {
        &self.structure
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn quad_tol(&self) -> f64 {
        self.quad_tol
    }

    pub fn balance(&self) -> Result<f64, LimitError> {
        self.balance.ok_or(LimitError::Urn(UrnError::NotBalanced))
    }

    pub fn mu(&self) -> &RVec {
        &self.mu
    }

    fn a(&self) -> &RMat {
        self.dec.matrix()
    }

    /// `sum_i a_i w_i E[xi_i xi_i']`.
    pub fn weighted_second_moment(&self, w: &RVec) -> RMat {
        let d = self.dim();
        let mut b = RMat::zeros(d, d);
        for (i, m) in self.moments.iter().enumerate() {
            b += m * (self.structure.weights()[i] * w[i]);
        }
        b
    }

    // ----- centerings and scalings -----

    /// `N e^{A S^{-1} l(n, t)} mu` with `l = l1` on the linear time scale and
    /// `l = l2` on the geometric one.
    pub fn centering(&self, scale: TimeScale, n: f64, big_n: f64, t: f64) -> Result<RVec, LimitError> {
        let s = self.balance()?;
        let arg = match scale {
            TimeScale::Linear => s * n * t / (self.beta1 * big_n),
            TimeScale::Geometric => s * (n / big_n).powf(t) / self.beta1,
        };
        if 1.0 + arg <= 0.0 {
            return Err(LimitError::OutsideDomain {
                t,
                bound: -self.beta1 * big_n / (s * n),
            });
        }
        let time = arg.ln_1p() / s;
        Ok(self.dec.expm(time) * &self.mu * big_n)
    }

    // ----- branching-process laws -----

    fn check_order(t1: f64, t2: f64) -> Result<(), LimitError> {
        if !(0.0 <= t1 && t1 <= t2) {
            return Err(LimitError::TimeOrder { t1, t2 });
        }
        Ok(())
    }

    pub fn cov_w1(&self, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        Self::check_order(t1, t2)?;
        let b = self.weighted_second_moment(&self.mu) * t1;
        Ok(LimitCovariance::real(Law::W1, vec![t1, t2], b, 0.0, None))
    }

    /// `int_0^t e^{A(t-v)} B(e^{Av} x0) e^{A'(t-v)} dv`.
    fn accumulated_variance(&self, x0: &RVec, t: f64) -> Result<(RMat, f64), LimitError> {
        let d = self.dim();
        if t == 0.0 {
            return Ok((RMat::zeros(d, d), 0.0));
        }
        let r = integrate(
            |v| {
                let e = self.dec.expm(t - v);
                let w = self.dec.expm(v) * x0;
                flatten_real(&(&e * self.weighted_second_moment(&w) * e.transpose()))
            },
            0.0,
            t,
            self.quad_tol,
        )?;
        Ok((symmetrize(&unflatten_real(&r.value, d)), r.error))
    }

    pub fn cov_w2(&self, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        Self::check_order(t1, t2)?;
        let (acc, err) = self.accumulated_variance(&self.mu, t1)?;
        let cov = self.dec.expm(t2 - t1) * acc;
        Ok(LimitCovariance::real(Law::W2, vec![t1, t2], cov, err, None))
    }

    /// Mean `e^{At} x0` and covariance of the branching process started from `x0`.
    pub fn mcbp_second_moment(&self, x0: &[f64], t: f64) -> Result<(RVec, RMat), LimitError> {
        if t < 0.0 {
            return Err(LimitError::TimeOrder { t1: 0.0, t2: t });
        }
        let x0 = RVec::from_column_slice(x0);
        let mean = self.dec.expm(t) * &x0;
        let (cov, _) = self.accumulated_variance(&x0, t)?;
        Ok((mean, cov))
    }

    pub fn small_blocks(&self) -> Vec<usize> {
        (0..self.dec.blocks().len())
            .filter(|&j| self.dec.block_class(j) == EigenClass::Small)
            .collect()
    }

    fn v_mu(&self) -> RVec {
        self.dec.v_of_mu(self.mu.as_slice())
    }

    /// `B = sum_i a_i v(mu)_i E[xi_i xi_i']`.
    pub fn b_matrix(&self) -> RMat {
        self.weighted_second_moment(&self.v_mu())
    }

    /// Stationary part `int_0^oo P_s e^{Av} B e^{A'v} P_s' e^{-lambda1 v} dv`.
    fn ws_stationary(&self) -> Result<(RMat, f64, Option<f64>), LimitError> {
        let small = self.small_blocks();
        if small.is_empty() {
            return Err(LimitError::NoSmallComponents);
        }
        let d = self.dim();
        let b = to_complex(&self.b_matrix());
        let l1 = self.dec.lambda1();
        let r = integrate_to_infinity(
            |v| {
                let mut pe = CMat::zeros(d, d);
                for &j in &small {
                    pe += self.dec.block_exp(j, v);
                }
                let m = &pe * &b * pe.transpose() * c((-l1 * v).exp());
                flatten_real(&real_part(&m))
            },
            1.0,
            self.quad_tol,
            self.t_max,
        )?;
        Ok((symmetrize(&unflatten_real(&r.value, d)), r.error, r.horizon))
    }

    /// `Cov(Ws(t2), Ws(t1))` for `t1 <= t2` (any real times).
    pub fn cov_ws(&self, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        if t1 > t2 {
            return Err(LimitError::TimeOrder { t1, t2 });
        }
        let (m, err, horizon) = self.ws_stationary()?;
        let l1 = self.dec.lambda1();
        let shift = self.dec.expm(t2 - t1) * (-l1 * (t2 - t1) / 2.0).exp();
        Ok(LimitCovariance::real(Law::Ws, vec![t1, t2], shift * m, err, horizon))
    }

    fn require_class(&self, j: usize, class: EigenClass, name: &'static str) -> Result<(), LimitError> {
        self.dec.block(j)?;
        if self.dec.block_class(j) != class {
            return Err(LimitError::WrongClass(j, name));
        }
        Ok(())
    }

    /// `Cov(W_{J2,k2}(t2), conj W_{J1,k1}(t1))` and the unconjugated version.
    pub fn cross_cov_critical(
        &self,
        j1: usize,
        k1: usize,
        j2: usize,
        k2: usize,
        t1: f64,
        t2: f64,
    ) -> Result<LimitCovariance, LimitError> {
        Self::check_order(t1, t2)?;
        for (j, k) in [(j1, k1), (j2, k2)] {
            self.require_class(j, EigenClass::Critical, "critical")?;
            let m = self.dec.blocks()[j].m;
            if k == 0 || k > m {
                return Err(LimitError::Kappa { kappa: k, m });
            }
        }
        let d = self.dim();
        let b1 = &self.dec.blocks()[j1];
        let b2 = &self.dec.blocks()[j2];
        let tol = 1e-8 * self.a().norm().max(1.0);
        let n = self.dec.nilpotent_complex();
        let left = crate::linalg::mat_pow(&n, b2.m - 1) * &b2.projector;
        let right = crate::linalg::mat_pow(&n, b1.m - 1) * &b1.projector;
        let b = to_complex(&self.b_matrix());
        let weight = polynomial_integral(k1 - 1, k2 - 1, self.dec.m1() - 1, t1, t2)
            / (factorial(k1 - 1) * factorial(k2 - 1));
        let cov = if (b1.lambda - b2.lambda).norm() <= tol {
            &left * &b * right.adjoint() * c(weight)
        } else {
            CMat::zeros(d, d)
        };
        let pseudo = if (b1.lambda - b2.lambda.conj()).norm() <= tol {
            &left * &b * right.transpose() * c(weight)
        } else {
            CMat::zeros(d, d)
        };
        Ok(LimitCovariance {
            law: Law::WJk,
            times: vec![t1, t2],
            blocks: vec![j1, j2],
            kappa: vec![k1, k2],
            cov,
            pseudo_cov: pseudo,
            quad_error: 0.0,
            horizon: None,
        })
    }

    pub fn cov_wjk(&self, j: usize, kappa: usize, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        self.cross_cov_critical(j, kappa, j, kappa, t1, t2)
    }

    pub fn large_blocks(&self) -> Vec<usize> {
        (0..self.dec.blocks().len())
            .filter(|&j| self.dec.block_class(j) == EigenClass::Large)
            .collect()
    }

    /// `Cov(V_{J}, conj V_{K})` and `Cov(V_J, V_K)` for large blocks `J`, `K`.
    pub fn cov_v(&self, j: usize, k: usize) -> Result<LimitCovariance, LimitError> {
        self.require_class(j, EigenClass::Large, "large")?;
        self.require_class(k, EigenClass::Large, "large")?;
        let d = self.dim();
        let r = integrate_to_infinity(
            |v| {
                let w = self.dec.expm(v) * &self.mu;
                let b = to_complex(&self.weighted_second_moment(&w));
                let lj = self.dec.block_exp(j, -v);
                let lk = self.dec.block_exp(k, -v);
                let mut out = flatten_complex(&(&lj * &b * lk.adjoint()));
                out.extend(flatten_complex(&(&lj * &b * lk.transpose())));
                out
            },
            1.0 / self.dec.lambda1().abs().max(1e-3),
            self.quad_tol,
            self.t_max,
        )?;
        let n = 2 * d * d;
        Ok(LimitCovariance {
            law: Law::VJ,
            times: Vec::new(),
            blocks: vec![j, k],
            kappa: Vec::new(),
            cov: unflatten_complex(&r.value[..n], d),
            pseudo_cov: unflatten_complex(&r.value[n..], d),
            quad_error: r.error,
            horizon: r.horizon,
        })
    }

    pub fn var_vj(&self, j: usize) -> Result<LimitCovariance, LimitError> {
        self.cov_v(j, j)
    }

    // ----- urn laws -----

    /// `Cov(Y1(t2), Y1(t1))` from the closed form.
    pub fn cov_y1(&self, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        Self::check_order(t1, t2)?;
        self.balance()?;
        let b = &self.beta1;
        let am = self.a() * &self.mu;
        let cov = (self.weighted_second_moment(&self.mu) / *b - &am * am.transpose() / (b * b)) * t1;
        Ok(LimitCovariance::real(Law::Y1, vec![t1, t2], cov, 0.0, None))
    }

    /// `beta1^{-1/2} I - S^{-1} beta1^{-3/2} A mu a'`, mapping `W1` to `Y1`.
    pub fn y1_map(&self) -> Result<RMat, LimitError> {
        let s = self.balance()?;
        let d = self.dim();
        let a = RVec::from_column_slice(self.structure.weights());
        let am = self.a() * &self.mu;
        Ok(RMat::identity(d, d) / self.beta1.sqrt() - am * a.transpose() / (s * self.beta1.powf(1.5)))
    }

    fn tr_time(&self, t: f64) -> Result<f64, LimitError> {
        let s = self.balance()?;
        let arg = s * t / self.beta1;
        if t < 0.0 || 1.0 + arg <= 0.0 {
            return Err(LimitError::OutsideDomain {
                t,
                bound: if s < 0.0 { -self.beta1 / s } else { f64::INFINITY },
            });
        }
        Ok(arg.ln_1p() / s)
    }

    /// `I - e^{A s(t)} A mu a' / (beta1 S + S^2 t)`, mapping `W2(s(t))` to `Y2(t)`.
    pub fn y2_map(&self, t: f64) -> Result<RMat, LimitError> {
        let s = self.balance()?;
        let time = self.tr_time(t)?;
        let d = self.dim();
        let a = RVec::from_column_slice(self.structure.weights());
        let v = self.dec.expm(time) * (self.a() * &self.mu) / (self.beta1 * s + s * s * t);
        Ok(RMat::identity(d, d) - v * a.transpose())
    }

    pub fn cov_y2(&self, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        Self::check_order(t1, t2)?;
        let (s1, s2) = (self.tr_time(t1)?, self.tr_time(t2)?);
        let w = self.cov_w2(s1, s2)?;
        let cov = self.y2_map(t2)? * w.real_cov() * self.y2_map(t1)?.transpose();
        Ok(LimitCovariance::real(Law::Y2, vec![t1, t2], cov, w.quad_error, None))
    }

    /// `Cov(Ys(log t2), Ys(log t1))` for `0 < t1 <= t2`.
    pub fn cov_ys(&self, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        if t1 <= 0.0 {
            return Err(LimitError::NonPositiveTime(t1));
        }
        Self::check_order(t1, t2)?;
        let s = self.balance()?;
        let u = |t: f64| (s * t / self.beta1).ln() / s;
        let w = self.cov_ws(u(t1), u(t2))?;
        let cov = w.real_cov() * (s / self.beta1);
        Ok(LimitCovariance::real(Law::Ys, vec![t1, t2], cov, w.quad_error, w.horizon))
    }

    fn yjk_factor(&self, j: usize, kappa: usize) -> Result<Complex64, LimitError> {
        let s = self.balance()?;
        let lambda = self.dec.block(j)?.lambda;
        Ok(c(s.powf(-(kappa as f64 - 0.5))) * (lambda / s * (s / self.beta1).ln()).exp())
    }

    /// Urn critical-component cross covariance between `Y_{J1,k1}(t1)` and `Y_{J2,k2}(t2)`.
    pub fn cross_cov_yjk(
        &self,
        j1: usize,
        k1: usize,
        j2: usize,
        k2: usize,
        t1: f64,
        t2: f64,
    ) -> Result<LimitCovariance, LimitError> {
        let w = self.cross_cov_critical(j1, k1, j2, k2, t1, t2)?;
        let f1 = self.yjk_factor(j1, k1)?;
        let f2 = self.yjk_factor(j2, k2)?;
        Ok(LimitCovariance {
            law: Law::YJk,
            cov: w.cov * (f2 * f1.conj()),
            pseudo_cov: w.pseudo_cov * (f2 * f1),
            ..w
        })
    }

    pub fn cov_yjk(&self, j: usize, kappa: usize, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        self.cross_cov_yjk(j, kappa, j, kappa, t1, t2)
    }

    /// Blocks with eigenvalue `lambda` and size equal to the largest such size
    /// among the eigenvalues of the given class.
    fn top_blocks(&self, lambda: Complex64, candidates: &[usize]) -> (Vec<usize>, usize) {
        let tol = 1e-8 * self.a().norm().max(1.0);
        let m = candidates
            .iter()
            .map(|&j| self.dec.blocks()[j].m)
            .max()
            .unwrap_or(1);
        let blocks = candidates
            .iter()
            .copied()
            .filter(|&j| {
                let b = &self.dec.blocks()[j];
                (b.lambda - lambda).norm() <= tol && b.m == m
            })
            .collect();
        (blocks, m)
    }

    /// `Y_{c,lambda}(t) = sum_i Y_{J_i, m_c}(t)` over the largest critical blocks.
    pub fn cov_yc(&self, lambda: Complex64, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        let critical: Vec<usize> = (0..self.dec.blocks().len())
            .filter(|&j| self.dec.block_class(j) == EigenClass::Critical)
            .collect();
        let (blocks, m) = self.top_blocks(lambda, &critical);
        let d = self.dim();
        let mut cov = CMat::zeros(d, d);
        let mut pseudo = CMat::zeros(d, d);
        for &j1 in &blocks {
            for &j2 in &blocks {
                let x = self.cross_cov_yjk(j1, m, j2, m, t1, t2)?;
                cov += x.cov;
                pseudo += x.pseudo_cov;
            }
        }
        Ok(LimitCovariance {
            law: Law::Yc,
            times: vec![t1, t2],
            blocks,
            kappa: vec![m],
            cov,
            pseudo_cov: pseudo,
            quad_error: 0.0,
            horizon: None,
        })
    }

    fn z_factor(&self, j: usize) -> Result<Complex64, LimitError> {
        let s = self.balance()?;
        let lambda = self.dec.block(j)?.lambda;
        Ok((lambda / s * (s / self.beta1).ln()).exp())
    }

    /// `Cov(Z_J, conj Z_K)` and `Cov(Z_J, Z_K)` with
    /// `Z_J = (S/beta1)^{lambda/S} (V_J - (beta1 S)^{-1} V1 A P_J mu)` and `V1 = a . V_a`.
    pub fn cov_z(&self, j: usize, k: usize) -> Result<LimitCovariance, LimitError> {
        let s = self.balance()?;
        let ja = self.dec.a_block().ok_or(LimitError::NoABlock)?;
        let a = to_complex_vec(self.structure.weights());
        let mu = to_complex_vec(self.mu.as_slice());
        let am = to_complex(self.a());
        let cj = &am * &self.dec.blocks()[j].projector * &mu;
        let ck = &am * &self.dec.blocks()[k].projector * &mu;
        let g = c(1.0 / (self.beta1 * s));

        let vjk = self.cov_v(j, k)?;
        let vja = self.cov_v(j, ja)?;
        let vak = self.cov_v(ja, k)?;
        let vaa = self.cov_v(ja, ja)?;
        // V_a is real, so conjugated and plain covariances with it coincide
        let va1_j = &vja.cov * &a; // Cov(V_J, V1)
        let v1_k = a.transpose() * &vak.cov; // Cov(V1, conj V_K)
        let v1_k_plain = a.transpose() * &vak.pseudo_cov;
        let var1 = (a.transpose() * &vaa.cov * &a)[(0, 0)];

        let cov = &vjk.cov - &va1_j * ck.adjoint() * g - &cj * &v1_k * g + &cj * ck.adjoint() * (g * g * var1);
        let pseudo = &vjk.pseudo_cov - &va1_j * ck.transpose() * g - &cj * &v1_k_plain * g
            + &cj * ck.transpose() * (g * g * var1);
        let (fj, fk) = (self.z_factor(j)?, self.z_factor(k)?);
        Ok(LimitCovariance {
            law: Law::ZJ,
            times: Vec::new(),
            blocks: vec![j, k],
            kappa: Vec::new(),
            cov: cov * (fj * fk.conj()),
            pseudo_cov: pseudo * (fj * fk),
            quad_error: vjk.quad_error + vja.quad_error + vak.quad_error + vaa.quad_error,
            horizon: vjk.horizon,
        })
    }

    fn z_sum(&self, law: Law, blocks: &[usize], power: usize) -> Result<LimitCovariance, LimitError> {
        let d = self.dim();
        let s = self.balance()?;
        let np = self.dec.nilpotent_power(power) * c(1.0 / (s.powi(power as i32) * factorial(power)));
        let mut cov = CMat::zeros(d, d);
        let mut pseudo = CMat::zeros(d, d);
        let mut err = 0.0;
        for &j in blocks {
            for &k in blocks {
                let z = self.cov_z(j, k)?;
                cov += &np * z.cov * np.transpose();
                pseudo += &np * z.pseudo_cov * np.transpose();
                err += z.quad_error;
            }
        }
        Ok(LimitCovariance {
            law,
            times: Vec::new(),
            blocks: blocks.to_vec(),
            kappa: Vec::new(),
            cov,
            pseudo_cov: pseudo,
            quad_error: err,
            horizon: None,
        })
    }

    /// Large-urn limit with `S` simple: blocks of `lambda` with the largest size `m`,
    /// weighted by `N_A^{m-1} / (S^{m-1} (m-1)!)`.
    pub fn cov_zl(&self, lambda: Complex64) -> Result<LimitCovariance, LimitError> {
        let l1 = c(self.dec.lambda1());
        let tol = 1e-8 * self.a().norm().max(1.0);
        let candidates: Vec<usize> = self
            .large_blocks()
            .into_iter()
            .filter(|&j| (self.dec.blocks()[j].lambda - l1).norm() > tol)
            .collect();
        let (blocks, m) = self.top_blocks(lambda, &candidates);
        self.z_sum(Law::Zl, &blocks, m - 1)
    }

    /// Large-urn limit with `S` non-simple: `Z_S = sum_{J in J_S} Z_J`.
    pub fn cov_zs(&self) -> Result<LimitCovariance, LimitError> {
        let blocks = self.dec.lambda1_blocks();
        self.z_sum(Law::ZS, &blocks, 0)
    }

    /// The leading large eigenvalue other than `S` (largest real part).
    pub fn leading_large_eigenvalue(&self) -> Option<Complex64> {
        let l1 = c(self.dec.lambda1());
        let tol = 1e-8 * self.a().norm().max(1.0);
        self.dec
            .eigenvalues()
            .into_iter()
            .filter(|z| (*z - l1).norm() > tol)
            .find(|z| self.dec.eigen_class(*z, self.dec.tol_class()) == EigenClass::Large)
    }

    /// Any law by name; `block` defaults to the first critical block (WJk, YJk,
    /// Yc) or the first large block other than `S` (VJ, ZJ, Zl), `kappa` to 1.
    pub fn law_cov(
        &self,
        law: Law,
        block: Option<usize>,
        kappa: Option<usize>,
        t1: f64,
        t2: f64,
    ) -> Result<LimitCovariance, LimitError> {
        let kappa = kappa.unwrap_or(1);
        let critical = || -> Result<usize, LimitError> {
            match block {
                Some(j) => Ok(j),
                None => (0..self.dec.blocks().len())
                    .find(|&j| self.dec.block_class(j) == EigenClass::Critical)
                    .ok_or(LimitError::NoBlock("critical")),
            }
        };
        let large = || -> Result<usize, LimitError> {
            match block {
                Some(j) => Ok(j),
                None => self
                    .large_blocks()
                    .into_iter()
                    .find(|&j| !self.dec.is_lambda1(j))
                    .ok_or(LimitError::NoBlock("large non-leading")),
            }
        };
        match law {
            Law::W1 => self.cov_w1(t1, t2),
            Law::W2 => self.cov_w2(t1, t2),
            Law::Ws => self.cov_ws(t1, t2),
            Law::WJk => self.cov_wjk(critical()?, kappa, t1, t2),
            Law::VJ => self.var_vj(large()?),
            Law::Y1 => self.cov_y1(t1, t2),
            Law::Y2 => self.cov_y2(t1, t2),
            Law::Ys => self.cov_ys(t1, t2),
            Law::YJk => self.cov_yjk(critical()?, kappa, t1, t2),
            Law::Yc => {
                let lambda = match block {
                    Some(j) => self.dec.block(j)?.lambda,
                    None => c(self.dec.lambda1() / 2.0),
                };
                self.cov_yc(lambda, t1, t2)
            }
            Law::ZJ => {
                let j = large()?;
                self.cov_z(j, j)
            }
            Law::Zl => {
                let lambda = match block {
                    Some(j) => self.dec.block(j)?.lambda,
                    None => self.leading_large_eigenvalue().ok_or(LimitError::NoBlock("large non-leading"))?,
                };
                self.cov_zl(lambda)
            }
            Law::ZS => self.cov_zs(),
        }
    }

    /// Covariance of the headline urn limit for `subcase`, at times `t1 <= t2`.
    pub fn urn_limit_cov(&self, subcase: UrnSubcase, t1: f64, t2: f64) -> Result<LimitCovariance, LimitError> {
        match subcase {
            UrnSubcase::SmallUrn => {
                // t^{1/2} Ys(log t) is the full fluctuation when only small components exist
                let y = self.cov_ys(t1, t2)?;
                Ok(LimitCovariance {
                    cov: y.cov * c((t1 * t2).sqrt()),
                    pseudo_cov: y.pseudo_cov * c((t1 * t2).sqrt()),
                    ..y
                })
            }
            UrnSubcase::CriticalUrn => {
                let lambda = c(self.dec.lambda1() / 2.0);
                self.cov_yc(lambda, t1, t2)
            }
            UrnSubcase::LargeUrnSimple => {
                let lambda = self.leading_large_eigenvalue().ok_or(LimitError::SubcaseMismatch {
                    law: Law::Zl,
                    subcase,
                })?;
                self.cov_zl(lambda)
            }
            UrnSubcase::LargeUrnNonsimple => self.cov_zs(),
        }
    }
}

/// Scalar prefactor and time grid convention of the headline fluctuation result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeScaling {
    pub regime: crate::sim::Regime,
    pub subcase: Option<UrnSubcase>,
    pub scale: TimeScale,
}

impl RegimeScaling {
    pub fn new(regime: crate::sim::Regime, subcase: Option<UrnSubcase>) -> Self {
        Self {
            regime,
            subcase,
            scale: TimeScale::for_regime(regime, subcase),
        }
    }

    /// Prefactor `s(n, N, t)`; `lambda` and `kappa` are the eigenvalue and
    /// log-power index of the component (ignored outside the TSD critical/large cases).
    pub fn prefactor(&self, n: f64, big_n: f64, t: f64, s: f64, lambda: f64, kappa: usize) -> f64 {
        use crate::sim::Regime;
        let ratio = n / big_n;
        match (self.regime, self.subcase) {
            (Regime::Ibd, _) => n.powf(-0.5),
            (Regime::Tr, _) => big_n.powf(-0.5),
            (Regime::Tsd, None) | (Regime::Tsd, Some(UrnSubcase::SmallUrn)) => n.powf(-0.5),
            (Regime::Tsd, Some(UrnSubcase::CriticalUrn)) => {
                big_n.powf(-0.5)
                    * ratio.powf(-lambda * t / s)
                    * ratio.ln().powf(-(kappa as f64 - 0.5))
            }
            (Regime::Tsd, Some(UrnSubcase::LargeUrnSimple)) => {
                big_n.powf(-0.5)
                    * ratio.powf(-lambda * t / s)
                    * (t * ratio.ln()).powf(-(kappa as f64 - 1.0))
            }
            (Regime::Tsd, Some(UrnSubcase::LargeUrnNonsimple)) => big_n.powf(-0.5) * ratio.powf(-t),
        }
    }
}
