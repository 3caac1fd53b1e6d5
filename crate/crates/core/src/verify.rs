//! Monte Carlo comparison of simulated fluctuations with the limit laws.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

use crate::limits::{LimitContext, LimitError, RegimeScaling};
use crate::linalg::{CMat, RMat};
use crate::rng::{stream, Lane};
use crate::sim::{
    clock_stream, death_times_at, draw_stream, par_replicates, EnsembleResult, EnsembleSpec, Regime,
    SimError, Stepper, TimeScale,
};
use crate::spectral::{SpectralDecomposition, UrnSubcase};
use crate::urn::{ReplacementStructure, UrnError};

/// Absolute Frobenius norm below which a theoretical covariance counts as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Parametric-bootstrap size for the Lilliefors-type normality p-values.
pub const KS_BOOTSTRAP: usize = 199;
/// Bound on enumerated transitions in the sub-urn check.
pub const MAX_ENUMERATION: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Limit(#[from] LimitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Urn(#[from] UrnError),
    #[error("need at least {need} replicates, got {got}")]
    TooFewReplicates { need: usize, got: usize },
    #[error("ensemble grid uses the {got:?} time scale, regime expects {expected:?}")]
    GridConvention { expected: TimeScale, got: TimeScale },
    #[error("subcase {0} needs a Jordan-component projection")]
    MissingProjection(UrnSubcase),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("theoretical covariance is zero but the empirical one has norm {0:e}")]
    DegenerateComparison(f64),
    #[error("outcome space too large to enumerate (more than {0} transitions)")]
    OutcomeSpaceTooLarge(usize),
    #[error("mu cannot be scaled to an integer composition with denominator at most {0}")]
    NoIntegerScale(u64),
    #[error("sweep needs at least {need} points, got {got}")]
    SweepTooShort { need: usize, got: usize },
    #[error("replicate {0} went extinct before the requested death count")]
    Extinct(u64),
}

/// Linear observable applied to `U_n(index) - centering`, with the regime prefactor.
#[derive(Debug, Clone)]
pub struct FluctuationParams {
    pub scaling: RegimeScaling,
    /// Eigenvalue (real part) of the projected component for the TSD critical and large prefactors.
    pub lambda: f64,
    pub kappa: usize,
    pub projection: Option<RMat>,
}

impl FluctuationParams {
    pub fn new(regime: Regime, subcase: Option<UrnSubcase>) -> Self {
        Self {
            scaling: RegimeScaling::new(regime, subcase),
            lambda: 0.0,
            kappa: 1,
            projection: None,
        }
    }

    pub fn with_projection(mut self, projection: RMat, lambda: f64, kappa: usize) -> Self {
        self.projection = Some(projection);
        self.lambda = lambda;
        self.kappa = kappa;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluctuationSamples {
    pub regime: Regime,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subcase: Option<UrnSubcase>,
    pub times: Vec<f64>,
    pub indices: Vec<u64>,
    /// `samples[r][k]` is the observable of replicate `r` at grid point `k`.
    pub samples: Vec<Vec<Vec<f64>>>,
}

impl FluctuationSamples {
    pub fn replicates(&self) -> usize {
        self.samples.len()
    }

    /// All replicates at grid point `k`.
    pub fn at(&self, k: usize) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s[k].clone()).collect()
    }

    /// Multiplies grid point `k` by `factor`.
    pub fn scale_point(&mut self, k: usize, factor: f64) {
        for s in &mut self.samples {
            for v in &mut s[k] {
                *v *= factor;
            }
        }
    }
}

/// Real part of `sum_J N_A^{m_J - kappa} P_J` over `blocks`; conjugate pairs
/// must both be listed for the result to be a real projection.
pub fn component_projection(dec: &SpectralDecomposition, blocks: &[usize], kappa: usize) -> Result<RMat, VerifyError> {
    let d = dec.dim();
    let mut m = CMat::zeros(d, d);
    for &j in blocks {
        let b = dec.block(j).map_err(LimitError::from)?;
        if kappa == 0 || kappa > b.m {
            return Err(LimitError::Kappa { kappa, m: b.m }.into());
        }
        m += dec.nilpotent_power(b.m - kappa) * &b.projector;
    }
    Ok(m.map(|z| z.re))
}

/// Grid time actually realised by draw count `index`.
fn effective_time(scale: TimeScale, index: u64, n: f64, big_n: f64) -> f64 {
    match scale {
        TimeScale::Linear => index as f64 / n,
        TimeScale::Geometric => ((index as f64) / big_n).ln() / (n / big_n).ln(),
    }
}

/// `s(n, N, t) Pi (U_n(index(t)) - centering)` for every replicate and grid point.
/// The centering is evaluated at the realised draw count so that deterministic
/// directions cancel exactly.
pub fn fluctuation_samples(
    ensemble: &EnsembleResult,
    spec: &EnsembleSpec,
    ctx: &LimitContext,
    params: &FluctuationParams,
) -> Result<FluctuationSamples, VerifyError> {
    let scaling = &params.scaling;
    let expected = TimeScale::for_regime(scaling.regime, scaling.subcase);
    if spec.scale != expected {
        return Err(VerifyError::GridConvention {
            expected,
            got: spec.scale,
        });
    }
    if scaling.regime == Regime::Tsd
        && params.projection.is_none()
        && matches!(
            scaling.subcase,
            Some(UrnSubcase::CriticalUrn) | Some(UrnSubcase::LargeUrnSimple) | Some(UrnSubcase::LargeUrnNonsimple)
        )
    {
        return Err(VerifyError::MissingProjection(scaling.subcase.expect("matched")));
    }
    let d = ctx.dim();
    if let Some(p) = &params.projection {
        if p.ncols() != d {
            return Err(VerifyError::Dimension(format!("projection has {} columns, urn has {d} colours", p.ncols())));
        }
    }
    let s = ctx.balance()?;
    let n = spec.urn.draws() as f64;
    let big_n = spec.urn.initial_size() as f64;
    let mut centres = Vec::with_capacity(ensemble.grid.len());
    let mut factors = Vec::with_capacity(ensemble.grid.len());
    for (&index, &t) in ensemble.grid.iter().zip(&spec.grid_times) {
        let te = effective_time(spec.scale, index, n, big_n);
        centres.push(ctx.centering(spec.scale, n, big_n, te)?);
        factors.push(scaling.prefactor(n, big_n, t, s, params.lambda, params.kappa));
    }
    let samples = ensemble
        .trajectories
        .iter()
        .map(|traj| {
            traj.states
                .iter()
                .zip(centres.iter().zip(&factors))
                .map(|(x, (c, f))| {
                    let diff = crate::linalg::RVec::from_iterator(d, x.iter().zip(c.iter()).map(|(a, b)| *a as f64 - b));
                    let y = match &params.projection {
                        Some(p) => p * diff,
                        None => diff,
                    };
                    y.iter().map(|v| v * f).collect()
                })
                .collect()
        })
        .collect();
    Ok(FluctuationSamples {
        regime: scaling.regime,
        subcase: scaling.subcase,
        times: spec.grid_times.clone(),
        indices: ensemble.grid.clone(),
        samples,
    })
}

/// Unbiased cross-covariance `Cov(x, y)` over replicates and its jackknife standard error.
pub fn empirical_cov(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<(RMat, RMat), VerifyError> {
    let r = x.len();
    if r < 2 {
        return Err(VerifyError::TooFewReplicates { need: 2, got: r });
    }
    if y.len() != r {
        return Err(VerifyError::Dimension(format!("{r} vs {} replicates", y.len())));
    }
    let (p, q) = (x[0].len(), y[0].len());
    let mean = |v: &[Vec<f64>], k: usize| -> Vec<f64> {
        let mut m = vec![0.0; k];
        for s in v {
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        m.iter().map(|a| a / r as f64).collect()
    };
    let (mx, my) = (mean(x, p), mean(y, q));
    let mut sum = RMat::zeros(p, q);
    for (a, b) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..q {
                sum[(i, j)] += (a[i] - mx[i]) * (b[j] - my[j]);
            }
        }
    }
    let rf = r as f64;
    let cov = &sum / (rf - 1.0);
    if r < 3 {
        return Ok((cov.clone(), cov.abs()));
    }
    // leave-one-out: sum_{j != i} = sum - R/(R-1) dx_i dy_i'
    let c = rf / (rf - 1.0);
    let mut loo_sum = RMat::zeros(p, q);
    let mut loo_sq = RMat::zeros(p, q);
    for (a, b) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..q {
                let v = (sum[(i, j)] - c * (a[i] - mx[i]) * (b[j] - my[j])) / (rf - 2.0);
                loo_sum[(i, j)] += v;
                loo_sq[(i, j)] += v * v;
            }
        }
    }
    let se = RMat::from_fn(p, q, |i, j| {
        let m = loo_sum[(i, j)] / rf;
        let var = (loo_sq[(i, j)] / rf - m * m).max(0.0);
        (var * (rf - 1.0)).sqrt()
    });
    Ok((cov, se))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    DegeneratePass,
    Fail,
}

impl Verdict {
    pub fn passed(self) -> bool {
        self != Verdict::Fail
    }
}

/// Value used for z-scores when the standard error is zero but the difference is not.
pub const Z_UNBOUNDED: f64 = 1e300;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceReport {
    #[serde(serialize_with = "crate::linalg::serialize_rows")]
    pub theoretical: RMat,
    #[serde(serialize_with = "crate::linalg::serialize_rows")]
    pub empirical: RMat,
    #[serde(serialize_with = "crate::linalg::serialize_rows")]
    pub mc_stderr: RMat,
    pub rel_frobenius_error: f64,
    #[serde(serialize_with = "crate::linalg::serialize_rows")]
    pub per_entry_z: RMat,
    pub max_abs_z: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_cap: Option<f64>,
    pub verdict: Verdict,
}

/// Pass iff the relative Frobenius error is within `tolerance` and, when
/// `z_cap` is given, every entry is within `z_cap` standard errors.
pub fn compare_cov(
    empirical: &RMat,
    stderr: &RMat,
    theoretical: &RMat,
    tolerance: f64,
    z_cap: Option<f64>,
) -> Result<CovarianceReport, VerifyError> {
    if empirical.shape() != theoretical.shape() || stderr.shape() != theoretical.shape() {
        return Err(VerifyError::Dimension(format!(
            "empirical {:?}, stderr {:?}, theoretical {:?}",
            empirical.shape(),
            stderr.shape(),
            theoretical.shape()
        )));
    }
    let diff = empirical - theoretical;
    let z = RMat::from_fn(diff.nrows(), diff.ncols(), |i, j| {
        let (e, s) = (diff[(i, j)], stderr[(i, j)]);
        if s > 0.0 {
            e / s
        } else if e == 0.0 {
            0.0
        } else {
            Z_UNBOUNDED.copysign(e)
        }
    });
    let max_abs_z = z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let th = theoretical.norm();
    let (rel, verdict) = if th <= DEGENERATE_NORM {
        let emp = empirical.norm();
        if emp > tolerance.max(DEGENERATE_NORM) {
            return Err(VerifyError::DegenerateComparison(emp));
        }
        (0.0, Verdict::DegeneratePass)
    } else {
        let rel = diff.norm() / th;
        let ok = rel <= tolerance && z_cap.is_none_or(|cap| max_abs_z <= cap);
        (rel, if ok { Verdict::Pass } else { Verdict::Fail })
    };
    Ok(CovarianceReport {
        theoretical: theoretical.clone(),
        empirical: empirical.clone(),
        mc_stderr: stderr.clone(),
        rel_frobenius_error: rel,
        per_entry_z: z,
        max_abs_z,
        tolerance,
        z_cap,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityReport {
    pub applicable: bool,
    /// Kolmogorov–Smirnov p-value per coordinate against the fitted normal; `None` for constant coordinates.
    #[serde(serialize_with = "serialize_optional_p")]
    pub ks_p: Vec<Option<f64>>,
    /// Mardia's multivariate kurtosis in the non-degenerate principal subspace.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mardia_kurtosis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mardia_p: Option<f64>,
    pub rank: usize,
}

/// Writes missing p-values as the string `"n/a"`.
fn serialize_optional_p<S: serde::Serializer>(v: &[Option<f64>], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for p in v {
        match p {
            Some(x) => seq.serialize_element(x)?,
            None => seq.serialize_element("n/a")?,
        }
    }
    seq.end()
}

fn ks_statistic(sorted: &mut [f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    sorted.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal.cdf((x - mean) / sd);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Null distribution of the fitted-normal KS statistic for sample size `n`
/// (location-scale invariant, so standard normal draws suffice).
fn ks_null(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, Lane::Aux, n as u64);
    let mut buf = vec![0.0; n];
    (0..KS_BOOTSTRAP)
        .map(|_| {
            for v in &mut buf {
                *v = rng.sample(StandardNormal);
            }
            ks_statistic(&mut buf)
        })
        .collect()
}

/// Per-coordinate KS and Mardia kurtosis p-values; advisory only.
pub fn normality_test(samples: &[Vec<f64>], seed: u64) -> Result<NormalityReport, VerifyError> {
    let r = samples.len();
    if r < 100 {
        return Err(VerifyError::TooFewReplicates { need: 100, got: r });
    }
    let d = samples[0].len();
    let null = ks_null(r, seed);
    let ks_p = (0..d)
        .map(|i| {
            let mut col: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            if hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1e-300) {
                return None;
            }
            let stat = ks_statistic(&mut col);
            let exceed = null.iter().filter(|&&s| s >= stat).count();
            Some((exceed + 1) as f64 / (KS_BOOTSTRAP + 1) as f64)
        })
        .collect::<Vec<_>>();
    let (cov, _) = empirical_cov(samples, samples)?;
    let eig = nalgebra::SymmetricEigen::new(cov.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let keep: Vec<usize> = (0..d).filter(|&k| eig.eigenvalues[k] > 1e-10 * top && top > 0.0).collect();
    let rank = keep.len();
    let applicable = ks_p.iter().any(Option::is_some);
    let (mardia_kurtosis, mardia_p) = if rank == 0 {
        (None, None)
    } else {
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / r as f64;
            }
        }
        let b2 = samples
            .iter()
            .map(|s| {
                let q: f64 = keep
                    .iter()
                    .map(|&k| {
                        let proj: f64 = (0..d).map(|i| eig.eigenvectors[(i, k)] * (s[i] - mean[i])).sum();
                        proj * proj / eig.eigenvalues[k]
                    })
                    .sum();
                q * q
            })
            .sum::<f64>()
            / r as f64;
        let p = rank as f64;
        let z = (b2 - p * (p + 2.0)) / (8.0 * p * (p + 2.0) / r as f64).sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (Some(b2), Some(2.0 * normal.sf(z.abs())))
    };
    Ok(NormalityReport {
        applicable,
        ks_p,
        mardia_kurtosis,
        mardia_p,
        rank,
    })
}

// ----- sub-urn decomposition -----

/// Smallest `b` with `b mu` integral, for `mu` with rational entries.
pub fn integer_scale(mu: &[f64]) -> Result<u64, VerifyError> {
    const MAX_DEN: u64 = 1_000_000;
    for b in 1..=MAX_DEN {
        if mu.iter().all(|m| {
            let x = m * b as f64;
            (x - x.round()).abs() <= 1e-9 * x.abs().max(1.0)
        }) {
            return Ok(b);
        }
    }
    Err(VerifyError::NoIntegerScale(MAX_DEN))
}

type Law = BTreeMap<Vec<i64>, f64>;

/// Exact law of the composition after `steps` draws from `x0`.
pub fn exact_composition_law(structure: &ReplacementStructure, x0: &[i64], steps: usize) -> Result<Law, VerifyError> {
    let mut law: Law = BTreeMap::from([(x0.to_vec(), 1.0)]);
    let mut work = 0usize;
    for _ in 0..steps {
        let mut next: Law = BTreeMap::new();
        for (state, p) in &law {
            for (x, q) in transitions(structure, state) {
                work += 1;
                if work > MAX_ENUMERATION {
                    return Err(VerifyError::OutcomeSpaceTooLarge(MAX_ENUMERATION));
                }
                *next.entry(x).or_insert(0.0) += p * q;
            }
        }
        law = next;
    }
    Ok(law)
}

fn transitions(structure: &ReplacementStructure, state: &[i64]) -> Vec<(Vec<i64>, f64)> {
    let w = structure.weights();
    let total: f64 = state.iter().zip(w).map(|(x, a)| *x as f64 * a).sum();
    if total <= 0.0 {
        return vec![(state.to_vec(), 1.0)];
    }
    let mut out = Vec::new();
    for (i, rule) in structure.rules().iter().enumerate() {
        let pi = state[i] as f64 * w[i] / total;
        if pi <= 0.0 {
            continue;
        }
        for (atom, q) in rule.atoms() {
            let x = state.iter().zip(atom).map(|(s, a)| s + a).collect();
            out.push((x, pi * q));
        }
    }
    out
}

/// Exact law of `sum_i U_i(D_i(steps))` when each of `urns` sub-urns starts from
/// `sub0` and every draw first picks a sub-urn by its mass.
pub fn exact_suburn_law(structure: &ReplacementStructure, sub0: &[i64], urns: usize, steps: usize) -> Result<Law, VerifyError> {
    let d = sub0.len();
    let w = structure.weights();
    let start: Vec<i64> = (0..urns).flat_map(|_| sub0.iter().copied()).collect();
    let mut law: Law = BTreeMap::from([(start, 1.0)]);
    let mut work = 0usize;
    for _ in 0..steps {
        let mut next: Law = BTreeMap::new();
        for (joint, p) in &law {
            let masses: Vec<f64> = joint
                .chunks(d)
                .map(|u| u.iter().zip(w).map(|(x, a)| *x as f64 * a).sum())
                .collect();
            let total: f64 = masses.iter().sum();
            for (k, m) in masses.iter().enumerate() {
                if *m <= 0.0 {
                    continue;
                }
                for (x, q) in transitions(structure, &joint[k * d..(k + 1) * d]) {
                    work += 1;
                    if work > MAX_ENUMERATION {
                        return Err(VerifyError::OutcomeSpaceTooLarge(MAX_ENUMERATION));
                    }
                    let mut j = joint.clone();
                    j[k * d..(k + 1) * d].copy_from_slice(&x);
                    *next.entry(j).or_insert(0.0) += p * m / total * q;
                }
            }
        }
        law = next;
    }
    let mut out: Law = BTreeMap::new();
    for (joint, p) in law {
        let mut agg = vec![0i64; d];
        for u in joint.chunks(d) {
            for (a, x) in agg.iter_mut().zip(u) {
                *a += x;
            }
        }
        *out.entry(agg).or_insert(0.0) += p;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquare {
    pub p_value: f64,
    pub statistic: f64,
    pub dof: usize,
    /// Observations outside the support of the reference law; any forces `p = 0`.
    pub outside_support: u64,
}

/// Pearson chi-square p-value of `counts` against `law`, merging the cells with
/// the smallest expected counts until every cell expects at least 5.
pub fn chi_square_p(counts: &BTreeMap<Vec<i64>, u64>, law: &Law) -> ChiSquare {
    let total: u64 = counts.values().sum();
    let mut cells: Vec<(f64, f64)> = law
        .iter()
        .map(|(k, p)| (p * total as f64, counts.get(k).copied().unwrap_or(0) as f64))
        .collect();
    let outside: u64 = counts.iter().filter(|(k, _)| !law.contains_key(*k)).map(|(_, c)| *c).sum();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (e, o) in cells {
        acc = (acc.0 + e, acc.1 + o);
        if acc.0 >= 5.0 {
            merged.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.0 > 0.0 {
        match merged.last_mut() {
            Some(last) => *last = (last.0 + acc.0, last.1 + acc.1),
            None => merged.push(acc),
        }
    }
    let dof = merged.len().saturating_sub(1);
    let statistic: f64 = merged.iter().map(|(e, o)| (o - e).powi(2) / e).sum();
    let p_value = if outside > 0 {
        0.0
    } else if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64).expect("positive degrees of freedom").sf(statistic)
    };
    ChiSquare {
        p_value,
        statistic,
        dof,
        outside_support: outside,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuburnReport {
    pub scale_b: u64,
    pub urns: u64,
    pub steps: usize,
    pub replicates: u64,
    /// Total variation distance between the exact direct and exact sub-urn laws.
    pub exact_tv: f64,
    /// Sub-urn simulation against the exact direct law.
    pub suburn: ChiSquare,
    /// Direct simulation against the exact direct law.
    pub direct: ChiSquare,
    pub p_value: f64,
}

fn simulate_suburns<R: Rng + ?Sized>(stepper: &Stepper, sub0: &[i64], urns: usize, steps: usize, rng: &mut R) -> Vec<i64> {
    let mut subs: Vec<Vec<i64>> = vec![sub0.to_vec(); urns];
    for _ in 0..steps {
        let masses: Vec<f64> = subs.iter().map(|u| stepper.total(u)).collect();
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut k = urns - 1;
        for (i, m) in masses.iter().enumerate() {
            if u < *m {
                k = i;
                break;
            }
            u -= m;
        }
        // never pick an empty sub-urn through rounding at the boundary
        while masses[k] <= 0.0 {
            k -= 1;
        }
        stepper.step(&mut subs[k], rng);
    }
    let mut agg = vec![0i64; sub0.len()];
    for u in &subs {
        for (a, x) in agg.iter_mut().zip(u) {
            *a += x;
        }
    }
    agg
}

/// Simulates the urn directly and through `N` tracked sub-urns of composition
/// `b mu`, and tests both against the enumerated law of the direct urn.
pub fn suburn_equivalence_check(
    structure: &ReplacementStructure,
    mu: &[f64],
    big_n: u64,
    steps: usize,
    replicates: u64,
    seed: u64,
    threads: usize,
) -> Result<SuburnReport, VerifyError> {
    structure.require_balance()?;
    let b = integer_scale(mu)?;
    let sub0: Vec<i64> = mu.iter().map(|m| (m * b as f64).round() as i64).collect();
    let x0: Vec<i64> = sub0.iter().map(|x| x * big_n as i64).collect();
    let exact = exact_composition_law(structure, &x0, steps)?;
    let exact_sub = exact_suburn_law(structure, &sub0, big_n as usize, steps)?;
    let mut keys: Vec<&Vec<i64>> = exact.keys().chain(exact_sub.keys()).collect();
    keys.sort();
    keys.dedup();
    let exact_tv = 0.5
        * keys
            .iter()
            .map(|k| (exact.get(*k).unwrap_or(&0.0) - exact_sub.get(*k).unwrap_or(&0.0)).abs())
            .sum::<f64>();
    let stepper = Stepper::new(structure);
    let pairs = par_replicates(replicates, threads, |r| {
        let mut rng = draw_stream(seed, r);
        let direct = {
            let mut x = x0.clone();
            stepper.advance(&mut x, steps as u64, &mut rng);
            x
        };
        let mut rng = stream(seed, Lane::Aux, r);
        (direct, simulate_suburns(&stepper, &sub0, big_n as usize, steps, &mut rng))
    })?;
    let mut direct_counts = BTreeMap::new();
    let mut sub_counts = BTreeMap::new();
    for (d, s) in pairs {
        *direct_counts.entry(d).or_insert(0u64) += 1;
        *sub_counts.entry(s).or_insert(0u64) += 1;
    }
    let suburn = chi_square_p(&sub_counts, &exact);
    let direct = chi_square_p(&direct_counts, &exact);
    Ok(SuburnReport {
        scale_b: b,
        urns: big_n,
        steps,
        replicates,
        exact_tv,
        p_value: suburn.p_value,
        suburn,
        direct,
    })
}

// ----- death-time scaling -----

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauFit {
    pub regime: Regime,
    pub draws: Vec<u64>,
    pub initial_sizes: Vec<u64>,
    pub predictor: Vec<f64>,
    pub median_tau: Vec<f64>,
    pub slope: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intercept: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted_intercept: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Median of `tau_{n,n}` over `replicates` branching processes started from `N mu`
/// for each `(n, N)` pair.
pub fn median_tau(
    structure: &ReplacementStructure,
    mu: &[f64],
    pairs: &[(u64, u64)],
    replicates: u64,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>, VerifyError> {
    let stepper = Stepper::new(structure);
    let mut out = Vec::with_capacity(pairs.len());
    for (k, &(n, big_n)) in pairs.iter().enumerate() {
        let x0 = crate::urn::UrnSpec::new(structure.clone(), big_n, fractions(mu)?, n)?.initial_composition();
        let lane_seed = seed.wrapping_add(k as u64);
        let taus = par_replicates(replicates, threads, |r| {
            let mut draws = draw_stream(lane_seed, r);
            let mut clock = clock_stream(lane_seed, r);
            death_times_at(&stepper, &x0, &[n], &mut draws, &mut clock).map(|v| v[0])
        })?
        .into_iter()
        .enumerate()
        .map(|(r, t)| t.map_err(|_| VerifyError::Extinct(r as u64)))
        .collect::<Result<Vec<_>, _>>()?;
        let mut taus = taus;
        out.push(median(&mut taus));
    }
    Ok(out)
}

fn fractions(mu: &[f64]) -> Result<Vec<crate::urn::Fraction>, VerifyError> {
    let b = integer_scale(mu)?;
    mu.iter()
        .map(|m| crate::urn::Fraction::new((m * b as f64).round() as u64, b).map_err(VerifyError::from))
        .collect()
}

/// Fits the median death time against its predicted order: log-log slope in
/// `n/N` for IBD, through-origin ratio to `S^{-1} log(1 + S/beta1)` for TR, and
/// semilog slope in `S^{-1} log(n/N)` for TSD. The target slope is 1 in each case.
pub fn tau_scaling_fit(
    regime: Regime,
    structure: &ReplacementStructure,
    mu: &[f64],
    pairs: &[(u64, u64)],
    replicates: u64,
    seed: u64,
    threads: usize,
    tolerance: f64,
) -> Result<TauFit, VerifyError> {
    if pairs.len() < 3 {
        return Err(VerifyError::SweepTooShort { need: 3, got: pairs.len() });
    }
    let s = structure.require_balance()?;
    let beta1: f64 = structure.weights().iter().zip(mu).map(|(a, m)| a * m).sum();
    let med = median_tau(structure, mu, pairs, replicates, seed, threads)?;
    let ratio = |&(n, big_n): &(u64, u64)| n as f64 / big_n as f64;
    let (predictor, slope, intercept, predicted_intercept) = match regime {
        Regime::Ibd => {
            let x: Vec<f64> = pairs.iter().map(ratio).collect();
            let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
            let ly: Vec<f64> = med.iter().map(|v| v.ln()).collect();
            let (slope, c) = least_squares(&lx, &ly);
            (x, slope, Some(c), Some((1.0 / beta1).ln()))
        }
        Regime::Tr => {
            let x: Vec<f64> = pairs.iter().map(|p| (s * ratio(p) / beta1).ln_1p() / s).collect();
            let sxy: f64 = x.iter().zip(&med).map(|(a, b)| a * b).sum();
            let sxx: f64 = x.iter().map(|a| a * a).sum();
            (x, sxy / sxx, None, None)
        }
        Regime::Tsd => {
            let x: Vec<f64> = pairs.iter().map(|p| ratio(p).ln() / s).collect();
            let (slope, c) = least_squares(&x, &med);
            (x, slope, Some(c), Some((s / beta1).ln() / s))
        }
    };
    Ok(TauFit {
        regime,
        draws: pairs.iter().map(|p| p.0).collect(),
        initial_sizes: pairs.iter().map(|p| p.1).collect(),
        predictor,
        median_tau: med,
        slope,
        intercept,
        predicted_intercept,
        tolerance,
        pass: (slope - 1.0).abs() <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::run_ensemble;
    use crate::urn::UrnSpec;
    use approx::assert_abs_diff_eq;

    fn normal_samples(r: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, Lane::Aux, 99);
        (0..r).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn empirical_cov_examples() {
        let constant = vec![vec![1.0, 2.0]; 10];
        let (c, se) = empirical_cov(&constant, &constant).unwrap();
        assert_eq!(c, RMat::zeros(2, 2));
        assert_eq!(se, RMat::zeros(2, 2));
        assert!(empirical_cov(&constant[..1], &constant[..1]).is_err());
        let x = normal_samples(100_000, 3, 1);
        let (c, se) = empirical_cov(&x, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((c[(i, j)] - target).abs() <= 3.0 * se[(i, j)], "{i}{j}: {} ± {}", c[(i, j)], se[(i, j)]);
            }
        }
        assert!((c.clone() - c.transpose()).abs().max() < 1e-15);
        assert!(nalgebra::SymmetricEigen::new(c).eigenvalues.min() >= 0.0);
    }

    #[test]
    fn jackknife_matches_normal_theory() {
        // Var of the sample variance of N(0,1) is about 2/R
        let x = normal_samples(20_000, 1, 2);
        let (_, se) = empirical_cov(&x, &x).unwrap();
        assert!((se[(0, 0)] / (2.0f64 / 20_000.0).sqrt() - 1.0).abs() < 0.1);
    }

    #[test]
    fn compare_examples() {
        let id = RMat::identity(2, 2);
        let se = RMat::from_element(2, 2, 0.01);
        let r = compare_cov(&id, &se, &id, 0.1, Some(5.0)).unwrap();
        assert_eq!(r.rel_frobenius_error, 0.0);
        assert_eq!(r.verdict, Verdict::Pass);
        let r = compare_cov(&(&id * 1.05), &se, &id, 0.1, None).unwrap();
        assert_abs_diff_eq!(r.rel_frobenius_error, 0.05, epsilon = 1e-14);
        assert_eq!(r.verdict, Verdict::Pass);
        let r = compare_cov(&(&id * 1.05), &se, &id, 0.1, Some(4.0)).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let zero = RMat::zeros(2, 2);
        let r = compare_cov(&RMat::from_element(2, 2, 1e-14), &se, &zero, 0.1, Some(5.0)).unwrap();
        assert_eq!(r.verdict, Verdict::DegeneratePass);
        assert!(matches!(compare_cov(&id, &se, &zero, 0.1, None), Err(VerifyError::DegenerateComparison(_))));
        assert!(compare_cov(&RMat::zeros(3, 3), &se, &id, 0.1, None).is_err());
    }

    #[test]
    fn normality_calibration() {
        let mut ps: Vec<f64> = (0..100)
            .map(|k| normality_test(&normal_samples(200, 1, 100 + k), 7).unwrap().ks_p[0].unwrap())
            .collect();
        let m = median(&mut ps);
        assert!((0.35..=0.65).contains(&m), "median p {m}");
        let mut rng = stream(3, Lane::Aux, 0);
        let expo: Vec<Vec<f64>> = (0..10_000).map(|_| vec![-(1.0 - rng.random::<f64>()).ln()]).collect();
        let rep = normality_test(&expo, 7).unwrap();
        assert!(rep.ks_p[0].unwrap() < 0.01);
        assert!(rep.mardia_p.unwrap() < 0.01);
        let constant = vec![vec![3.0]; 200];
        let rep = normality_test(&constant, 7).unwrap();
        assert!(!rep.applicable && rep.ks_p[0].is_none() && rep.mardia_p.is_none());
        assert!(normality_test(&constant[..50], 7).is_err());
    }

    #[test]
    fn degenerate_directions_are_ignored_by_mardia() {
        let x: Vec<Vec<f64>> = normal_samples(5_000, 1, 4).into_iter().map(|v| vec![v[0], -v[0]]).collect();
        let rep = normality_test(&x, 1).unwrap();
        assert_eq!(rep.rank, 1);
        assert!(rep.mardia_p.unwrap() > 1e-4);
    }

    #[test]
    fn suburn_laws() {
        let s = ReplacementStructure::friedman(2, 1);
        let direct = exact_composition_law(&s, &[2, 2], 2).unwrap();
        let sub = exact_suburn_law(&s, &[1, 1], 2, 2).unwrap();
        assert_eq!(direct.len(), sub.len());
        for (k, p) in &direct {
            assert_abs_diff_eq!(*p, sub[k], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(direct.values().sum::<f64>(), 1.0, epsilon = 1e-15);
        let zero = suburn_equivalence_check(&s, &[0.5, 0.5], 2, 0, 50, 1, 1).unwrap();
        assert_eq!(zero.p_value, 1.0);
        let id = ReplacementStructure::identity(3, 2);
        let a = exact_composition_law(&id, &[3, 6, 9], 1).unwrap();
        let b = exact_suburn_law(&id, &[1, 2, 3], 3, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(integer_scale(&[0.25, 0.75]).unwrap(), 4);
    }

    #[test]
    fn enumeration_cap() {
        let s = ReplacementStructure::friedman(2, 1);
        assert!(matches!(
            exact_suburn_law(&s, &[1, 1], 6, 12),
            Err(VerifyError::OutcomeSpaceTooLarge(_))
        ));
    }

    fn ensemble(structure: ReplacementStructure, big_n: u64, n: u64, regime: Regime, times: Vec<f64>) -> (EnsembleSpec, EnsembleResult) {
        let urn = UrnSpec::uniform(structure, big_n, n).unwrap();
        let spec = EnsembleSpec {
            urn,
            regime,
            scale: TimeScale::for_regime(regime, None),
            replicates: 20,
            grid_times: times,
            base_seed: 11,
        };
        let res = run_ensemble(&spec, 1).unwrap();
        (spec, res)
    }

    #[test]
    fn fluctuation_examples() {
        let s = ReplacementStructure::friedman(2, 1);
        let ctx = LimitContext::new(&s, &[0.5, 0.5]).unwrap();
        let (spec, res) = ensemble(s.clone(), 1000, 100, Regime::Ibd, vec![0.0, 1.0]);
        let params = FluctuationParams::new(Regime::Ibd, None);
        let fs = fluctuation_samples(&res, &spec, &ctx, &params).unwrap();
        assert!(fs.at(0).iter().flatten().all(|v| v.abs() < 1e-12));
        // the a-block fluctuation is deterministic and bounded by |S| |v1|
        let ja = ctx.decomposition().a_block().unwrap();
        let p = component_projection(ctx.decomposition(), &[ja], 1).unwrap();
        let fs = fluctuation_samples(&res, &spec, &ctx, &params.clone().with_projection(p, 3.0, 1)).unwrap();
        assert!(fs.at(1).iter().flatten().all(|v| v.abs() <= 3.0 * 0.5f64.sqrt()));

        let m = ReplacementStructure::matching(4);
        let ctx = LimitContext::new(&m, &[0.25; 4]).unwrap();
        let (spec, res) = ensemble(m, 400, 400, Regime::Tr, vec![0.5]);
        let fs = fluctuation_samples(&res, &spec, &ctx, &FluctuationParams::new(Regime::Tr, None)).unwrap();
        for s in fs.at(0) {
            assert!(s.iter().sum::<f64>().abs() < 1e-10);
        }
        let lp = FluctuationParams::new(Regime::Tsd, Some(UrnSubcase::LargeUrnSimple));
        assert!(matches!(fluctuation_samples(&res, &spec, &ctx, &lp), Err(VerifyError::GridConvention { .. })));
    }

    #[test]
    fn component_subcases_need_projection() {
        let s = ReplacementStructure::friedman(5, 1);
        let ctx = LimitContext::new(&s, &[0.5, 0.5]).unwrap();
        let urn = UrnSpec::uniform(s, 10, 100).unwrap();
        let spec = EnsembleSpec {
            urn,
            regime: Regime::Tsd,
            scale: TimeScale::Geometric,
            replicates: 2,
            grid_times: vec![1.0],
            base_seed: 0,
        };
        let res = run_ensemble(&spec, 1).unwrap();
        let params = FluctuationParams::new(Regime::Tsd, Some(UrnSubcase::LargeUrnSimple));
        assert!(matches!(fluctuation_samples(&res, &spec, &ctx, &params), Err(VerifyError::MissingProjection(_))));
    }

    #[test]
    fn synthetic_centred_trajectories_give_zero() {
        // trajectories equal to the rounded centering give samples of order the rounding only
        let s = ReplacementStructure::identity(2, 1);
        let ctx = LimitContext::new(&s, &[0.5, 0.5]).unwrap();
        let urn = UrnSpec::uniform(s, 1000, 1000).unwrap();
        let spec = EnsembleSpec {
            urn,
            regime: Regime::Tr,
            scale: TimeScale::Linear,
            replicates: 1,
            grid_times: vec![0.5, 1.0],
            base_seed: 0,
        };
        let res = EnsembleResult {
            grid: vec![500, 1000],
            trajectories: vec![crate::sim::Trajectory {
                grid: vec![0.5, 1.0],
                states: vec![vec![750, 750], vec![1000, 1000]],
                death_times: None,
                skeleton: None,
                extinct_at: None,
            }],
        };
        let fs = fluctuation_samples(&res, &spec, &ctx, &FluctuationParams::new(Regime::Tr, None)).unwrap();
        assert!(fs.samples[0].iter().flatten().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn chi_square_merging() {
        let law: Law = BTreeMap::from([(vec![0], 0.5), (vec![1], 0.49), (vec![2], 0.01)]);
        let counts = BTreeMap::from([(vec![0], 50u64), (vec![1], 49), (vec![2], 1)]);
        let c = chi_square_p(&counts, &law);
        assert_eq!(c.dof, 1);
        assert!(c.statistic < 1e-12 && c.p_value > 0.99);
        let outside = BTreeMap::from([(vec![7], 1u64)]);
        assert_eq!(chi_square_p(&outside, &law).p_value, 0.0);
    }
}
