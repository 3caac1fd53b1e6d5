//! Jordan decomposition of the mean replacement matrix.
//!
//! Every eigenvalue `lambda` of `A` owns one or more Jordan blocks `J`, each with a
//! chain `v_{J,1}, .., v_{J,m}` satisfying `A v_{J,1} = lambda v_{J,1}` and
//! `A v_{J,i} = lambda v_{J,i} + v_{J,i-1}`. The projector `P_J` maps onto the span
//! of the chain along all other chains, and `N_A` is the real nilpotent part.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{
    c, condition_number, conj, factorial, frobenius, max_abs, max_imag, null_space_real, rank_real,
    real_part, to_complex, to_complex_vec, CMat, CVec, RMat, RVec,
};
use crate::urn::MeanMatrix;

pub const DEFAULT_TOL_JORDAN: f64 = 1e-8;
pub const DEFAULT_COND_MAX: f64 = 1e12;
/// Imaginary residue tolerated (and stripped) when reporting real results.
pub const IMAG_RESIDUE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("eigenvector matrix has condition number {cond:e} > {cond_max:e}; A looks defective, supply a Jordan basis explicitly")]
    DefectiveMatrix { cond: f64, cond_max: f64 },
    #[error("eigenvalue {lambda} has algebraic multiplicity {algebraic} but only {geometric} independent eigenvectors; supply a Jordan basis explicitly")]
    MissingEigenvectors {
        lambda: Complex64,
        algebraic: usize,
        geometric: usize,
    },
    #[error("complex eigenvalue {0} has no conjugate partner")]
    UnpairedEigenvalue(Complex64),
    #[error("left eigenvector is orthogonal to the eigenspace of {0}; normalization degenerate")]
    DegenerateNormalization(f64),
    #[error("invalid Jordan basis: {0}")]
    InvalidBasis(String),
    #[error("decomposition invariant violated: {0}")]
    Invariant(String),
    #[error("kappa = {kappa} outside 1..={m}")]
    KappaOutOfRange { kappa: usize, m: usize },
    #[error("block index {0} out of range")]
    BlockOutOfRange(usize),
}

/// A user-declared Jordan block: eigenvalue, size and chain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct UserJordanBlock {
    pub lambda: Complex64,
    pub m: usize,
    pub basis: Vec<Vec<Complex64>>,
}

#[derive(Debug, Clone)]
pub struct DecomposeOptions {
    pub tol_jordan: f64,
    pub cond_max: f64,
    /// Left eigenvector for `lambda1`; fixes the basis of a multi-dimensional
    /// top eigenspace so that one block carries `P_{lambda1} mu` as `(a . mu) v_1`.
    pub left_eigenvector: Option<Vec<f64>>,
    pub basis: Option<Vec<UserJordanBlock>>,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self {
            tol_jordan: DEFAULT_TOL_JORDAN,
            cond_max: DEFAULT_COND_MAX,
            left_eigenvector: None,
            basis: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JordanBlock {
    pub lambda: Complex64,
    pub m: usize,
    pub basis: Vec<CVec>,
    pub projector: CMat,
    pub conjugate_partner: Option<usize>,
}

impl JordanBlock {
    pub fn is_real(&self) -> bool {
        self.conjugate_partner.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenClass {
    Small,
    Critical,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UrnSubcase {
    SmallUrn,
    CriticalUrn,
    LargeUrnSimple,
    LargeUrnNonsimple,
}

impl std::fmt::Display for UrnSubcase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UrnSubcase::SmallUrn => "small-urn",
            UrnSubcase::CriticalUrn => "critical-urn",
            UrnSubcase::LargeUrnSimple => "large-urn-simple",
            UrnSubcase::LargeUrnNonsimple => "large-urn-nonsimple",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub small: Vec<Complex64>,
    pub critical: Vec<Complex64>,
    pub large: Vec<Complex64>,
    pub subcase: UrnSubcase,
    pub tol_class: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    a: RMat,
    blocks: Vec<JordanBlock>,
    nilpotent: RMat,
    lambda1: f64,
    m1: usize,
    // block of lambda1 whose left eigenvector is the supplied one
    a_block: Option<usize>,
    tol_jordan: f64,
    tol_class: Option<f64>,
}

/// Largest real eigenvalue, its largest Jordan block size and whether it is positive.
pub fn perron_frobenius(mm: &MeanMatrix) -> (f64, usize, bool) {
    let a = mm.matrix();
    let d = a.nrows();
    let lambda1 = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = a.norm().max(1.0);
    let tol = 1e-7 * scale;
    let shifted = a - RMat::identity(d, d) * lambda1;
    // block size = first k at which rank((A - lambda1)^k) stops decreasing
    let mut power = RMat::identity(d, d);
    let mut prev = d;
    let mut m1 = 0;
    for k in 1..=d {
        power = &power * &shifted;
        let r = rank_real(&power, tol * scale.powi(k as i32 - 1));
        if r == prev {
            break;
        }
        prev = r;
        m1 = k;
    }
    let tol_class = 1e-9 * lambda1.abs().max(1.0);
    (lambda1, m1.max(1), lambda1 > tol_class)
}

/// Decomposition with default options and the matrix's own left eigenvector.
pub fn decompose(mm: &MeanMatrix, tol_jordan: f64) -> Result<SpectralDecomposition, SpectralError> {
    let opts = DecomposeOptions {
        tol_jordan,
        left_eigenvector: mm.left_eigenvector().map(<[f64]>::to_vec),
        ..Default::default()
    };
    decompose_with(mm.matrix(), &opts)
}

pub fn decompose_with(
    a: &RMat,
    opts: &DecomposeOptions,
) -> Result<SpectralDecomposition, SpectralError> {
    let dec = match &opts.basis {
        Some(basis) => from_user_basis(a, basis, opts)?,
        None => automatic(a, opts)?,
    };
    dec.check_invariants()?;
    Ok(dec)
}

impl MeanMatrix {
    /// Memoised decomposition with default tolerances.
    pub fn spectral(&self) -> Result<&SpectralDecomposition, SpectralError> {
        self.memo
            .get_or_init(|| decompose(self, DEFAULT_TOL_JORDAN))
            .as_ref()
            .map_err(Clone::clone)
    }
}

struct EigenGroup {
    lambda: Complex64,
    mult: usize,
}

fn group_eigenvalues(a: &RMat) -> Result<Vec<EigenGroup>, SpectralError> {
    let scale = a.norm().max(1.0);
    let tol_group = 1e-8 * scale;
    let mut groups: Vec<(Complex64, usize)> = Vec::new();
    for z in a.complex_eigenvalues().iter() {
        let mut z = *z;
        if z.im.abs() <= tol_group {
            z.im = 0.0;
        }
        match groups
            .iter_mut()
            .find(|(s, k)| (*s / *k as f64 - z).norm() <= tol_group)
        {
            Some(g) => {
                g.0 += z;
                g.1 += 1;
            }
            None => groups.push((z, 1)),
        }
    }
    let mut out: Vec<EigenGroup> = groups
        .into_iter()
        .map(|(s, k)| EigenGroup {
            lambda: s / k as f64,
            mult: k,
        })
        .collect();
    // conjugate partners must exist with equal multiplicity; make them exact
    for i in 0..out.len() {
        if out[i].lambda.im <= 0.0 {
            continue;
        }
        let target = out[i].lambda.conj();
        let j = (0..out.len())
            .filter(|&j| out[j].lambda.im < 0.0)
            .min_by(|&x, &y| {
                (out[x].lambda - target)
                    .norm()
                    .total_cmp(&(out[y].lambda - target).norm())
            })
            .filter(|&j| {
                (out[j].lambda - target).norm() <= tol_group && out[j].mult == out[i].mult
            })
            .ok_or(SpectralError::UnpairedEigenvalue(out[i].lambda))?;
        out[j].lambda = target;
    }
    for g in &out {
        if g.lambda.im < 0.0 && !out.iter().any(|h| h.lambda == g.lambda.conj()) {
            return Err(SpectralError::UnpairedEigenvalue(g.lambda));
        }
    }
    out.sort_by(|x, y| {
        y.lambda
            .re
            .total_cmp(&x.lambda.re)
            .then(y.lambda.im.total_cmp(&x.lambda.im))
    });
    Ok(out)
}

fn smallest_singular_vectors(m: &CMat, k: usize) -> (Vec<CVec>, Vec<f64>) {
    let n = m.ncols();
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut sv: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .cloned()
        .enumerate()
        .map(|(j, s)| (s, j))
        .collect();
    sv.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut vecs = Vec::new();
    let mut vals = Vec::new();
    for &(s, j) in sv.iter().take(k) {
        vecs.push(v_t.row(j).transpose().map(|z| z.conj()));
        vals.push(s);
    }
    debug_assert!(vecs.len() == k || n < k);
    (vecs, vals)
}

fn smallest_singular_vectors_real(m: &RMat, k: usize) -> (Vec<RVec>, Vec<f64>) {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut sv: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .cloned()
        .enumerate()
        .map(|(j, s)| (s, j))
        .collect();
    sv.sort_by(|x, y| x.0.total_cmp(&y.0));
    sv.iter()
        .take(k)
        .map(|&(s, j)| (v_t.row(j).transpose().into_owned(), s))
        .unzip()
}

fn automatic(a: &RMat, opts: &DecomposeOptions) -> Result<SpectralDecomposition, SpectralError> {
    let d = a.nrows();
    let scale = a.norm().max(1.0);
    let tol_null = 1e-6 * scale;
    let groups = group_eigenvalues(a)?;
    let lambda1 = groups
        .iter()
        .filter(|g| g.lambda.im == 0.0)
        .map(|g| g.lambda.re)
        .fold(f64::NEG_INFINITY, f64::max);

    let mut columns: Vec<CVec> = Vec::with_capacity(d);
    let mut lambdas: Vec<Complex64> = Vec::with_capacity(d);
    let mut a_block = None;
    // eigenvectors of upper-half eigenvalues, reused for their conjugates
    let mut upper: Vec<(Complex64, Vec<CVec>)> = Vec::new();

    for g in &groups {
        let vecs: Vec<CVec> = if g.lambda.im == 0.0 {
            let shifted = a - RMat::identity(d, d) * g.lambda.re;
            let (w, s) = smallest_singular_vectors_real(&shifted, g.mult);
            let geometric = s.iter().filter(|&&x| x <= tol_null).count();
            if geometric < g.mult {
                return Err(SpectralError::MissingEigenvectors {
                    lambda: g.lambda,
                    algebraic: g.mult,
                    geometric,
                });
            }
            let mut w: Vec<RVec> = w;
            let mut oriented = false;
            if g.lambda.re == lambda1 {
                if let Some(left) = &opts.left_eigenvector {
                    w = orient_top_eigenspace(&w, left)?;
                    a_block = Some(columns.len());
                    oriented = true;
                }
            }
            w.iter()
                .enumerate()
                .map(|(k, v)| {
                    let v = v.map(c);
                    if oriented && k == 0 {
                        v
                    } else {
                        normalize(v)
                    }
                })
                .collect()
        } else if g.lambda.im > 0.0 {
            let shifted = to_complex(a) - CMat::identity(d, d) * g.lambda;
            let (w, s) = smallest_singular_vectors(&shifted, g.mult);
            let geometric = s.iter().filter(|&&x| x <= tol_null).count();
            if geometric < g.mult {
                return Err(SpectralError::MissingEigenvectors {
                    lambda: g.lambda,
                    algebraic: g.mult,
                    geometric,
                });
            }
            let w: Vec<CVec> = w.into_iter().map(normalize).collect();
            upper.push((g.lambda, w.clone()));
            w
        } else {
            let partner = upper
                .iter()
                .find(|(l, _)| *l == g.lambda.conj())
                .ok_or(SpectralError::UnpairedEigenvalue(g.lambda))?;
            partner.1.iter().map(|v| v.map(|z| z.conj())).collect()
        };
        for v in vecs {
            columns.push(v);
            lambdas.push(g.lambda);
        }
    }

    let v = CMat::from_columns(&columns);
    let v_unit = CMat::from_columns(&columns.iter().cloned().map(normalize).collect::<Vec<_>>());
    let cond = condition_number(&v_unit);
    if !(cond <= opts.cond_max) {
        return Err(SpectralError::DefectiveMatrix {
            cond,
            cond_max: opts.cond_max,
        });
    }
    let w = v
        .clone()
        .try_inverse()
        .ok_or(SpectralError::DefectiveMatrix {
            cond: f64::INFINITY,
            cond_max: opts.cond_max,
        })?;

    let mut blocks: Vec<JordanBlock> = (0..d)
        .map(|k| {
            let p = v.column(k) * w.row(k);
            JordanBlock {
                lambda: lambdas[k],
                m: 1,
                basis: vec![v.column(k).into_owned()],
                projector: p,
                conjugate_partner: None,
            }
        })
        .collect();
    pair_conjugates(&mut blocks);
    let lambda1 = if lambda1.is_finite() { lambda1 } else { 0.0 };
    Ok(SpectralDecomposition {
        a: a.clone(),
        blocks,
        nilpotent: RMat::zeros(d, d),
        lambda1,
        m1: 1,
        a_block,
        tol_jordan: opts.tol_jordan,
        tol_class: None,
    })
}

fn normalize(v: CVec) -> CVec {
    let n = v.norm();
    if n > 0.0 {
        v.map(|z| z / n)
    } else {
        v
    }
}

/// Rebases an eigenspace `W` so that its first vector `v_1` has `left . v_1 = 1` and
/// the remaining vectors are annihilated by `left`.
fn orient_top_eigenspace(w: &[RVec], left: &[f64]) -> Result<Vec<RVec>, SpectralError> {
    let l = w.len();
    let left = RVec::from_column_slice(left);
    let coef = RVec::from_iterator(l, w.iter().map(|v| left.dot(v)));
    let cc = coef.norm_squared();
    if cc.sqrt() <= 1e-10 * left.norm() {
        return Err(SpectralError::DegenerateNormalization(cc.sqrt()));
    }
    let combine = |x: &RVec| -> RVec {
        let mut out = RVec::zeros(w[0].len());
        for (vi, &xi) in w.iter().zip(x.iter()) {
            out += vi * xi;
        }
        out
    };
    let mut out = vec![combine(&(&coef / cc))];
    if l > 1 {
        let chat = &coef / cc.sqrt();
        let rank_one = &chat * chat.transpose();
        for x in null_space_real(&rank_one, 0.5) {
            out.push(combine(&x));
        }
    }
    Ok(out)
}

fn pair_conjugates(blocks: &mut [JordanBlock]) {
    let n = blocks.len();
    for i in 0..n {
        if blocks[i].lambda.im <= 0.0 || blocks[i].conjugate_partner.is_some() {
            continue;
        }
        let target = blocks[i].projector.map(|z| z.conj());
        let j = (0..n)
            .filter(|&j| {
                blocks[j].lambda == blocks[i].lambda.conj()
                    && blocks[j].m == blocks[i].m
                    && blocks[j].conjugate_partner.is_none()
            })
            .min_by(|&x, &y| {
                frobenius(&(&blocks[x].projector - &target))
                    .total_cmp(&frobenius(&(&blocks[y].projector - &target)))
            });
        if let Some(j) = j {
            blocks[i].conjugate_partner = Some(j);
            blocks[j].conjugate_partner = Some(i);
        }
    }
}

fn from_user_basis(
    a: &RMat,
    basis: &[UserJordanBlock],
    opts: &DecomposeOptions,
) -> Result<SpectralDecomposition, SpectralError> {
    let d = a.nrows();
    let total: usize = basis.iter().map(|b| b.m).sum();
    if total != d {
        return Err(SpectralError::InvalidBasis(format!(
            "block sizes sum to {total}, matrix has dimension {d}"
        )));
    }
    let mut columns = Vec::with_capacity(d);
    for (k, b) in basis.iter().enumerate() {
        if b.m == 0 || b.basis.len() != b.m {
            return Err(SpectralError::InvalidBasis(format!(
                "block {k}: declared size {} but {} vectors",
                b.m,
                b.basis.len()
            )));
        }
        for v in &b.basis {
            if v.len() != d {
                return Err(SpectralError::InvalidBasis(format!(
                    "block {k}: vector of length {} in dimension {d}",
                    v.len()
                )));
            }
            columns.push(CVec::from_column_slice(v));
        }
    }
    let v = CMat::from_columns(&columns);
    let cond = condition_number(&v);
    if !(cond <= opts.cond_max) {
        return Err(SpectralError::InvalidBasis(format!(
            "basis is numerically dependent (condition number {cond:e})"
        )));
    }
    let w = v
        .clone()
        .try_inverse()
        .ok_or_else(|| SpectralError::InvalidBasis("basis is singular".into()))?;
    let ac = to_complex(a);
    let scale = a.norm().max(1.0);
    let mut shift = CMat::zeros(d, d);
    let mut blocks = Vec::new();
    let mut offset = 0;
    for (k, b) in basis.iter().enumerate() {
        for i in 0..b.m {
            let vi = &columns[offset + i];
            let mut target = vi * b.lambda;
            if i > 0 {
                target += &columns[offset + i - 1];
                shift[(offset + i - 1, offset + i)] = c(1.0);
            }
            let resid = (&ac * vi - target).norm();
            if resid > opts.tol_jordan * scale * vi.norm().max(1.0) {
                return Err(SpectralError::InvalidBasis(format!(
                    "block {k}, vector {}: chain relation residual {resid:e}",
                    i + 1
                )));
            }
        }
        let mut p = CMat::zeros(d, d);
        for i in 0..b.m {
            p += v.column(offset + i) * w.row(offset + i);
        }
        blocks.push(JordanBlock {
            lambda: b.lambda,
            m: b.m,
            basis: columns[offset..offset + b.m].to_vec(),
            projector: p,
            conjugate_partner: None,
        });
        offset += b.m;
    }
    let nc = &v * shift * &w;
    if max_imag(&nc) > opts.tol_jordan * scale {
        return Err(SpectralError::InvalidBasis(
            "nilpotent part is not real; conjugate blocks must be supplied as conjugate chains"
                .into(),
        ));
    }
    pair_conjugates(&mut blocks);
    let lambda1 = blocks
        .iter()
        .filter(|b| b.lambda.im.abs() <= opts.tol_jordan * scale)
        .map(|b| b.lambda.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let m1 = blocks
        .iter()
        .filter(|b| (b.lambda - c(lambda1)).norm() <= opts.tol_jordan * scale)
        .map(|b| b.m)
        .max()
        .unwrap_or(1);
    let a_block = opts.left_eigenvector.as_ref().and_then(|left| {
        let left = to_complex_vec(left);
        blocks.iter().position(|b| {
            b.m == 1
                && (b.lambda - c(lambda1)).norm() <= opts.tol_jordan * scale
                && (left.transpose() * &b.basis[0])[(0, 0)].norm() > 1e-10
        })
    });
    Ok(SpectralDecomposition {
        a: a.clone(),
        blocks,
        nilpotent: real_part(&nc),
        lambda1,
        m1,
        a_block,
        tol_jordan: opts.tol_jordan,
        tol_class: None,
    })
}

impl SpectralDecomposition {
    pub fn matrix(&self) -> &RMat {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn blocks(&self) -> &[JordanBlock] {
        &self.blocks
    }

    pub fn block(&self, j: usize) -> Result<&JordanBlock, SpectralError> {
        self.blocks.get(j).ok_or(SpectralError::BlockOutOfRange(j))
    }

    pub fn nilpotent(&self) -> &RMat {
        &self.nilpotent
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn tol_jordan(&self) -> f64 {
        self.tol_jordan
    }

    /// Block whose left eigenvector is the colour-weight vector `a`, for balanced structures.
    pub fn a_block(&self) -> Option<usize> {
        self.a_block
    }

    fn scale(&self) -> f64 {
        self.a.norm().max(1.0)
    }

    pub fn is_lambda1(&self, j: usize) -> bool {
        (self.blocks[j].lambda - c(self.lambda1)).norm() <= 1e-8 * self.scale()
    }

    /// Indices of the blocks belonging to `lambda1`.
    pub fn lambda1_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len()).filter(|&j| self.is_lambda1(j)).collect()
    }

    /// `lambda1` has algebraic multiplicity one.
    pub fn s_simple(&self) -> bool {
        let b = self.lambda1_blocks();
        b.len() == 1 && self.blocks[b[0]].m == 1
    }

    /// Distinct eigenvalues, ordered by decreasing real part then imaginary part.
    pub fn eigenvalues(&self) -> Vec<Complex64> {
        let tol = 1e-8 * self.scale();
        let mut out: Vec<Complex64> = Vec::new();
        for b in &self.blocks {
            if !out.iter().any(|z| (*z - b.lambda).norm() <= tol) {
                out.push(b.lambda);
            }
        }
        out.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
        out
    }

    pub fn nilpotent_complex(&self) -> CMat {
        to_complex(&self.nilpotent)
    }

    /// `N_A^k`.
    pub fn nilpotent_power(&self, k: usize) -> CMat {
        crate::linalg::mat_pow(&self.nilpotent_complex(), k)
    }

    /// Sum of projectors of the listed blocks.
    pub fn projector_sum(&self, blocks: &[usize]) -> CMat {
        let d = self.dim();
        blocks
            .iter()
            .fold(CMat::zeros(d, d), |acc, &j| acc + &self.blocks[j].projector)
    }

    /// `P_{lambda1}`, the projector onto the generalized eigenspace of `lambda1`.
    pub fn p_lambda1(&self) -> CMat {
        self.projector_sum(&self.lambda1_blocks())
    }

    pub fn eigen_class(&self, lambda: Complex64, tol_class: f64) -> EigenClass {
        let half = self.lambda1 / 2.0;
        if (lambda.re - half).abs() <= tol_class {
            EigenClass::Critical
        } else if lambda.re < half {
            EigenClass::Small
        } else {
            EigenClass::Large
        }
    }

    /// `1e-9 max(|lambda1|, 1)` unless overridden by [`Self::with_tol_class`].
    pub fn tol_class(&self) -> f64 {
        self.tol_class.unwrap_or(1e-9 * self.lambda1.abs().max(1.0))
    }

    pub fn with_tol_class(mut self, tol_class: f64) -> Self {
        self.tol_class = Some(tol_class);
        self
    }

    pub fn block_class(&self, j: usize) -> EigenClass {
        self.eigen_class(self.blocks[j].lambda, self.tol_class())
    }

    pub fn classify(&self, tol_class: f64) -> Classification {
        let mut small = Vec::new();
        let mut critical = Vec::new();
        let mut large = Vec::new();
        for z in self.eigenvalues() {
            match self.eigen_class(z, tol_class) {
                EigenClass::Small => small.push(z),
                EigenClass::Critical => critical.push(z),
                EigenClass::Large => large.push(z),
            }
        }
        let tol = 1e-8 * self.scale();
        let subcase = if !self.s_simple() {
            UrnSubcase::LargeUrnNonsimple
        } else if large
            .iter()
            .any(|z| (*z - c(self.lambda1)).norm() > tol)
        {
            UrnSubcase::LargeUrnSimple
        } else if !critical.is_empty() {
            UrnSubcase::CriticalUrn
        } else {
            UrnSubcase::SmallUrn
        };
        Classification {
            small,
            critical,
            large,
            subcase,
            tol_class,
        }
    }

    /// Dominant direction of `e^{At} mu`: `N_A^{m1-1} P_{lambda1} mu / (m1-1)!`.
    pub fn v_of_mu(&self, mu: &[f64]) -> RVec {
        let x = to_complex_vec(mu);
        let y = self.nilpotent_power(self.m1 - 1) * self.p_lambda1() * x;
        y.map(|z| z.re) / factorial(self.m1 - 1)
    }

    /// `e^{lambda t} sum_{i<m} t^i N_A^i / i! P_J`.
    pub fn block_exp(&self, j: usize, t: f64) -> CMat {
        let b = &self.blocks[j];
        let n = self.nilpotent_complex();
        let d = self.dim();
        let mut term = b.projector.clone();
        let mut acc = CMat::zeros(d, d);
        for i in 0..b.m {
            acc += &term * c(t.powi(i as i32) / factorial(i));
            term = &n * &term;
        }
        acc * (b.lambda * t).exp()
    }

    pub fn expm_complex(&self, t: f64) -> CMat {
        let d = self.dim();
        (0..self.blocks.len()).fold(CMat::zeros(d, d), |acc, j| acc + self.block_exp(j, t))
    }

    /// Real `e^{At}`; the imaginary residue from conjugate pairs is discarded.
    pub fn expm(&self, t: f64) -> RMat {
        let e = self.expm_complex(t);
        debug_assert!(
            max_imag(&e) <= IMAG_RESIDUE * max_abs(&e).max(1.0),
            "imaginary residue {} in expm",
            max_imag(&e)
        );
        real_part(&e)
    }

    /// `N_A^{m-kappa} P_J x`.
    pub fn nilpotent_project(
        &self,
        j: usize,
        kappa: usize,
        x: &CVec,
    ) -> Result<CVec, SpectralError> {
        let b = self.block(j)?;
        if kappa == 0 || kappa > b.m {
            return Err(SpectralError::KappaOutOfRange { kappa, m: b.m });
        }
        Ok(self.nilpotent_power(b.m - kappa) * (&b.projector * x))
    }

    /// Checks the resolution of identity, idempotence, orthogonality, commutation,
    /// nilpotency, reality of `N_A` and the conjugate-pair relation.
    pub fn check_invariants(&self) -> Result<(), SpectralError> {
        let d = self.dim();
        let tol = self.tol_jordan * self.cond_scale();
        let id = CMat::identity(d, d);
        let ac = to_complex(&self.a);
        let n = self.nilpotent_complex();
        let fail = |what: String| Err(SpectralError::Invariant(what));
        let total = self.projector_sum(&(0..self.blocks.len()).collect::<Vec<_>>());
        if max_abs(&(&total - &id)) > tol {
            return fail("projectors do not sum to the identity".into());
        }
        for (j, b) in self.blocks.iter().enumerate() {
            let p = &b.projector;
            if max_abs(&(p * p - p)) > tol {
                return fail(format!("P_{j} is not idempotent"));
            }
            for (k, other) in self.blocks.iter().enumerate().skip(j + 1) {
                if max_abs(&(p * &other.projector)) > tol {
                    return fail(format!("P_{j} P_{k} != 0"));
                }
            }
            let lp = p * b.lambda + &n * p;
            let scale = self.scale();
            if max_abs(&(&ac * p - &lp)) > tol * scale || max_abs(&(p * &ac - &lp)) > tol * scale
            {
                return fail(format!("A P_{j} != lambda P_{j} + N_A P_{j}"));
            }
            if max_abs(&(crate::linalg::mat_pow(&n, b.m) * p)) > tol * scale.powi(b.m as i32) {
                return fail(format!("N_A^m P_{j} != 0"));
            }
            if let Some(k) = b.conjugate_partner {
                if max_abs(&(conj(p) - &self.blocks[k].projector)) > tol {
                    return fail(format!("conj(P_{j}) != P_{k}"));
                }
            } else if b.lambda.im != 0.0 {
                return fail(format!("complex block {j} has no conjugate partner"));
            }
        }
        Ok(())
    }

    // eigenvector conditioning inflates round-off in every projector
    fn cond_scale(&self) -> f64 {
        let worst = self
            .blocks
            .iter()
            .map(|b| frobenius(&b.projector))
            .fold(1.0, f64::max);
        worst
    }
}

/// `e^{At}` via scaling and squaring of the Taylor series; no decomposition needed.
pub fn expm_series(a: &RMat, t: f64) -> RMat {
    let d = a.nrows();
    let m = a * t;
    let norm = m.abs().column_sum().max();
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let x = &m / 2f64.powi(squarings as i32);
    let mut term = RMat::identity(d, d);
    let mut sum = RMat::identity(d, d);
    for k in 1..30 {
        term = &term * &x / k as f64;
        sum += &term;
        if term.norm() <= f64::EPSILON * sum.norm() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// `e^{At}` through the memoised decomposition, falling back to the series.
pub fn expm(mm: &MeanMatrix, t: f64) -> RMat {
    match mm.spectral() {
        Ok(dec) => dec.expm(t),
        Err(_) => expm_series(mm.matrix(), t),
    }
}

pub fn real_matrix(rows: usize, cols: usize, data: &[f64]) -> RMat {
    DMatrix::from_row_slice(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::urn::{mean_matrix, ReplacementStructure};
    use approx::assert_abs_diff_eq;

    fn friedman(alpha: i64, gamma: i64) -> MeanMatrix {
        mean_matrix(&ReplacementStructure::friedman(alpha, gamma))
    }

    fn assert_mat(m: &CMat, expect: &[f64], tol: f64) {
        let d = m.nrows();
        for i in 0..d {
            for j in 0..d {
                assert_abs_diff_eq!(m[(i, j)].re, expect[i * d + j], epsilon = tol);
                assert_abs_diff_eq!(m[(i, j)].im, 0.0, epsilon = tol);
            }
        }
    }

    #[test]
    fn perron_frobenius_examples() {
        let (l, m, a3) = perron_frobenius(&friedman(5, 1));
        assert_abs_diff_eq!(l, 6.0, epsilon = 1e-9);
        assert_eq!((m, a3), (1, true));
        let id = mean_matrix(&ReplacementStructure::identity(2, 1));
        let (l, m, _) = perron_frobenius(&id);
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-12);
        assert_eq!(m, 1);
        let matching = mean_matrix(&ReplacementStructure::matching(2));
        let (l, _, a3) = perron_frobenius(&matching);
        assert_abs_diff_eq!(l, -1.0, epsilon = 1e-12);
        assert!(!a3);
        let jordan = MeanMatrix::from_matrix(real_matrix(2, 2, &[1.0, 1.0, 0.0, 1.0]));
        assert_eq!(perron_frobenius(&jordan).1, 2);
    }

    #[test]
    fn friedman_projectors() {
        let mm = friedman(2, 1);
        let dec = mm.spectral().unwrap();
        assert_eq!(dec.blocks().len(), 2);
        let j1 = dec.lambda1_blocks()[0];
        let j2 = 1 - j1;
        assert_abs_diff_eq!(dec.blocks()[j1].lambda.re, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dec.blocks()[j2].lambda.re, 1.0, epsilon = 1e-12);
        assert_mat(&dec.blocks()[j1].projector, &[0.5, 0.5, 0.5, 0.5], 1e-12);
        assert_mat(&dec.blocks()[j2].projector, &[0.5, -0.5, -0.5, 0.5], 1e-12);
        assert_eq!(dec.a_block(), Some(j1));
        assert_abs_diff_eq!(dec.blocks()[j1].basis[0][0].re, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn identity_decomposition() {
        let mm = mean_matrix(&ReplacementStructure::identity(3, 1));
        let dec = mm.spectral().unwrap();
        assert_mat(&dec.p_lambda1(), &[1., 0., 0., 0., 1., 0., 0., 0., 1.], 1e-12);
        assert_eq!(dec.nilpotent(), &RMat::zeros(3, 3));
        assert_eq!(dec.m1(), 1);
        assert!(!dec.s_simple());
        assert_eq!(dec.classify(1e-9).subcase, UrnSubcase::LargeUrnNonsimple);
        let v = dec.v_of_mu(&[0.2, 0.3, 0.5]);
        assert_abs_diff_eq!(v[1], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn defective_needs_basis() {
        let a = real_matrix(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let mm = MeanMatrix::from_matrix(a.clone());
        assert!(matches!(
            decompose(&mm, 1e-8),
            Err(SpectralError::DefectiveMatrix { .. } | SpectralError::MissingEigenvectors { .. })
        ));
        let opts = DecomposeOptions {
            basis: Some(vec![UserJordanBlock {
                lambda: c(1.0),
                m: 2,
                basis: vec![vec![c(1.0), c(0.0)], vec![c(0.0), c(1.0)]],
            }]),
            ..Default::default()
        };
        let dec = decompose_with(&a, &opts).unwrap();
        assert_eq!(dec.blocks().len(), 1);
        assert_eq!(dec.m1(), 2);
        assert_eq!(dec.nilpotent(), &real_matrix(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        let x = to_complex_vec(&[0.0, 1.0]);
        let y = dec.nilpotent_project(0, 1, &x).unwrap();
        assert_abs_diff_eq!(y[0].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1].re, 0.0, epsilon = 1e-12);
        assert!(dec.nilpotent_project(0, 3, &x).is_err());
        // e^{At} = e^t [[1, t], [0, 1]]
        let e = dec.expm(0.5);
        assert_abs_diff_eq!(e[(0, 1)], 0.5 * 0.5f64.exp(), epsilon = 1e-12);
    }

    #[test]
    fn bad_user_basis() {
        let a = real_matrix(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let opts = DecomposeOptions {
            basis: Some(vec![UserJordanBlock {
                lambda: c(1.0),
                m: 2,
                basis: vec![vec![c(0.0), c(1.0)], vec![c(1.0), c(0.0)]],
            }]),
            ..Default::default()
        };
        assert!(matches!(
            decompose_with(&a, &opts),
            Err(SpectralError::InvalidBasis(_))
        ));
    }

    #[test]
    fn classification_examples() {
        let cases = [
            ((2, 1), UrnSubcase::SmallUrn),
            ((3, 1), UrnSubcase::CriticalUrn),
            ((5, 1), UrnSubcase::LargeUrnSimple),
        ];
        for ((alpha, gamma), expect) in cases {
            let mm = friedman(alpha, gamma);
            let dec = mm.spectral().unwrap();
            let cl = dec.classify(dec.tol_class());
            assert_eq!(cl.subcase, expect, "Friedman({alpha},{gamma})");
        }
        let mm = friedman(5, 1);
        let cl = mm.spectral().unwrap().classify(1e-9 * 6.0);
        assert_eq!(cl.large.len(), 2);
        assert!(cl.small.is_empty() && cl.critical.is_empty());
    }

    #[test]
    fn friedman_expm_closed_form() {
        let mm = friedman(3, 2);
        let t = 0.7;
        let e = mm.spectral().unwrap().expm(t);
        let (ch, sh) = ((2.0 * t).cosh(), (2.0 * t).sinh());
        let s = (3.0 * t).exp();
        assert_abs_diff_eq!(e[(0, 0)], s * ch, epsilon = 1e-9 * s);
        assert_abs_diff_eq!(e[(0, 1)], s * sh, epsilon = 1e-9 * s);
        let series = expm_series(mm.matrix(), t);
        assert!((series - e).norm() < 1e-9 * s);
        let matching = mean_matrix(&ReplacementStructure::matching(2));
        let e = expm(&matching, 2f64.ln());
        assert_abs_diff_eq!(e[(0, 0)], 0.5, epsilon = 1e-14);
        assert_eq!(expm(&matching, 0.0), RMat::identity(2, 2));
    }

    #[test]
    fn v_of_mu_examples() {
        let mm = friedman(4, 1);
        let v = mm.spectral().unwrap().v_of_mu(&[0.3, 0.7]);
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-12);
        let id = mean_matrix(&ReplacementStructure::identity(2, 1));
        let v = id.spectral().unwrap().v_of_mu(&[0.3, 0.7]);
        assert_abs_diff_eq!(v[0], 0.3, epsilon = 1e-12);
        // diag(identity with S = 2, Friedman(1, 1)): both top eigendirections share lambda = 2
        let a = real_matrix(3, 3, &[2., 0., 0., 0., 1., 1., 0., 1., 1.]);
        let mm = MeanMatrix::from_matrix(a);
        let v = mm.spectral().unwrap().v_of_mu(&[0.2, 0.3, 0.5]);
        // explicit eigenvectors e1 and (0, 1, 1)/2 with left vectors e1 and (0, 1, 1)
        assert_abs_diff_eq!(v[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 0.4, epsilon = 1e-12);
    }

    #[test]
    fn complex_pairs() {
        // cyclic three-colour rule: rotation part gives a conjugate pair
        let a = real_matrix(3, 3, &[0., 0., 1., 1., 0., 0., 0., 1., 0.]);
        let mm = MeanMatrix::from_matrix(a.clone());
        let dec = mm.spectral().unwrap();
        let pairs = dec
            .blocks()
            .iter()
            .filter(|b| b.conjugate_partner.is_some())
            .count();
        assert_eq!(pairs, 2);
        let e = dec.expm(1.3);
        assert!((e - expm_series(&a, 1.3)).norm() < 1e-10);
    }
}
