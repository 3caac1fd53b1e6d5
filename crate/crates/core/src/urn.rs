//! Replacement structures, urn descriptions and the mean replacement matrix.
//!
//! A replacement structure is a pair `(a, (xi_i))`: positive colour weights and,
//! for every colour, a finite distribution over integer replacement vectors.
//! Drawing a ball of colour `i` happens with probability proportional to
//! `a_i * U_i`, after which a sample of `xi_i` is added to the urn.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{SpectralDecomposition, SpectralError};

/// Probabilities must sum to one within this tolerance.
pub const PROBABILITY_TOL: f64 = 1e-12;
/// Tolerance on `a . xi = S` for every support atom.
pub const BALANCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UrnError {
    #[error("structure has no colours")]
    Empty,
    #[error("expected {expected} entries for {what}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("colour weight a_{colour} = {value} is not positive")]
    NonPositiveWeight { colour: usize, value: f64 },
    #[error("rule for colour {colour} has no atoms")]
    EmptyRule { colour: usize },
    #[error("rule {colour}, atom {atom}: probability {p} outside [0, 1]")]
    BadProbability { colour: usize, atom: usize, p: f64 },
    #[error("rule {colour}: probabilities sum to {sum}, not 1")]
    NotNormalized { colour: usize, sum: f64 },
    #[error("rule {colour}, atom {atom}: entry {entry} = {value} violates xi_ii >= -1, xi_ij >= 0 (non-tenable rule)")]
    NotTenable {
        colour: usize,
        atom: usize,
        entry: usize,
        value: i64,
    },
    #[error("rule {colour}, atom {atom}: added mass {mass} differs from declared S = {declared} (unbalanced rule)")]
    Unbalanced {
        colour: usize,
        atom: usize,
        mass: f64,
        declared: f64,
    },
    #[error("structure is not balanced")]
    NotBalanced,
    #[error("balance constant S must be non-zero")]
    ZeroBalance,
    #[error("colour index {0} out of range")]
    ColourOutOfRange(usize),
    #[error("initial composition: {0}")]
    Composition(String),
}

/// A rational number `num / den` used for initial colour proportions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self, UrnError> {
        if den == 0 {
            return Err(UrnError::Composition("zero denominator".into()));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl std::str::FromStr for Fraction {
    type Err = UrnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || UrnError::Composition(format!("cannot parse fraction {s:?}"));
        let s = s.trim();
        match s.split_once('/') {
            Some((n, d)) => {
                let n = n.trim().parse().map_err(|_| bad())?;
                let d = d.trim().parse().map_err(|_| bad())?;
                Fraction::new(n, d)
            }
            None => Fraction::new(s.parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Finite distribution of the replacement vector added after drawing `colour`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementDistribution {
    colour: usize,
    atoms: Vec<Vec<i64>>,
    probs: Vec<f64>,
    // cumulative probabilities, last entry forced to 1
    cumulative: Vec<f64>,
}

impl ReplacementDistribution {
    /// Builds the rule without checking tenability; see [`validate_structure`].
    pub fn new(colour: usize, atoms: Vec<(Vec<i64>, f64)>) -> Result<Self, UrnError> {
        if atoms.is_empty() {
            return Err(UrnError::EmptyRule { colour });
        }
        let mut sum = 0.0;
        for (k, (_, p)) in atoms.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(UrnError::BadProbability {
                    colour,
                    atom: k,
                    p: *p,
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROBABILITY_TOL {
            return Err(UrnError::NotNormalized { colour, sum });
        }
        let (atoms, probs): (Vec<_>, Vec<_>) = atoms.into_iter().unzip();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(Self {
            colour,
            atoms,
            probs,
            cumulative,
        })
    }

    /// Point mass at `atom`.
    pub fn deterministic(colour: usize, atom: Vec<i64>) -> Self {
        Self::new(colour, vec![(atom, 1.0)]).expect("point mass is a valid distribution")
    }

    pub fn colour(&self) -> usize {
        self.colour
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[i64], f64)> {
        self.atoms
            .iter()
            .map(Vec::as_slice)
            .zip(self.probs.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, k: usize) -> &[i64] {
        &self.atoms[k]
    }

    pub fn is_deterministic(&self) -> bool {
        self.atoms.len() == 1
    }

    /// Index of the atom selected by a uniform variate `u` in `[0, 1)`.
    #[inline]
    pub fn pick(&self, u: f64) -> usize {
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.atoms.len() - 1)
    }

    pub fn mean(&self) -> Vec<f64> {
        let d = self.atoms[0].len();
        let mut m = vec![0.0; d];
        for (atom, p) in self.atoms() {
            for (mj, &x) in m.iter_mut().zip(atom) {
                *mj += p * x as f64;
            }
        }
        m
    }
}

/// Colour weights plus one replacement rule per colour.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementStructure {
    weights: Vec<f64>,
    rules: Vec<ReplacementDistribution>,
    declared_balance: Option<f64>,
}

impl ReplacementStructure {
    pub fn new(
        weights: Vec<f64>,
        rules: Vec<ReplacementDistribution>,
        declared_balance: Option<f64>,
    ) -> Result<Self, UrnError> {
        let d = weights.len();
        if d == 0 {
            return Err(UrnError::Empty);
        }
        if rules.len() != d {
            return Err(UrnError::Dimension {
                what: "rules",
                expected: d,
                got: rules.len(),
            });
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(UrnError::NonPositiveWeight {
                    colour: i,
                    value: w,
                });
            }
        }
        for (i, rule) in rules.iter().enumerate() {
            if rule.colour != i {
                return Err(UrnError::Composition(format!(
                    "rule at position {i} is declared for colour {}",
                    rule.colour
                )));
            }
            for atom in &rule.atoms {
                if atom.len() != d {
                    return Err(UrnError::Dimension {
                        what: "atom",
                        expected: d,
                        got: atom.len(),
                    });
                }
            }
        }
        Ok(Self {
            weights,
            rules,
            declared_balance,
        })
    }

    /// Friedman's urn: uniform draw, `alpha` balls of the drawn colour and
    /// `gamma` of the other one.
    pub fn friedman(alpha: i64, gamma: i64) -> Self {
        let rules = vec![
            ReplacementDistribution::deterministic(0, vec![alpha, gamma]),
            ReplacementDistribution::deterministic(1, vec![gamma, alpha]),
        ];
        Self::new(vec![1.0, 1.0], rules, None).expect("friedman structure")
    }

    /// `d` colours, uniform draw, `s` balls of the drawn colour.
    pub fn identity(d: usize, s: i64) -> Self {
        let rules = (0..d)
            .map(|i| {
                let mut e = vec![0; d];
                e[i] = s;
                ReplacementDistribution::deterministic(i, e)
            })
            .collect();
        Self::new(vec![1.0; d], rules, None).expect("identity structure")
    }

    /// Matching problem: the drawn ball is removed, `xi_i = -e_i`.
    pub fn matching(d: usize) -> Self {
        Self::identity(d, -1)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rules(&self) -> &[ReplacementDistribution] {
        &self.rules
    }

    pub fn rule(&self, colour: usize) -> &ReplacementDistribution {
        &self.rules[colour]
    }

    pub fn declared_balance(&self) -> Option<f64> {
        self.declared_balance
    }

    /// The balance constant `S`, if every atom adds the same mass.
    pub fn balance(&self) -> Option<f64> {
        let mut s: Option<f64> = None;
        for rule in &self.rules {
            for (atom, _) in rule.atoms() {
                let m = dot_i(&self.weights, atom);
                match s {
                    None => s = Some(m),
                    Some(s0) if (m - s0).abs() > BALANCE_TOL * s0.abs().max(1.0) => return None,
                    _ => {}
                }
            }
        }
        s.filter(|&s| s != 0.0)
    }

    /// Balance constant or [`UrnError::NotBalanced`].
    pub fn require_balance(&self) -> Result<f64, UrnError> {
        self.balance().ok_or(UrnError::NotBalanced)
    }

    /// Exact finite-sum evaluation of `E[xi_i xi_i']`.
    pub fn second_moment(&self, colour: usize) -> Result<DMatrix<f64>, UrnError> {
        let rule = self
            .rules
            .get(colour)
            .ok_or(UrnError::ColourOutOfRange(colour))?;
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for (atom, p) in rule.atoms() {
            for r in 0..d {
                for c in 0..d {
                    m[(r, c)] += p * (atom[r] * atom[c]) as f64;
                }
            }
        }
        Ok(m)
    }

    pub fn mean_matrix(&self) -> MeanMatrix {
        mean_matrix(self)
    }
}

fn dot_i(a: &[f64], x: &[i64]) -> f64 {
    a.iter().zip(x).map(|(a, &x)| a * x as f64).sum()
}

/// Total mass `a . state`.
pub fn total_mass(state: &[i64], weights: &[f64]) -> f64 {
    dot_i(weights, state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub colours: usize,
    pub tenable: bool,
    pub normalized: bool,
    /// `Some(S)` when balanced.
    pub balance: Option<f64>,
    /// Left eigenvector `a` of the mean matrix, present when balanced.
    pub left_eigenvector: Option<Vec<f64>>,
}

impl ValidationReport {
    pub fn is_balanced(&self) -> bool {
        self.balance.is_some()
    }
}

/// Checks (A2), normalization and balance.
///
/// Non-tenable atoms and atoms contradicting a declared `S` are errors; an
/// undeclared structure that happens to be unbalanced is reported, not rejected.
pub fn validate_structure(structure: &ReplacementStructure) -> Result<ValidationReport, UrnError> {
    let d = structure.dim();
    for (i, rule) in structure.rules.iter().enumerate() {
        let sum: f64 = rule.probs.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_TOL {
            return Err(UrnError::NotNormalized { colour: i, sum });
        }
        for (k, atom) in rule.atoms.iter().enumerate() {
            for (j, &x) in atom.iter().enumerate() {
                let floor = if j == i { -1 } else { 0 };
                if x < floor {
                    return Err(UrnError::NotTenable {
                        colour: i,
                        atom: k,
                        entry: j,
                        value: x,
                    });
                }
            }
        }
    }
    if let Some(declared) = structure.declared_balance {
        if declared == 0.0 {
            return Err(UrnError::ZeroBalance);
        }
        for (i, rule) in structure.rules.iter().enumerate() {
            for (k, atom) in rule.atoms.iter().enumerate() {
                let mass = dot_i(&structure.weights, atom);
                if (mass - declared).abs() > BALANCE_TOL * declared.abs().max(1.0) {
                    return Err(UrnError::Unbalanced {
                        colour: i,
                        atom: k,
                        mass,
                        declared,
                    });
                }
            }
        }
    }
    let balance = structure.balance();
    Ok(ValidationReport {
        colours: d,
        tenable: true,
        normalized: true,
        balance,
        left_eigenvector: balance.map(|_| structure.weights.clone()),
    })
}

/// `A = (a_j E[xi_{j,i}])`, with a memoised spectral decomposition.
#[derive(Debug)]
pub struct MeanMatrix {
    matrix: DMatrix<f64>,
    // colour weights of a balanced structure; orients the S-eigenspace basis
    balance_left: Option<Vec<f64>>,
    pub(crate) memo: OnceLock<Result<SpectralDecomposition, SpectralError>>,
}

impl Clone for MeanMatrix {
    fn clone(&self) -> Self {
        Self {
            matrix: self.matrix.clone(),
            balance_left: self.balance_left.clone(),
            memo: OnceLock::new(),
        }
    }
}

impl PartialEq for MeanMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

impl MeanMatrix {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        assert!(matrix.is_square(), "mean matrix must be square");
        Self {
            matrix,
            balance_left: None,
            memo: OnceLock::new(),
        }
    }

    /// Mean matrix of a balanced structure whose left eigenvector for `S` is `weights`.
    pub fn with_left_eigenvector(matrix: DMatrix<f64>, weights: Vec<f64>) -> Self {
        let mut m = Self::from_matrix(matrix);
        m.balance_left = Some(weights);
        m
    }

    pub fn left_eigenvector(&self) -> Option<&[f64]> {
        self.balance_left.as_deref()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

pub fn mean_matrix(structure: &ReplacementStructure) -> MeanMatrix {
    let d = structure.dim();
    let mut a = DMatrix::zeros(d, d);
    for j in 0..d {
        let mean = structure.rules[j].mean();
        for i in 0..d {
            a[(i, j)] = structure.weights[j] * mean[i];
        }
    }
    match structure.balance() {
        Some(_) => MeanMatrix::with_left_eigenvector(a, structure.weights.clone()),
        None => MeanMatrix::from_matrix(a),
    }
}

/// Structure, initial size `N`, initial proportions and draw budget `n`.
#[derive(Debug, Clone)]
pub struct UrnSpec {
    structure: ReplacementStructure,
    initial_size: u64,
    mu: Vec<Fraction>,
    draws: u64,
}

impl UrnSpec {
    pub fn new(
        structure: ReplacementStructure,
        initial_size: u64,
        mu: Vec<Fraction>,
        draws: u64,
    ) -> Result<Self, UrnError> {
        if initial_size == 0 {
            return Err(UrnError::Composition("N must be positive".into()));
        }
        if draws == 0 {
            return Err(UrnError::Composition("n must be positive".into()));
        }
        if mu.len() != structure.dim() {
            return Err(UrnError::Dimension {
                what: "mu",
                expected: structure.dim(),
                got: mu.len(),
            });
        }
        // exact rational sum
        let (mut num, mut den) = (0u128, 1u128);
        for f in &mu {
            num = num * f.den as u128 + f.num as u128 * den;
            den *= f.den as u128;
            let g = gcd128(num, den);
            num /= g;
            den /= g;
        }
        if num != den {
            return Err(UrnError::Composition(format!(
                "mu sums to {num}/{den}, not 1"
            )));
        }
        for (i, f) in mu.iter().enumerate() {
            if !initial_size.is_multiple_of(f.den) {
                return Err(UrnError::Composition(format!(
                    "N = {initial_size} times mu_{i} = {f} is not an integer"
                )));
            }
        }
        Ok(Self {
            structure,
            initial_size,
            mu,
            draws,
        })
    }

    /// Convenience constructor for uniform proportions.
    pub fn uniform(structure: ReplacementStructure, initial_size: u64, draws: u64) -> Result<Self, UrnError> {
        let d = structure.dim() as u64;
        let mu = vec![Fraction::new(1, d)?; d as usize];
        Self::new(structure, initial_size, mu, draws)
    }

    pub fn structure(&self) -> &ReplacementStructure {
        &self.structure
    }

    pub fn initial_size(&self) -> u64 {
        self.initial_size
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn mu_fractions(&self) -> &[Fraction] {
        &self.mu
    }

    pub fn mu(&self) -> Vec<f64> {
        self.mu.iter().map(Fraction::value).collect()
    }

    /// `N mu` as an integer composition.
    pub fn initial_composition(&self) -> Vec<i64> {
        self.mu
            .iter()
            .map(|f| (self.initial_size / f.den * f.num) as i64)
            .collect()
    }

    /// `beta_1 = a . mu`.
    pub fn beta1(&self) -> f64 {
        self.structure
            .weights
            .iter()
            .zip(self.mu())
            .map(|(a, m)| a * m)
            .sum()
    }
}

fn gcd128(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_mat(m: &DMatrix<f64>, rows: &[&[f64]]) {
        for (r, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((m[(r, c)] - v).abs() < 1e-12, "{m}");
            }
        }
    }

    #[test]
    fn friedman_is_balanced() {
        let r = validate_structure(&ReplacementStructure::friedman(2, 1)).unwrap();
        assert_eq!(r.balance, Some(3.0));
        assert_eq!(r.left_eigenvector.as_deref(), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn identity_and_matching_balance() {
        let id = validate_structure(&ReplacementStructure::identity(2, 1)).unwrap();
        assert_eq!(id.balance, Some(1.0));
        let m = validate_structure(&ReplacementStructure::matching(2)).unwrap();
        assert_eq!(m.balance, Some(-1.0));
    }

    #[test]
    fn non_tenable_atom_rejected() {
        let rules = vec![
            ReplacementDistribution::deterministic(0, vec![-2, 1]),
            ReplacementDistribution::deterministic(1, vec![0, 1]),
        ];
        let s = ReplacementStructure::new(vec![1.0, 1.0], rules, None).unwrap();
        assert!(matches!(
            validate_structure(&s),
            Err(UrnError::NotTenable { colour: 0, .. })
        ));
        let rules = vec![
            ReplacementDistribution::deterministic(0, vec![1, -1]),
            ReplacementDistribution::deterministic(1, vec![0, 1]),
        ];
        let s = ReplacementStructure::new(vec![1.0, 1.0], rules, None).unwrap();
        assert!(validate_structure(&s).is_err());
    }

    #[test]
    fn perturbed_atom_breaks_balance() {
        let rules = vec![
            ReplacementDistribution::deterministic(0, vec![2, 2]),
            ReplacementDistribution::deterministic(1, vec![1, 2]),
        ];
        let s = ReplacementStructure::new(vec![1.0, 1.0], rules.clone(), None).unwrap();
        assert_eq!(validate_structure(&s).unwrap().balance, None);
        let s = ReplacementStructure::new(vec![1.0, 1.0], rules, Some(3.0)).unwrap();
        assert!(matches!(
            validate_structure(&s),
            Err(UrnError::Unbalanced { colour: 0, .. })
        ));
    }

    #[test]
    fn bad_probabilities() {
        assert!(matches!(
            ReplacementDistribution::new(0, vec![(vec![1], 0.5), (vec![0], 0.4)]),
            Err(UrnError::NotNormalized { .. })
        ));
        assert!(matches!(
            ReplacementDistribution::new(0, vec![]),
            Err(UrnError::EmptyRule { .. })
        ));
    }

    #[test]
    fn mean_matrices() {
        approx_mat(
            ReplacementStructure::friedman(5, 1).mean_matrix().matrix(),
            &[&[5.0, 1.0], &[1.0, 5.0]],
        );
        let id = ReplacementStructure::identity(3, 2).mean_matrix();
        assert_eq!(id.matrix(), &(DMatrix::identity(3, 3) * 2.0));
        approx_mat(
            ReplacementStructure::matching(2).mean_matrix().matrix(),
            &[&[-1.0, 0.0], &[0.0, -1.0]],
        );
    }

    #[test]
    fn mean_matrix_left_eigenvector() {
        let rules = vec![
            ReplacementDistribution::new(0, vec![(vec![0, 3], 0.25), (vec![1, 1], 0.75)]).unwrap(),
            ReplacementDistribution::new(1, vec![(vec![2, -1], 1.0)]).unwrap(),
        ];
        let s = ReplacementStructure::new(vec![2.0, 1.0], rules, None).unwrap();
        let bal = s.require_balance().unwrap();
        assert_eq!(bal, 3.0);
        let a = nalgebra::DVector::from_vec(s.weights().to_vec());
        let left = s.mean_matrix().matrix().transpose() * &a;
        assert!((left - a * bal).norm() < 1e-9);
    }

    #[test]
    fn second_moments() {
        let f = ReplacementStructure::friedman(2, 1);
        approx_mat(&f.second_moment(0).unwrap(), &[&[4.0, 2.0], &[2.0, 1.0]]);
        let m = ReplacementStructure::matching(2);
        approx_mat(&m.second_moment(0).unwrap(), &[&[1.0, 0.0], &[0.0, 0.0]]);
        let two = ReplacementStructure::new(
            vec![1.0, 1.0],
            vec![
                ReplacementDistribution::new(0, vec![(vec![1, 0], 0.5), (vec![0, 1], 0.5)]).unwrap(),
                ReplacementDistribution::deterministic(1, vec![0, 1]),
            ],
            None,
        )
        .unwrap();
        approx_mat(&two.second_moment(0).unwrap(), &[&[0.5, 0.0], &[0.0, 0.5]]);
        assert!(matches!(f.second_moment(2), Err(UrnError::ColourOutOfRange(2))));
    }

    #[test]
    fn masses() {
        assert_eq!(total_mass(&[3, 4], &[1.0, 1.0]), 7.0);
        assert_eq!(total_mass(&[0, 0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn urn_spec_integrality() {
        let half: Fraction = "1/2".parse().unwrap();
        let third: Fraction = "1/3".parse().unwrap();
        let f = ReplacementStructure::friedman(2, 1);
        let spec = UrnSpec::new(f.clone(), 10, vec![half, half], 4).unwrap();
        assert_eq!(spec.initial_composition(), vec![5, 5]);
        assert_eq!(spec.beta1(), 1.0);
        assert!(UrnSpec::new(f.clone(), 10, vec![third, "2/3".parse().unwrap()], 4).is_err());
        assert!(UrnSpec::new(f, 10, vec![half, third], 4).is_err());
    }
}
