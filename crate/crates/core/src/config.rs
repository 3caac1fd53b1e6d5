//! Experiment configuration: a strict JSON tree describing a structure, an
//! urn, an ensemble, an optional suite and tolerances.
//!
//! Syntax errors carry a line and column; semantic errors carry the JSON path
//! of the offending value. Unknown keys are rejected everywhere.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::quad::DEFAULT_QUAD_TOL;
use crate::sim::{EnsembleSpec, Regime, TimeScale};
use crate::spectral::{perron_frobenius, DecomposeOptions, UrnSubcase, UserJordanBlock, DEFAULT_TOL_JORDAN};
use crate::suites::{FluctuationExperiment, Suite};
use crate::urn::{mean_matrix, validate_structure, Fraction, ReplacementDistribution, ReplacementStructure, UrnSpec};

pub const DEFAULT_SEED: u64 = 20240601;
pub const DEFAULT_REPLICATES: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum Location {
    Text { line: usize, column: usize },
    Path(String),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Text { line, column } => write!(f, "line {line}, column {column}"),
            Location::Path(p) => f.write_str(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub location: Location,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub issues: Vec<ConfigIssue>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, issue) in self.issues.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            issues: vec![ConfigIssue {
                location: Location::Path(path.into()),
                message: message.into(),
            }],
        }
    }
}

/// A real number or a `[re, im]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComplexValue {
    Real(f64),
    Pair([f64; 2]),
}

impl ComplexValue {
    pub fn value(self) -> Complex64 {
        match self {
            ComplexValue::Real(x) => Complex64::new(x, 0.0),
            ComplexValue::Pair([re, im]) => Complex64::new(re, im),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub add: Vec<i64>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JordanBlockConfig {
    pub lambda: ComplexValue,
    pub m: usize,
    /// Chain vectors `v_1 .. v_m`.
    pub basis: Vec<Vec<ComplexValue>>,
}

/// Either `preset` alone or `weights` plus `rules`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// `rules[i]` lists the atoms of the replacement law of colour `i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<Vec<Vec<AtomConfig>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jordan_basis: Option<Vec<JordanBlockConfig>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UrnConfig {
    #[serde(rename = "N")]
    pub initial_size: u64,
    pub mu: Vec<Fraction>,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_replicates")]
    pub replicates: u64,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "default_seed")]
    pub base_seed: u64,
    /// Also export the death times of the embedded branching process.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub record_tau: bool,
}

fn default_replicates() -> u64 {
    DEFAULT_REPLICATES
}

fn default_grid() -> Vec<f64> {
    vec![1.0]
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            grid: default_grid(),
            base_seed: DEFAULT_SEED,
            record_tau: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_jordan: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_class: Option<f64>,
    /// Relative Frobenius tolerance of the covariance comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc_rel_tol: Option<f64>,
    /// Entrywise z-score cap; absent means the default of the regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_cap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub structure: StructureConfig,
    pub urn: UrnConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcase: Option<UrnSubcase>,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite: Option<String>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn parse_args(text: &str, name: &str) -> Option<Vec<i64>> {
    let rest = text.strip_prefix(name)?.trim();
    let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
    inner.split(',').map(|x| x.trim().parse().ok()).collect()
}

/// Expands `friedman(alpha,gamma)`, `matching(d)` or `identity(d,s)`.
pub fn preset_structure(text: &str) -> Result<ReplacementStructure, String> {
    let text = text.trim();
    let bad = || format!("unknown preset {text:?} (expected friedman(alpha,gamma), matching(d) or identity(d,s))");
    let dim = |d: i64| -> Result<usize, String> {
        if (1..=64).contains(&d) {
            Ok(d as usize)
        } else {
            Err(format!("preset dimension {d} outside 1..=64"))
        }
    };
    if let Some(v) = parse_args(text, "friedman") {
        let [alpha, gamma] = v[..] else { return Err(bad()) };
        if alpha < -1 || gamma < 0 || alpha + gamma == 0 {
            return Err(format!("friedman({alpha},{gamma}) needs alpha >= -1, gamma >= 0 and alpha + gamma != 0"));
        }
        Ok(ReplacementStructure::friedman(alpha, gamma))
    } else if let Some(v) = parse_args(text, "matching") {
        let [d] = v[..] else { return Err(bad()) };
        Ok(ReplacementStructure::matching(dim(d)?))
    } else if let Some(v) = parse_args(text, "identity") {
        let [d, s] = v[..] else { return Err(bad()) };
        if s < -1 || s == 0 {
            return Err(format!("identity({d},{s}) needs s >= -1 and s != 0"));
        }
        Ok(ReplacementStructure::identity(dim(d)?, s))
    } else {
        Err(bad())
    }
}

impl StructureConfig {
    pub fn preset(text: &str) -> Self {
        Self {
            preset: Some(text.to_string()),
            ..Self::default()
        }
    }

    pub fn build(&self) -> Result<ReplacementStructure, ConfigError> {
        let s = match (&self.preset, &self.weights, &self.rules) {
            (Some(p), None, None) => {
                let s = preset_structure(p).map_err(|e| ConfigError::at("structure.preset", e))?;
                match self.balance {
                    Some(b) => ReplacementStructure::new(s.weights().to_vec(), s.rules().to_vec(), Some(b))
                        .map_err(|e| ConfigError::at("structure", e.to_string()))?,
                    None => s,
                }
            }
            (Some(_), _, _) => return Err(ConfigError::at("structure", "give either preset or weights and rules, not both")),
            (None, Some(w), Some(rules)) => {
                if rules.is_empty() {
                    return Err(ConfigError::at("structure.rules", "rules list is empty"));
                }
                let mut dists = Vec::with_capacity(rules.len());
                for (i, rule) in rules.iter().enumerate() {
                    if rule.is_empty() {
                        return Err(ConfigError::at(format!("structure.rules[{i}]"), "rule has no atoms"));
                    }
                    let atoms = rule.iter().map(|a| (a.add.clone(), a.p)).collect();
                    let dist = ReplacementDistribution::new(i, atoms)
                        .map_err(|e| ConfigError::at(format!("structure.rules[{i}]"), e.to_string()))?;
                    dists.push(dist);
                }
                ReplacementStructure::new(w.clone(), dists, self.balance)
                    .map_err(|e| ConfigError::at("structure", e.to_string()))?
            }
            (None, None, _) => return Err(ConfigError::at("structure", "missing weights (or a preset)")),
            (None, Some(_), None) => return Err(ConfigError::at("structure", "missing rules")),
        };
        validate_structure(&s).map_err(|e| ConfigError::at("structure", e.to_string()))?;
        Ok(s)
    }

    fn user_basis(&self, d: usize) -> Result<Option<Vec<UserJordanBlock>>, ConfigError> {
        let Some(blocks) = &self.jordan_basis else {
            return Ok(None);
        };
        let mut out = Vec::with_capacity(blocks.len());
        for (j, b) in blocks.iter().enumerate() {
            let path = format!("structure.jordan_basis[{j}]");
            if b.m == 0 || b.basis.len() != b.m {
                return Err(ConfigError::at(path, format!("block size m = {} but {} chain vectors", b.m, b.basis.len())));
            }
            if let Some(k) = b.basis.iter().position(|v| v.len() != d) {
                return Err(ConfigError::at(format!("{path}.basis[{k}]"), format!("vector must have {d} entries")));
            }
            out.push(UserJordanBlock {
                lambda: b.lambda.value(),
                m: b.m,
                basis: b.basis.iter().map(|v| v.iter().map(|z| z.value()).collect()).collect(),
            });
        }
        Ok(Some(out))
    }
}

fn positive(path: &str, x: Option<f64>) -> Result<(), ConfigError> {
    match x {
        Some(v) if !(v > 0.0 && v.is_finite()) => Err(ConfigError::at(path, format!("must be positive and finite, got {v}"))),
        _ => Ok(()),
    }
}

/// `n <= N / 10` reads as IBD, `n >= 10 N` as TSD and anything between as TR.
pub fn infer_regime(initial_size: u64, draws: u64) -> Regime {
    let ratio = draws as f64 / initial_size as f64;
    if ratio <= 0.1 {
        Regime::Ibd
    } else if ratio >= 10.0 {
        Regime::Tsd
    } else {
        Regime::Tr
    }
}

impl ExperimentConfig {
    pub fn structure(&self) -> Result<ReplacementStructure, ConfigError> {
        self.structure.build()
    }

    pub fn urn_spec(&self) -> Result<UrnSpec, ConfigError> {
        let s = self.structure()?;
        let u = &self.urn;
        if u.mu.len() != s.dim() {
            return Err(ConfigError::at("urn.mu", format!("expected {} proportions, got {}", s.dim(), u.mu.len())));
        }
        for (i, f) in u.mu.iter().enumerate() {
            if !u.initial_size.is_multiple_of(f.den) {
                return Err(ConfigError::at(
                    format!("urn.mu[{i}]"),
                    format!("N = {} is not a multiple of the denominator of {f}", u.initial_size),
                ));
            }
        }
        UrnSpec::new(s, u.initial_size, u.mu.clone(), u.n).map_err(|e| ConfigError::at("urn", e.to_string()))
    }

    pub fn regime(&self) -> Regime {
        self.regime.unwrap_or_else(|| infer_regime(self.urn.initial_size, self.urn.n))
    }

    pub fn decompose_options(&self) -> Result<DecomposeOptions, ConfigError> {
        let d = self.structure()?.dim();
        Ok(DecomposeOptions {
            tol_jordan: self.tolerances.tol_jordan.unwrap_or(DEFAULT_TOL_JORDAN),
            basis: self.structure.user_basis(d)?,
            ..DecomposeOptions::default()
        })
    }

    /// Explicit subcase, else the classification of the mean matrix in the TSD regime.
    pub fn subcase(&self) -> Result<Option<UrnSubcase>, ConfigError> {
        if self.regime() != Regime::Tsd {
            return Ok(self.subcase);
        }
        if let Some(s) = self.subcase {
            return Ok(Some(s));
        }
        let s = self.structure()?;
        let mm = mean_matrix(&s);
        let opts = DecomposeOptions {
            left_eigenvector: mm.left_eigenvector().map(<[f64]>::to_vec),
            ..self.decompose_options()?
        };
        let dec = crate::spectral::decompose_with(mm.matrix(), &opts)
            .map_err(|e| ConfigError::at("structure", e.to_string()))?;
        let dec = match self.tolerances.tol_class {
            Some(t) => dec.with_tol_class(t),
            None => dec,
        };
        Ok(Some(dec.classify(dec.tol_class()).subcase))
    }

    pub fn suite(&self) -> Result<Option<Suite>, ConfigError> {
        self.suite
            .as_deref()
            .map(|s| Suite::parse(s).map_err(|e| ConfigError::at("suite", e.to_string())))
            .transpose()
    }

    pub fn ensemble_spec(&self, seed: Option<u64>) -> Result<EnsembleSpec, ConfigError> {
        let regime = self.regime();
        Ok(EnsembleSpec {
            urn: self.urn_spec()?,
            regime,
            scale: TimeScale::for_regime(regime, self.subcase()?),
            replicates: self.ensemble.replicates,
            grid_times: self.ensemble.grid.clone(),
            base_seed: seed.unwrap_or(self.ensemble.base_seed),
        })
    }

    pub fn experiment(&self) -> Result<FluctuationExperiment, ConfigError> {
        let urn = self.urn_spec()?;
        let regime = self.regime();
        let subcase = self.subcase()?;
        let (tol, z_cap) = match regime {
            Regime::Tsd => (0.15, None),
            _ => (0.10, Some(5.0)),
        };
        Ok(FluctuationExperiment {
            structure: urn.structure().clone(),
            initial_size: urn.initial_size(),
            mu: urn.mu_fractions().to_vec(),
            draws: urn.draws(),
            regime,
            subcase,
            replicates: self.ensemble.replicates,
            grid: self.ensemble.grid.clone(),
            tolerance: self.tolerances.mc_rel_tol.unwrap_or(tol),
            z_cap: self.tolerances.z_cap.or(z_cap),
            quad_tol: self.tolerances.quad_tol.unwrap_or(DEFAULT_QUAD_TOL),
            decompose: self.decompose_options()?,
            tol_class: self.tolerances.tol_class,
        })
    }

    /// Every semantic check; all failures are collected.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut push = |r: Result<(), ConfigError>| {
            if let Err(e) = r {
                issues.extend(e.issues);
            }
        };
        let t = &self.tolerances;
        push(positive("tolerances.quad_tol", t.quad_tol));
        push(positive("tolerances.tol_jordan", t.tol_jordan));
        push(positive("tolerances.tol_class", t.tol_class));
        push(positive("tolerances.mc_rel_tol", t.mc_rel_tol));
        push(positive("tolerances.z_cap", t.z_cap));
        let e = &self.ensemble;
        if e.replicates < 2 {
            push(Err(ConfigError::at("ensemble.replicates", "need at least 2 replicates")));
        }
        if e.grid.is_empty() {
            push(Err(ConfigError::at("ensemble.grid", "grid is empty")));
        }
        for (k, &g) in e.grid.iter().enumerate() {
            if !(g > 0.0 && g <= 1.0) {
                push(Err(ConfigError::at(format!("ensemble.grid[{k}]"), format!("grid time {g} outside (0, 1]"))));
            }
        }
        if e.grid.windows(2).any(|w| w[1] <= w[0]) {
            push(Err(ConfigError::at("ensemble.grid", "grid must be strictly increasing")));
        }
        push(self.suite().map(|_| ()));
        if let Ok(structure) = self.structure() {
            push(self.structure.user_basis(structure.dim()).map(|_| ()));
        }
        match self.urn_spec() {
            Err(e) => push(Err(e)),
            Ok(urn) => {
                push(self.assumptions(&urn));
                push(self.subcase().map(|_| ()));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { issues })
        }
    }

    fn assumptions(&self, urn: &UrnSpec) -> Result<(), ConfigError> {
        let s = urn.structure();
        s.require_balance().map_err(|e| ConfigError::at("structure", e.to_string()))?;
        if self.regime() == Regime::Tsd {
            let (lambda1, _, positive) = perron_frobenius(&s.mean_matrix());
            if !positive {
                return Err(ConfigError::at(
                    "regime",
                    format!("(A3) fails: the Perron-Frobenius eigenvalue {lambda1} is not positive, so the TSD regime is undefined"),
                ));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Parses and fully validates a config.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError {
        issues: vec![ConfigIssue {
            location: Location::Text {
                line: e.line(),
                column: e.column(),
            },
            message: strip_position(&e.to_string()),
        }],
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(k) => msg[..k].to_string(),
        None => msg.to_string(),
    }
}

/// Built-in configs run by the `example` command.
pub const EXAMPLES: [&str; 5] = ["friedman-large", "friedman-small", "friedman-critical", "matching", "identity"];

pub fn example_config(name: &str) -> Option<ExperimentConfig> {
    let half = || vec![Fraction::new(1, 2).expect("valid fraction"); 2];
    let tsd = |preset: &str, subcase, grid: Vec<f64>| ExperimentConfig {
        structure: StructureConfig::preset(preset),
        urn: UrnConfig {
            initial_size: 100,
            mu: half(),
            n: 100_000,
        },
        regime: Some(Regime::Tsd),
        subcase: Some(subcase),
        ensemble: EnsembleConfig {
            replicates: 2000,
            grid,
            ..EnsembleConfig::default()
        },
        suite: None,
        tolerances: Tolerances::default(),
    };
    Some(match name {
        "friedman-large" => tsd("friedman(5,1)", UrnSubcase::LargeUrnSimple, vec![1.0]),
        "friedman-small" => tsd("friedman(2,1)", UrnSubcase::SmallUrn, vec![0.5, 1.0]),
        // the critical normalization converges like an inverse power of log(n/N)
        "friedman-critical" => ExperimentConfig {
            tolerances: Tolerances {
                mc_rel_tol: Some(0.30),
                ..Tolerances::default()
            },
            ..tsd("friedman(3,1)", UrnSubcase::CriticalUrn, vec![1.0])
        },
        "identity" => tsd("identity(2,1)", UrnSubcase::LargeUrnNonsimple, vec![0.5, 1.0]),
        "matching" => ExperimentConfig {
            structure: StructureConfig::preset("matching(4)"),
            urn: UrnConfig {
                initial_size: 2000,
                mu: vec![Fraction::new(1, 4).expect("valid fraction"); 4],
                n: 2000,
            },
            regime: Some(Regime::Tr),
            subcase: None,
            ensemble: EnsembleConfig {
                replicates: 10_000,
                grid: vec![0.25, 0.5, 0.75],
                ..EnsembleConfig::default()
            },
            suite: None,
            tolerances: Tolerances::default(),
        },
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FRIEDMAN: &str = r#"{
  "structure": {"preset": "friedman(2,1)"},
  "urn": {"N": 50000, "mu": ["1/2", "1/2"], "n": 500},
  "ensemble": {"replicates": 100, "grid": [0.5, 1.0], "base_seed": 7}
}"#;

    #[test]
    fn friedman_preset_expands() {
        let cfg = parse_config(FRIEDMAN).unwrap();
        let s = cfg.structure().unwrap();
        assert_eq!(s, ReplacementStructure::friedman(2, 1));
        assert_eq!(s.rule(0).atom(0), &[2, 1]);
        assert_eq!(s.rule(1).atom(0), &[1, 2]);
        assert_eq!(cfg.regime(), Regime::Ibd);
    }

    #[test]
    fn matching_preset_expands() {
        let s = preset_structure("matching(3)").unwrap();
        assert_eq!(s.weights(), &[1.0; 3]);
        for i in 0..3 {
            let mut e = [0; 3];
            e[i] = -1;
            assert_eq!(s.rule(i).atom(0), &e[..]);
            assert!(s.rule(i).is_deterministic());
        }
    }

    #[test]
    fn empty_rules_are_positioned() {
        let text = r#"{"structure": {"weights": [1, 1], "rules": []}, "urn": {"N": 2, "mu": ["1/2", "1/2"], "n": 2}}"#;
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.issues[0].location, Location::Path("structure.rules".into()));
        let text = r#"{"structure": {"weights": [1, 1], "rules": [[{"add": [1, 0], "p": 1}], []]}, "urn": {"N": 2, "mu": ["1/2", "1/2"], "n": 2}}"#;
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.issues[0].location, Location::Path("structure.rules[1]".into()));
    }

    #[test]
    fn unknown_keys_and_types_carry_line_and_column() {
        let text = "{\n  \"structure\": {\"preset\": \"friedman(2,1)\"},\n  \"urn\": {\"N\": 4, \"mu\": [\"1/2\", \"1/2\"], \"n\": 2},\n  \"tolerances\": {\"quad_toll\": 1e-9}\n}";
        let err = parse_config(text).unwrap_err();
        let issue = &err.issues[0];
        assert!(matches!(issue.location, Location::Text { line: 4, .. }), "{issue}");
        assert!(issue.message.contains("quad_toll"));
        let text = r#"{"structure": {"preset": "friedman(2,1)"}, "urn": {"N": "four", "mu": [], "n": 2}}"#;
        assert!(matches!(parse_config(text).unwrap_err().issues[0].location, Location::Text { line: 1, .. }));
    }

    #[test]
    fn mu_denominator_must_divide_n() {
        let text = r#"{"structure": {"preset": "friedman(2,1)"}, "urn": {"N": 5, "mu": ["1/2", "1/2"], "n": 2}}"#;
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.issues[0].location, Location::Path("urn.mu[0]".into()));
    }

    #[test]
    fn matching_tsd_fails_a3() {
        let text = r#"{"structure": {"preset": "matching(4)"}, "urn": {"N": 4, "mu": ["1/4", "1/4", "1/4", "1/4"], "n": 4}, "regime": "tsd"}"#;
        let err = parse_config(text).unwrap_err();
        assert!(err.to_string().contains("(A3)"), "{err}");
    }

    #[test]
    fn explicit_rules_and_jordan_basis() {
        let text = r#"{
  "structure": {
    "weights": [1, 2],
    "rules": [[{"add": [2, 1], "p": 0.5}, {"add": [4, 0], "p": 0.5}], [{"add": [0, 2], "p": 0.3}, {"add": [2, 1], "p": 0.7}]],
    "balance": 4
  },
  "urn": {"N": 10, "mu": ["1/2", "1/2"], "n": 1000},
  "subcase": "small-urn",
  "suite": "tsd-small",
  "tolerances": {"tol_class": 1e-6, "z_cap": 4}
}"#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.regime(), Regime::Tsd);
        assert_eq!(cfg.suite().unwrap(), Some(Suite::TsdSmall));
        let exp = cfg.experiment().unwrap();
        assert_eq!(exp.z_cap, Some(4.0));
        assert_eq!(exp.tol_class, Some(1e-6));
        let bad = text.replace("\"balance\": 4", "\"balance\": 4, \"jordan_basis\": [{\"lambda\": 4, \"m\": 2, \"basis\": [[1, 1]]}]");
        let err = parse_config(&bad).unwrap_err();
        assert_eq!(err.issues[0].location, Location::Path("structure.jordan_basis[0]".into()));
    }

    #[test]
    fn round_trip_and_examples() {
        let cfg = parse_config(FRIEDMAN).unwrap();
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
        for name in EXAMPLES {
            let cfg = example_config(name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg, "{name}");
        }
        assert!(example_config("nope").is_none());
    }
}
