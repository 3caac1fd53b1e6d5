//! Urn trajectories, the continuous-time branching embedding and replicate ensembles.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream, Lane, StreamRng};
use crate::spectral::UrnSubcase;
use crate::urn::{ReplacementStructure, UrnSpec};

pub const DEFAULT_EVENT_CAP: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("grid index {index} exceeds the draw budget {budget}")]
    GridBeyondBudget { index: u64, budget: u64 },
    #[error("grid is not sorted")]
    UnsortedGrid,
    #[error("grid time {0} is not finite and non-negative")]
    BadGridTime(f64),
    #[error("event cap of {cap} events exceeded before the horizon")]
    EventCap { cap: u64 },
    #[error("death index {index} beyond the {recorded} recorded deaths")]
    DeathIndex { index: u64, recorded: u64 },
    #[error("structure is not balanced")]
    NotBalanced,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Ibd,
    Tr,
    Tsd,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Ibd => "ibd",
            Regime::Tr => "tr",
            Regime::Tsd => "tsd",
        })
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ibd" => Ok(Regime::Ibd),
            "tr" => Ok(Regime::Tr),
            "tsd" => Ok(Regime::Tsd),
            _ => Err(format!("unknown regime {s:?} (expected ibd, tr or tsd)")),
        }
    }
}

/// How a grid time `t` maps to a draw index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeScale {
    /// `floor(n t)`
    Linear,
    /// `floor(N (n/N)^t)`
    Geometric,
}

impl TimeScale {
    pub fn for_regime(regime: Regime, subcase: Option<UrnSubcase>) -> Self {
        match (regime, subcase) {
            (Regime::Tsd, Some(UrnSubcase::SmallUrn)) | (Regime::Tsd, None) => TimeScale::Linear,
            (Regime::Tsd, Some(_)) => TimeScale::Geometric,
            _ => TimeScale::Linear,
        }
    }

    pub fn index(self, n: u64, big_n: u64, t: f64) -> u64 {
        match self {
            TimeScale::Linear => (n as f64 * t).floor() as u64,
            TimeScale::Geometric => {
                let ratio = n as f64 / big_n as f64;
                (big_n as f64 * ratio.powf(t)).floor() as u64
            }
        }
    }
}

/// Structure compiled for the inner simulation loop.
#[derive(Debug, Clone)]
pub struct Stepper {
    d: usize,
    weights: Vec<f64>,
    // exact integer weights when every a_i is a (small) integer
    int_weights: Option<Vec<i64>>,
    // per colour: atoms flattened row-major, cumulative probabilities
    atoms: Vec<Vec<i64>>,
    cumulative: Vec<Vec<f64>>,
}

impl Stepper {
    pub fn new(structure: &ReplacementStructure) -> Self {
        let d = structure.dim();
        let mut atoms = Vec::with_capacity(d);
        let mut cumulative = Vec::with_capacity(d);
        for rule in structure.rules() {
            let mut flat = Vec::with_capacity(rule.len() * d);
            let mut cum = Vec::with_capacity(rule.len());
            let mut acc = 0.0;
            for (atom, p) in rule.atoms() {
                flat.extend_from_slice(atom);
                acc += p;
                cum.push(acc);
            }
            *cum.last_mut().expect("rules are non-empty") = 1.0;
            atoms.push(flat);
            cumulative.push(cum);
        }
        let weights = structure.weights().to_vec();
        let int_weights = weights
            .iter()
            .all(|&w| w.fract() == 0.0 && w <= 1e6)
            .then(|| weights.iter().map(|&w| w as i64).collect());
        Self {
            d,
            weights,
            int_weights,
            atoms,
            cumulative,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn total(&self, state: &[i64]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.d {
            total += self.weights[i] * state[i] as f64;
        }
        total
    }

    /// One draw: colour `i` with probability `a_i x_i / (a . x)`, then a replacement
    /// atom from rule `i`. Returns `None` and leaves the state alone when it has no mass.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&self, state: &mut [i64], rng: &mut R) -> Option<usize> {
        let colour = match &self.int_weights {
            Some(w) => self.pick_integer(w, state, rng)?,
            None => self.pick_float(state, rng)?,
        };
        let cum = &self.cumulative[colour];
        let k = if cum.len() == 1 {
            0
        } else {
            let v = rng.random::<f64>();
            cum.iter().position(|&c| v < c).unwrap_or(cum.len() - 1)
        };
        let atom = &self.atoms[colour][k * self.d..(k + 1) * self.d];
        for (x, a) in state.iter_mut().zip(atom) {
            *x += a;
        }
        Some(colour)
    }

    #[inline]
    fn pick_integer<R: Rng + ?Sized>(&self, w: &[i64], state: &[i64], rng: &mut R) -> Option<usize> {
        let mut total = 0i64;
        for (wi, xi) in w.iter().zip(state) {
            total += wi * xi;
        }
        if total <= 0 {
            return None;
        }
        let mut u = rng.random_range(0..total as u64) as i64;
        for (i, (wi, xi)) in w.iter().zip(state).enumerate() {
            let m = wi * xi;
            if u < m {
                return Some(i);
            }
            u -= m;
        }
        unreachable!("u is below the total mass")
    }

    #[inline]
    fn pick_float<R: Rng + ?Sized>(&self, state: &[i64], rng: &mut R) -> Option<usize> {
        let total = self.total(state);
        if total <= 0.0 {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        for i in 0..self.d {
            let m = self.weights[i] * state[i] as f64;
            if u < m {
                return Some(i);
            }
            u -= m;
        }
        // rounding left u past the last bin
        (0..self.d).rev().find(|&i| state[i] > 0)
    }
}

impl Stepper {
    /// Performs up to `steps` draws and returns how many happened before the
    /// composition ran out of mass. Consumes randomness exactly like repeated
    /// [`Stepper::step`] calls.
    pub fn advance<R: Rng + ?Sized>(&self, state: &mut [i64], steps: u64, rng: &mut R) -> u64 {
        let deterministic = self.cumulative.iter().all(|c| c.len() == 1);
        if deterministic && self.int_weights.is_some() {
            match self.d {
                1 => return self.advance_fixed::<1, R>(state, steps, rng),
                2 => return self.advance_fixed::<2, R>(state, steps, rng),
                3 => return self.advance_fixed::<3, R>(state, steps, rng),
                4 => return self.advance_fixed::<4, R>(state, steps, rng),
                _ => {}
            }
        }
        for done in 0..steps {
            if self.step(state, rng).is_none() {
                return done;
            }
        }
        steps
    }

    fn advance_fixed<const D: usize, R: Rng + ?Sized>(
        &self,
        state: &mut [i64],
        steps: u64,
        rng: &mut R,
    ) -> u64 {
        let iw = self.int_weights.as_ref().expect("integer weights");
        let mut w = [0i64; D];
        let mut x = [0i64; D];
        let mut atoms = [[0i64; D]; D];
        for i in 0..D {
            w[i] = iw[i];
            x[i] = state[i];
            atoms[i].copy_from_slice(&self.atoms[i][..D]);
        }
        let mut done = 0;
        while done < steps {
            let mut total = 0i64;
            for i in 0..D {
                total += w[i] * x[i];
            }
            if total <= 0 {
                break;
            }
            let mut u = rng.random_range(0..total as u64) as i64;
            let mut colour = D - 1;
            for i in 0..D - 1 {
                let m = w[i] * x[i];
                if u < m {
                    colour = i;
                    break;
                }
                u -= m;
            }
            for j in 0..D {
                x[j] += atoms[colour][j];
            }
            done += 1;
        }
        state[..D].copy_from_slice(&x);
        done
    }
}

/// Single draw without a precompiled [`Stepper`].
pub fn urn_step<R: Rng + ?Sized>(
    state: &mut [i64],
    structure: &ReplacementStructure,
    rng: &mut R,
) -> Option<usize> {
    Stepper::new(structure).step(state, rng)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    /// Draw indices for urns, times for the branching process.
    pub grid: Vec<f64>,
    pub states: Vec<Vec<i64>>,
    pub death_times: Option<Vec<f64>>,
    /// Compositions right after each recorded death.
    pub skeleton: Option<Vec<Vec<i64>>>,
    /// Number of draws (or deaths) after which the composition had no mass left.
    pub extinct_at: Option<u64>,
}

fn check_sorted<T: PartialOrd>(grid: &[T]) -> Result<(), SimError> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        Err(SimError::UnsortedGrid)
    } else {
        Ok(())
    }
}

/// Urn states at the draw indices in `grid`.
pub fn simulate_urn<R: Rng + ?Sized>(
    spec: &UrnSpec,
    grid: &[u64],
    rng: &mut R,
) -> Result<Trajectory, SimError> {
    let stepper = Stepper::new(spec.structure());
    simulate_urn_with(&stepper, spec.initial_composition(), spec.draws(), grid, rng)
}

pub fn simulate_urn_with<R: Rng + ?Sized>(
    stepper: &Stepper,
    mut state: Vec<i64>,
    budget: u64,
    grid: &[u64],
    rng: &mut R,
) -> Result<Trajectory, SimError> {
    check_sorted(grid)?;
    if let Some(&last) = grid.last() {
        if last > budget {
            return Err(SimError::GridBeyondBudget {
                index: last,
                budget,
            });
        }
    }
    let mut traj = Trajectory {
        grid: grid.iter().map(|&g| g as f64).collect(),
        states: Vec::with_capacity(grid.len()),
        ..Default::default()
    };
    if stepper.total(&state) <= 0.0 {
        traj.extinct_at = Some(0);
    }
    let mut m = 0u64;
    for &g in grid {
        if m < g && traj.extinct_at.is_none() {
            let done = stepper.advance(&mut state, g - m, rng);
            m += done;
            if m < g {
                traj.extinct_at = Some(m);
            }
        }
        traj.states.push(state.clone());
    }
    if traj.extinct_at.is_none() && stepper.total(&state) <= 0.0 {
        traj.extinct_at = Some(m);
    }
    Ok(traj)
}

/// Branching-process states at `time_grid` via the total-rate clock `a . X`.
///
/// The colour of each death and its offspring are drawn by [`Stepper::step`] from
/// `draws`, holding times come from `clock`, so the death-time skeleton equals the
/// urn driven by the same `draws` stream.
pub fn simulate_mcbp<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    structure: &ReplacementStructure,
    x0: &[i64],
    time_grid: &[f64],
    draws: &mut R1,
    clock: &mut R2,
    record_deaths: bool,
    event_cap: u64,
) -> Result<Trajectory, SimError> {
    check_sorted(time_grid)?;
    if let Some(&t) = time_grid.iter().find(|t| !t.is_finite() || **t < 0.0) {
        return Err(SimError::BadGridTime(t));
    }
    let stepper = Stepper::new(structure);
    let mut state = x0.to_vec();
    let mut traj = Trajectory {
        grid: time_grid.to_vec(),
        states: Vec::with_capacity(time_grid.len()),
        death_times: record_deaths.then(Vec::new),
        skeleton: record_deaths.then(Vec::new),
        extinct_at: None,
    };
    let mut t = 0.0;
    let mut events = 0u64;
    let mut gi = 0;
    while gi < time_grid.len() {
        let total = stepper.total(&state);
        if total <= 0.0 {
            traj.extinct_at = Some(events);
            while gi < time_grid.len() {
                traj.states.push(state.clone());
                gi += 1;
            }
            break;
        }
        let u: f64 = clock.random();
        let next = t - (1.0 - u).ln() / total;
        // right-continuous: a death exactly at a grid time is included
        while gi < time_grid.len() && time_grid[gi] < next {
            traj.states.push(state.clone());
            gi += 1;
        }
        if gi == time_grid.len() {
            break;
        }
        if events >= event_cap {
            return Err(SimError::EventCap { cap: event_cap });
        }
        stepper.step(&mut state, draws);
        events += 1;
        t = next;
        if record_deaths {
            traj.death_times.as_mut().unwrap().push(t);
            traj.skeleton.as_mut().unwrap().push(state.clone());
        }
    }
    Ok(traj)
}

/// Runs the branching process until `n_deaths` deaths, recording every death time
/// and the composition after it.
pub fn simulate_mcbp_deaths<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    structure: &ReplacementStructure,
    x0: &[i64],
    n_deaths: u64,
    draws: &mut R1,
    clock: &mut R2,
) -> Trajectory {
    let stepper = Stepper::new(structure);
    let mut state = x0.to_vec();
    let mut times = Vec::with_capacity(n_deaths as usize);
    let mut skeleton = Vec::with_capacity(n_deaths as usize);
    let mut t = 0.0;
    let mut extinct_at = None;
    for k in 0..n_deaths {
        let total = stepper.total(&state);
        if total <= 0.0 {
            extinct_at = Some(k);
            break;
        }
        let u: f64 = clock.random();
        t -= (1.0 - u).ln() / total;
        stepper.step(&mut state, draws);
        times.push(t);
        skeleton.push(state.clone());
    }
    Trajectory {
        grid: Vec::new(),
        states: vec![state],
        death_times: Some(times),
        skeleton: Some(skeleton),
        extinct_at,
    }
}

/// Death times `tau_k` for the requested (sorted) death counts `k`, with
/// `tau_0 = 0`, without storing the full event log.
pub fn death_times_at<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    stepper: &Stepper,
    x0: &[i64],
    indices: &[u64],
    draws: &mut R1,
    clock: &mut R2,
) -> Result<Vec<f64>, SimError> {
    check_sorted(indices)?;
    let mut state = x0.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    let mut t = 0.0;
    let mut k = 0u64;
    for &target in indices {
        while k < target {
            let total = stepper.total(&state);
            if total <= 0.0 {
                return Err(SimError::DeathIndex {
                    index: target,
                    recorded: k,
                });
            }
            let u: f64 = clock.random();
            t -= (1.0 - u).ln() / total;
            stepper.step(&mut state, draws);
            k += 1;
        }
        out.push(t);
    }
    Ok(out)
}

/// `tau_{floor(nt)} - S^{-1} log(1 + S floor(nt) / (beta_1 N))`.
pub fn death_time_drift(traj: &Trajectory, spec: &UrnSpec, t: f64) -> Result<f64, SimError> {
    let s = spec
        .structure()
        .balance()
        .ok_or(SimError::NotBalanced)?;
    let deaths = traj.death_times.as_deref().unwrap_or(&[]);
    let k = (spec.draws() as f64 * t).floor() as u64;
    let tau = if k == 0 {
        0.0
    } else {
        *deaths.get(k as usize - 1).ok_or(SimError::DeathIndex {
            index: k,
            recorded: deaths.len() as u64,
        })?
    };
    let n = spec.initial_size() as f64;
    Ok(tau - (s * k as f64 / (spec.beta1() * n)).ln_1p() / s)
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    pub urn: UrnSpec,
    pub regime: Regime,
    pub scale: TimeScale,
    pub replicates: u64,
    pub grid_times: Vec<f64>,
    pub base_seed: u64,
}

impl EnsembleSpec {
    pub fn grid_indices(&self) -> Vec<u64> {
        self.grid_times
            .iter()
            .map(|&t| {
                self.scale
                    .index(self.urn.draws(), self.urn.initial_size(), t)
            })
            .collect()
    }
}

/// Per-grid-point first and second moments, reduced in replicate order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Moments {
    pub count: u64,
    pub mean: Vec<Vec<f64>>,
    pub cov: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub grid: Vec<u64>,
    pub trajectories: Vec<Trajectory>,
}

impl EnsembleResult {
    pub fn extinct_count(&self) -> usize {
        self.trajectories
            .iter()
            .filter(|t| t.extinct_at.is_some())
            .count()
    }

    pub fn moments(&self) -> Moments {
        let g = self.grid.len();
        let d = self
            .trajectories
            .first()
            .and_then(|t| t.states.first())
            .map_or(0, Vec::len);
        let r = self.trajectories.len();
        let mut mean = vec![vec![0.0; d]; g];
        let mut cov = vec![vec![vec![0.0; d]; d]; g];
        for (k, (mk, ck)) in mean.iter_mut().zip(cov.iter_mut()).enumerate() {
            for tr in &self.trajectories {
                for (m, &x) in mk.iter_mut().zip(&tr.states[k]) {
                    *m += x as f64;
                }
            }
            for m in mk.iter_mut() {
                *m /= r as f64;
            }
            for tr in &self.trajectories {
                let x = &tr.states[k];
                for i in 0..d {
                    for j in 0..d {
                        ck[i][j] += (x[i] as f64 - mk[i]) * (x[j] as f64 - mk[j]);
                    }
                }
            }
            let denom = (r.max(2) - 1) as f64;
            for row in ck.iter_mut() {
                for v in row.iter_mut() {
                    *v /= denom;
                }
            }
        }
        Moments {
            count: r as u64,
            mean,
            cov,
        }
    }
}

/// Maps `f` over replicate indices `0..r` on `threads` workers, preserving order.
pub fn par_replicates<T, F>(r: u64, threads: usize, f: F) -> Result<Vec<T>, SimError>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    if threads <= 1 {
        return Ok((0..r).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    Ok(pool.install(|| (0..r).into_par_iter().map(&f).collect()))
}

/// Draw stream of replicate `r`.
pub fn draw_stream(base_seed: u64, r: u64) -> StreamRng {
    stream(base_seed, Lane::Draw, r)
}

/// Clock stream of replicate `r`.
pub fn clock_stream(base_seed: u64, r: u64) -> StreamRng {
    stream(base_seed, Lane::Clock, r)
}

pub fn run_ensemble(spec: &EnsembleSpec, threads: usize) -> Result<EnsembleResult, SimError> {
    let grid = spec.grid_indices();
    check_sorted(&grid)?;
    if let Some(&last) = grid.last() {
        if last > spec.urn.draws() {
            return Err(SimError::GridBeyondBudget {
                index: last,
                budget: spec.urn.draws(),
            });
        }
    }
    let stepper = Stepper::new(spec.urn.structure());
    let x0 = spec.urn.initial_composition();
    let budget = spec.urn.draws();
    let trajectories = par_replicates(spec.replicates, threads, |r| {
        let mut rng = draw_stream(spec.base_seed, r);
        simulate_urn_with(&stepper, x0.clone(), budget, &grid, &mut rng)
    })?
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(EnsembleResult { grid, trajectories })
}

/// Death times of the embedded branching process at the grid indices of
/// every replicate; the draw stream is shared with [`run_ensemble`], so the
/// compositions agree with the urn run.
pub fn ensemble_death_times(spec: &EnsembleSpec, threads: usize) -> Result<Vec<Vec<f64>>, SimError> {
    let grid = spec.grid_indices();
    let stepper = Stepper::new(spec.urn.structure());
    let x0 = spec.urn.initial_composition();
    par_replicates(spec.replicates, threads, |r| {
        let mut draws = draw_stream(spec.base_seed, r);
        let mut clock = clock_stream(spec.base_seed, r);
        death_times_at(&stepper, &x0, &grid, &mut draws, &mut clock)
    })?
    .into_iter()
    .collect()
}
