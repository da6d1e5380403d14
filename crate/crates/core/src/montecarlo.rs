//! Switching-signal sampling and Monte Carlo moment estimation.
//!
//! Every path draws from its own ChaCha8 stream: the generator is seeded
//! from the run seed and the stream number is the path index, so results do
//! not depend on how paths are scheduled across threads. Ensemble sums are
//! reduced in path order after the parallel phase.
//!
//! States are propagated exactly with one matrix exponential per
//! constant-mode interval. A state is kept as `x · e^s`; `x` is renormalized
//! whenever its norm leaves `[1e-20, 1e20]`, so unstable runs report a
//! finite log-moment even after `‖x‖^m` overflows.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lift::MultiIndexBasis;
use crate::model::{InfinitesimalGenerator, ModeSet, SwitchedSystemModel, SystemClass};
use crate::numeric::expm;

/// Horizon used by the command line when none is given.
pub const DEFAULT_HORIZON: f64 = 10.0;
/// Grid step used by the command line when none is given.
pub const DEFAULT_GRID_STEP: f64 = 0.01;

const RESCALE_HIGH: f64 = 1e20;
const RESCALE_LOW: f64 = 1e-20;
const CACHE_LIMIT: usize = 4096;

/// The RNG of path `index` under run seed `seed`.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One realization of the switching signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    /// `(time, mode index)` at each mode change, starting at time 0.
    pub events: Vec<(f64, usize)>,
    /// `(τ_k, θ_k)` regeneration instants and embedded states, starting at 0.
    pub regenerations: Vec<(f64, usize)>,
    pub horizon: f64,
    pub seed: u64,
}

impl SamplePath {
    /// Mode active at `t` (right-continuous).
    pub fn mode_at(&self, t: f64) -> usize {
        let k = self.events.partition_point(|(s, _)| *s <= t);
        self.events[k.max(1) - 1].1
    }

    fn push_event(&mut self, t: f64, mode: usize) {
        if self.events.last().map(|e| e.1) != Some(mode) {
            self.events.push((t, mode));
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Stop {
    Horizon(f64),
    /// Run until the k-th regeneration after time 0.
    Regenerations(usize),
}

impl Stop {
    fn done(self, t: f64, regenerations: usize) -> bool {
        match self {
            Stop::Horizon(h) => t >= h,
            Stop::Regenerations(k) => regenerations > k,
        }
    }
}

fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if *w > 0.0 && u < acc {
            return k;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).expect("positive weight")
}

/// Holding time and next state of a continuous-time Markov chain, or `None`
/// in an absorbing state.
fn ctmc_step<R: Rng + ?Sized>(q: &DMatrix<f64>, state: usize, rng: &mut R) -> Option<(f64, usize)> {
    let rate = -q[(state, state)];
    if rate <= 0.0 {
        return None;
    }
    let hold = Exp::new(rate).expect("positive rate").sample(rng);
    let weights: Vec<f64> = (0..q.ncols()).map(|j| if j == state { 0.0 } else { q[(state, j)] }).collect();
    Some((hold, categorical(&weights, rng)))
}

fn sample_path<R: Rng + ?Sized>(
    model: &SwitchedSystemModel,
    theta0: usize,
    stop: Stop,
    rng: &mut R,
) -> Result<SamplePath> {
    let states = model.class().embedded_states();
    if theta0 >= states {
        return Err(Error::invalid("theta0", format!("initial state {theta0} out of range for {states} states")));
    }
    let mut path = SamplePath { events: Vec::new(), regenerations: vec![(0.0, theta0)], horizon: 0.0, seed: 0 };
    let mut t = 0.0;
    match model.class() {
        SystemClass::Mjls { generator } => {
            let q = generator.matrix();
            let mut s = theta0;
            path.push_event(0.0, s);
            while !stop.done(t, path.regenerations.len()) {
                let Some((hold, next)) = ctmc_step(q, s, rng) else {
                    if let Stop::Regenerations(_) = stop {
                        return Err(Error::Unsupported("absorbing state reached before the requested jump".into()));
                    }
                    break;
                };
                t += hold;
                s = next;
                if let Stop::Horizon(h) = stop {
                    if t >= h {
                        break;
                    }
                }
                path.regenerations.push((t, s));
                path.push_event(t, s);
            }
        }
        SystemClass::SemiMarkov { kernel, mode_of_state } => {
            let p = kernel.transition_matrix();
            let mut s = theta0;
            path.push_event(0.0, mode_of_state[s]);
            while !stop.done(t, path.regenerations.len()) {
                let row: Vec<f64> = p.row(s).iter().copied().collect();
                let next = categorical(&row, rng);
                let law = kernel.holding(s, next).expect("validated kernel");
                t += law.sample(rng);
                s = next;
                if let Stop::Horizon(h) = stop {
                    if t >= h {
                        break;
                    }
                }
                path.regenerations.push((t, s));
                path.push_event(t, mode_of_state[s]);
            }
        }
        SystemClass::Regenerative { cycles } => {
            let probs: Vec<f64> = cycles.iter().map(|c| c.prob).collect();
            'cycles: while !stop.done(t, path.regenerations.len()) {
                let scenario = &cycles[categorical(&probs, rng)];
                for seg in scenario.schedule.iter().filter(|s| s.duration > 0.0) {
                    if let Stop::Horizon(h) = stop {
                        if t >= h {
                            break 'cycles;
                        }
                    }
                    path.push_event(t, seg.mode);
                    t += seg.duration;
                }
                if let Stop::Horizon(h) = stop {
                    if t >= h {
                        break;
                    }
                }
                path.regenerations.push((t, 0));
            }
        }
        SystemClass::PeriodicObservation(periodic) => {
            let q = periodic.generator().matrix();
            let h = periodic.h();
            let end = match stop {
                Stop::Horizon(end) => end,
                Stop::Regenerations(k) => k as f64 * h,
            };
            let mut r = theta0;
            let mut observed = theta0;
            let mut next_jump = ctmc_step(q, r, rng);
            let mut k = 1usize;
            path.push_event(0.0, periodic.pair_index(r, observed));
            loop {
                let sample_time = k as f64 * h;
                match next_jump {
                    Some((tj, target)) if t + tj <= sample_time && t + tj < end => {
                        t += tj;
                        r = target;
                        path.push_event(t, periodic.pair_index(r, observed));
                        next_jump = ctmc_step(q, r, rng);
                    }
                    _ => {
                        if sample_time > end {
                            break;
                        }
                        // the pending holding time is memoryless, so shift it
                        if let Some((tj, _)) = next_jump.as_mut() {
                            *tj -= sample_time - t;
                        }
                        t = sample_time;
                        observed = r;
                        path.regenerations.push((t, r));
                        if t < end {
                            path.push_event(t, periodic.pair_index(r, observed));
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    path.horizon = match stop {
        Stop::Horizon(h) => h,
        Stop::Regenerations(k) => path.regenerations[k].0,
    };
    path.regenerations.truncate(match stop {
        Stop::Horizon(_) => path.regenerations.len(),
        Stop::Regenerations(k) => k + 1,
    });
    Ok(path)
}

/// Switching path on `[0, horizon)` from a uniformly drawn embedded state.
pub fn sample_switching(model: &SwitchedSystemModel, horizon: f64, seed: u64) -> Result<SamplePath> {
    let mut rng = path_rng(seed, 0);
    let theta0 = rng.random_range(0..model.class().embedded_states());
    sample_switching_from(model, theta0, horizon, seed, &mut rng)
}

/// Switching path from a given embedded state, drawing from `rng`.
pub fn sample_switching_from<R: Rng + ?Sized>(
    model: &SwitchedSystemModel,
    theta0: usize,
    horizon: f64,
    seed: u64,
    rng: &mut R,
) -> Result<SamplePath> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::invalid("horizon", format!("horizon {horizon} must be positive")));
    }
    let mut path = sample_path(model, theta0, Stop::Horizon(horizon), rng)?;
    path.seed = seed;
    Ok(path)
}

/// A state `x · e^{log_scale}` kept away from overflow.
#[derive(Debug, Clone)]
struct Scaled {
    x: DMatrix<f64>,
    log_scale: f64,
}

impl Scaled {
    fn new(x: DMatrix<f64>) -> Self {
        let mut s = Scaled { x, log_scale: 0.0 };
        s.rescale();
        s
    }

    fn rescale(&mut self) {
        let norm = self.x.norm();
        if norm > 0.0 && norm.is_finite() && !(RESCALE_LOW..=RESCALE_HIGH).contains(&norm) {
            self.x /= norm;
            self.log_scale += norm.ln();
        }
    }

    fn value(&self) -> DMatrix<f64> {
        if self.log_scale == 0.0 {
            self.x.clone()
        } else {
            &self.x * self.log_scale.exp()
        }
    }

    fn log_norm(&self) -> f64 {
        self.x.norm().ln() + self.log_scale
    }
}

/// Walks a path and applies `exp(A_λ Δ)` over each constant-mode interval.
struct Propagator<'a> {
    modes: &'a ModeSet,
    cache: HashMap<(usize, u64), DMatrix<f64>>,
}

impl<'a> Propagator<'a> {
    fn new(modes: &'a ModeSet) -> Self {
        Propagator { modes, cache: HashMap::new() }
    }

    fn step(&mut self, state: &mut Scaled, mode: usize, dt: f64) -> Result<()> {
        if dt <= 0.0 {
            return Ok(());
        }
        if self.cache.len() > CACHE_LIMIT {
            self.cache.clear();
        }
        let a = self.modes.matrix(mode);
        let phi = match self.cache.entry((mode, dt.to_bits())) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(expm(&(a * dt))?),
        };
        state.x = &*phi * &state.x;
        state.rescale();
        Ok(())
    }

    /// Calls `visit(k, state)` at each ascending instant `times[k]`.
    fn walk(
        &mut self,
        path: &SamplePath,
        start: DMatrix<f64>,
        times: &[f64],
        mut visit: impl FnMut(usize, &Scaled),
    ) -> Result<()> {
        if let Some(&(_, bad)) = path.events.iter().find(|(_, mode)| *mode >= self.modes.len()) {
            return Err(Error::invalid("path", format!("mode index {bad} missing from the mode set")));
        }
        if start.nrows() != self.modes.n() {
            return Err(Error::Dimension(format!(
                "initial state has {} rows, modes are {}x{}",
                start.nrows(),
                self.modes.n(),
                self.modes.n()
            )));
        }
        let mut state = Scaled::new(start);
        let mut t = 0.0;
        let mut next = 1;
        let mut mode = path.events[0].1;
        for (k, &target) in times.iter().enumerate() {
            if target < t || target.is_nan() {
                return Err(Error::invalid("grid", format!("instant {target} is not ascending from 0")));
            }
            while next < path.events.len() && path.events[next].0 <= target {
                let (te, m) = path.events[next];
                self.step(&mut state, mode, te - t)?;
                t = te;
                mode = m;
                next += 1;
            }
            self.step(&mut state, mode, target - t)?;
            t = target;
            visit(k, &state);
        }
        Ok(())
    }
}

fn check_grid(grid: &[f64], horizon: f64) -> Result<()> {
    let tolerance = 1e-12 * horizon.max(1.0);
    if grid.iter().any(|t| !t.is_finite() || *t < 0.0 || *t > horizon + tolerance) {
        return Err(Error::invalid("grid", format!("instants must lie in [0, {horizon}]")));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("grid", "instants must be ascending"));
    }
    Ok(())
}

/// `x(t)` at each grid instant, by exact piecewise propagation.
pub fn propagate_state(
    path: &SamplePath,
    modes: &ModeSet,
    x0: &DVector<f64>,
    grid: &[f64],
) -> Result<Vec<DVector<f64>>> {
    check_grid(grid, path.horizon)?;
    let mut out = Vec::with_capacity(grid.len());
    let start = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice());
    Propagator::new(modes).walk(path, start, grid, |_, s| out.push(s.value().column(0).into_owned()))?;
    Ok(out)
}

/// `Φ(t; 0)` at each grid instant.
pub fn transition_matrices(path: &SamplePath, modes: &ModeSet, grid: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    check_grid(grid, path.horizon)?;
    let mut out = Vec::with_capacity(grid.len());
    let n = modes.n();
    Propagator::new(modes).walk(path, DMatrix::identity(n, n), grid, |_, s| out.push(s.value()))?;
    Ok(out)
}

/// `0, step, 2·step, …` up to and including `horizon` (to rounding).
pub fn uniform_grid(horizon: f64, step: f64) -> Result<Vec<f64>> {
    if !(horizon.is_finite() && horizon > 0.0 && step.is_finite() && step > 0.0) {
        return Err(Error::invalid("grid", "horizon and step must be positive"));
    }
    let count = (horizon / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|k| (k as f64 * step).min(horizon)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// Fixed `x₀`; `theta0 = None` draws the embedded state uniformly.
    Fixed { x0: DVector<f64>, theta0: Option<usize> },
    /// `x₀` uniform on the unit sphere and a uniform embedded state.
    UnitSphere,
}

impl InitialCondition {
    fn draw<R: Rng + ?Sized>(&self, n: usize, states: usize, rng: &mut R) -> (usize, DVector<f64>) {
        match self {
            InitialCondition::Fixed { x0, theta0 } => {
                let theta = theta0.unwrap_or_else(|| rng.random_range(0..states));
                (theta, x0.clone())
            }
            InitialCondition::UnitSphere => {
                let theta = rng.random_range(0..states);
                loop {
                    let v = DVector::<f64>::from_fn(n, |_, _| StandardNormal.sample(rng));
                    let norm = v.norm();
                    if norm > 0.0 {
                        return (theta, v / norm);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MomentConfig {
    pub m: usize,
    pub initial: InitialCondition,
    pub paths: usize,
    pub horizon: f64,
    pub grid: Vec<f64>,
    pub seed: u64,
    pub keep_paths: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub m: usize,
    pub time_grid: Vec<f64>,
    /// Sample mean of `‖x(t)‖^m`; `inf` once it overflows.
    pub moment_mean: Vec<f64>,
    /// Logarithm of the sample mean, finite through overflow.
    pub log_moment_mean: Vec<f64>,
    pub path_count: usize,
    /// `‖x(t)‖^m` per path, path-major, when retained.
    pub per_path_norms: Option<Vec<Vec<f64>>>,
    /// Least-squares slope of `log_moment_mean` over the second half of the grid.
    pub empirical_growth_rate: Option<f64>,
    /// First grid instant at which `moment_mean` overflows.
    pub saturation_time: Option<f64>,
}

struct PathNorms {
    values: Vec<f64>,
    logs: Vec<f64>,
}

fn ensemble_member(
    model: &SwitchedSystemModel,
    config: &MomentConfig,
    index: usize,
) -> Result<(DVector<f64>, SamplePath)> {
    let mut rng = path_rng(config.seed, index as u64);
    let (theta0, x0) = config.initial.draw(model.modes().n(), model.class().embedded_states(), &mut rng);
    let path = sample_switching_from(model, theta0, config.horizon, config.seed, &mut rng)?;
    Ok((x0, path))
}

/// The switching path behind member `index` of [`estimate_moments`].
pub fn ensemble_path(model: &SwitchedSystemModel, config: &MomentConfig, index: usize) -> Result<SamplePath> {
    Ok(ensemble_member(model, config, index)?.1)
}

fn path_norms(model: &SwitchedSystemModel, config: &MomentConfig, index: usize) -> Result<PathNorms> {
    let (x0, path) = ensemble_member(model, config, index)?;
    let modes = model.modes();
    let m = config.m as i32;
    let mut values = Vec::with_capacity(config.grid.len());
    let mut logs = Vec::with_capacity(config.grid.len());
    let start = DMatrix::from_column_slice(x0.len(), 1, x0.as_slice());
    Propagator::new(modes).walk(&path, start, &config.grid, |_, s| {
        let log = config.m as f64 * s.log_norm();
        logs.push(log);
        values.push(if s.log_scale == 0.0 { s.x.norm().powi(m) } else { log.exp() });
    })?;
    Ok(PathNorms { values, logs })
}

fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let shifted: Vec<f64> = v.iter().map(|l| (l - max).exp()).collect();
    max + pairwise_sum(&shifted).ln()
}

/// Least-squares slope of `y` against `t`, skipping non-finite `y`.
pub fn fit_slope(t: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t.iter().zip(y).filter(|(_, y)| y.is_finite()).map(|(a, b)| (*a, *b)).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    Some(sxy / sxx)
}

/// Ensemble estimate of `E‖x(t)‖^m` over independent paths.
pub fn estimate_moments(model: &SwitchedSystemModel, config: &MomentConfig) -> Result<TrajectoryEnsemble> {
    if config.paths == 0 {
        return Err(Error::invalid("paths", "at least one path is required"));
    }
    if config.m == 0 {
        return Err(Error::invalid("m", "moment order must be at least 1"));
    }
    if !(config.horizon.is_finite() && config.horizon > 0.0) {
        return Err(Error::invalid("horizon", "horizon must be positive"));
    }
    check_grid(&config.grid, config.horizon)?;
    let per_path: Vec<PathNorms> =
        (0..config.paths).into_par_iter().map(|p| path_norms(model, config, p)).collect::<Result<_>>()?;

    let count = config.paths as f64;
    let mut moment_mean = Vec::with_capacity(config.grid.len());
    let mut log_moment_mean = Vec::with_capacity(config.grid.len());
    let mut column = Vec::with_capacity(config.paths);
    let mut log_column = Vec::with_capacity(config.paths);
    for k in 0..config.grid.len() {
        column.clear();
        log_column.clear();
        column.extend(per_path.iter().map(|p| p.values[k]));
        log_column.extend(per_path.iter().map(|p| p.logs[k]));
        let log_mean = log_sum_exp(&log_column) - count.ln();
        let mean = if column.iter().all(|v| v.to_bits() == column[0].to_bits()) {
            column[0]
        } else {
            pairwise_sum(&column) / count
        };
        moment_mean.push(if mean.is_finite() { mean } else { f64::INFINITY });
        log_moment_mean.push(log_mean);
    }

    let tail = config.grid.len() / 2;
    let empirical_growth_rate = fit_slope(&config.grid[tail..], &log_moment_mean[tail..]);
    let saturation_time = moment_mean.iter().position(|v| v.is_infinite()).map(|k| config.grid[k]);
    Ok(TrajectoryEnsemble {
        m: config.m,
        time_grid: config.grid.clone(),
        moment_mean,
        log_moment_mean,
        path_count: config.paths,
        per_path_norms: config.keep_paths.then(|| per_path.into_iter().map(|p| p.values).collect()),
        empirical_growth_rate,
        saturation_time,
    })
}

/// Mean and standard error of a Monte Carlo estimate, entrywise.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate<T> {
    pub mean: T,
    pub standard_error: T,
}

fn regeneration_instants(path: &SamplePath, steps: usize, sampling: Option<f64>) -> Vec<(f64, usize)> {
    match sampling {
        Some(h) => (0..=steps)
            .map(|k| {
                let t = k as f64 * h;
                (t, path.mode_at(t))
            })
            .collect(),
        None => path.regenerations[..=steps].to_vec(),
    }
}

fn sample_for_steps<R: Rng + ?Sized>(
    model: &SwitchedSystemModel,
    theta0: usize,
    steps: usize,
    sampling: Option<f64>,
    rng: &mut R,
) -> Result<SamplePath> {
    match sampling {
        Some(h) => {
            if !matches!(model.class(), SystemClass::Mjls { .. }) {
                return Err(Error::Unsupported("a sampling period applies to Markov jump systems only".into()));
            }
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::invalid("sampling", "sampling period must be positive"));
            }
            // one extra step keeps the final instant strictly inside
            sample_path(model, theta0, Stop::Horizon((steps + 1) as f64 * h), rng)
        }
        None => sample_path(model, theta0, Stop::Regenerations(steps), rng),
    }
}

fn pairwise_vector_sum(v: &[DVector<f64>]) -> DVector<f64> {
    match v.len() {
        1 => v[0].clone(),
        n => pairwise_vector_sum(&v[..n / 2]) + pairwise_vector_sum(&v[n / 2..]),
    }
}

fn mean_and_error(samples: &[DVector<f64>]) -> Estimate<DVector<f64>> {
    let dim = samples[0].len();
    if samples.iter().all(|s| s == &samples[0]) {
        return Estimate { mean: samples[0].clone(), standard_error: DVector::zeros(dim) };
    }
    let count = samples.len() as f64;
    let mean = pairwise_vector_sum(samples) / count;
    let squares: Vec<DVector<f64>> = samples.iter().map(|s| (s - &mean).map(|d| d * d)).collect();
    let denom = (count - 1.0).max(1.0);
    let standard_error = pairwise_vector_sum(&squares).map(|v| (v / denom / count).sqrt());
    Estimate { mean, standard_error }
}

/// Monte Carlo estimate of `E[e_{θ_k} ⊗ x(τ_k)^[m]]` for `k = 0..=steps`,
/// where `τ_k` are the regeneration instants of the model, or the instants
/// `k·h` when `sampling = Some(h)` for a Markov jump system.
#[allow(clippy::too_many_arguments)]
pub fn empirical_lift_propagation(
    model: &SwitchedSystemModel,
    m: usize,
    theta0: usize,
    x0: &DVector<f64>,
    steps: usize,
    sampling: Option<f64>,
    paths: usize,
    seed: u64,
) -> Result<Vec<Estimate<DVector<f64>>>> {
    if paths == 0 {
        return Err(Error::invalid("paths", "at least one path is required"));
    }
    let basis = MultiIndexBasis::new(model.modes().n(), m)?;
    let states = model.class().embedded_states();
    let nm = basis.len();
    let per_path: Vec<Vec<DVector<f64>>> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let path = sample_for_steps(model, theta0, steps, sampling, &mut rng)?;
            let instants = regeneration_instants(&path, steps, sampling);
            let times: Vec<f64> = instants.iter().map(|r| r.0).collect();
            let xs = propagate_state(&path, model.modes(), x0, &times)?;
            instants
                .iter()
                .zip(xs)
                .map(|(&(_, theta), x)| {
                    let mut v = DVector::zeros(states * nm);
                    v.rows_mut(theta * nm, nm).copy_from(&basis.lift(&x)?);
                    Ok(v)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..=steps)
        .map(|k| {
            let column: Vec<DVector<f64>> = per_path.iter().map(|p| p[k].clone()).collect();
            mean_and_error(&column)
        })
        .collect())
}

/// Monte Carlo estimate of the block matrix whose block `(i, j)` is
/// `P(θ_k = i | θ₀ = j) · E[Φ(τ_k; 0)^[m] | θ₀ = j, θ_k = i]`, using
/// `paths` paths from every initial state.
pub fn empirical_cycle_matrix(
    model: &SwitchedSystemModel,
    m: usize,
    steps: usize,
    sampling: Option<f64>,
    paths: usize,
    seed: u64,
) -> Result<Estimate<DMatrix<f64>>> {
    if paths == 0 {
        return Err(Error::invalid("paths", "at least one path is required"));
    }
    let basis = MultiIndexBasis::new(model.modes().n(), m)?;
    let states = model.class().embedded_states();
    let nm = basis.len();
    let mut mean = DMatrix::zeros(states * nm, states * nm);
    let mut standard_error = DMatrix::zeros(states * nm, states * nm);
    for j in 0..states {
        let samples: Vec<DVector<f64>> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = path_rng(seed, (j * paths + p) as u64);
                let path = sample_for_steps(model, j, steps, sampling, &mut rng)?;
                let (t, theta) = regeneration_instants(&path, steps, sampling)[steps];
                let phi = transition_matrices(&path, model.modes(), &[t])?.remove(0);
                let lifted = basis.induced(&phi)?;
                let mut v = DMatrix::zeros(states * nm, nm);
                v.view_mut((theta * nm, 0), (nm, nm)).copy_from(&lifted);
                Ok(DVector::from_column_slice(v.as_slice()))
            })
            .collect::<Result<_>>()?;
        let est = mean_and_error(&samples);
        let rows = states * nm;
        mean.columns_mut(j * nm, nm).copy_from(&DMatrix::from_column_slice(rows, nm, est.mean.as_slice()));
        standard_error.columns_mut(j * nm, nm).copy_from(&DMatrix::from_column_slice(
            rows,
            nm,
            est.standard_error.as_slice(),
        ));
    }
    Ok(Estimate { mean, standard_error })
}

/// Empirical one-step transition frequencies of a chain observed every `h`.
pub fn sampled_transition_counts(generator: &InfinitesimalGenerator, h: f64, steps: usize, seed: u64) -> DMatrix<f64> {
    let q = generator.matrix();
    let n = generator.states();
    let mut rng = path_rng(seed, 0);
    let mut counts = DMatrix::zeros(n, n);
    let mut state = 0;
    let mut pending = ctmc_step(q, state, &mut rng);
    for _ in 0..steps {
        let from = state;
        let mut left = h;
        while let Some((hold, next)) = pending {
            if hold > left {
                pending = Some((hold - left, next));
                break;
            }
            left -= hold;
            state = next;
            pending = ctmc_step(q, state, &mut rng);
        }
        counts[(from, state)] += 1.0;
    }
    counts
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `t,moment_mean`.
pub fn write_moments_csv<W: Write>(ensemble: &TrajectoryEnsemble, mut out: W) -> std::io::Result<()> {
    out.write_all(b"t,moment_mean\n")?;
    for (t, v) in ensemble.time_grid.iter().zip(&ensemble.moment_mean) {
        writeln!(out, "{t},{v}")?;
    }
    Ok(())
}

/// `t,path_id,norm_m`, path-major.
pub fn write_per_path_csv<W: Write>(ensemble: &TrajectoryEnsemble, mut out: W) -> std::io::Result<()> {
    out.write_all(b"t,path_id,norm_m\n")?;
    if let Some(paths) = &ensemble.per_path_norms {
        for (id, norms) in paths.iter().enumerate() {
            for (t, v) in ensemble.time_grid.iter().zip(norms) {
                writeln!(out, "{t},{id},{v}")?;
            }
        }
    }
    Ok(())
}

/// `time,mode` with one row per mode change.
pub fn write_switching_csv<W: Write>(path: &SamplePath, modes: &ModeSet, mut out: W) -> std::io::Result<()> {
    out.write_all(b"time,mode\n")?;
    for (t, mode) in &path.events {
        writeln!(out, "{t},{}", csv_field(modes.label(*mode)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HoldingDistribution, PeriodicObservation, Scenario, Segment, SemiMarkovKernel};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};

    fn single_mode(a: DMatrix<f64>) -> SwitchedSystemModel {
        let modes = ModeSet::new(vec!["a".into()], vec![a]).unwrap();
        SwitchedSystemModel::mjls(modes, InfinitesimalGenerator::new(dmatrix![0.0]).unwrap(), 2).unwrap()
    }

    fn two_state_mjls() -> SwitchedSystemModel {
        let modes = ModeSet::new(
            vec!["a".into(), "b".into()],
            vec![dmatrix![-1.0, 0.5; 0.0, -0.5], dmatrix![0.2, 0.0; 1.0, -0.3]],
        )
        .unwrap();
        let q = InfinitesimalGenerator::new(dmatrix![-2.0, 2.0; 1.0, -1.0]).unwrap();
        SwitchedSystemModel::mjls(modes, q, 2).unwrap()
    }

    #[test]
    fn single_state_path_is_constant() {
        let path = sample_switching(&single_mode(dmatrix![-1.0]), 5.0, 3).unwrap();
        assert_eq!(path.events, vec![(0.0, 0)]);
        assert_eq!(path.horizon, 5.0);
        assert_eq!(path.seed, 3);
    }

    #[test]
    fn event_times_strictly_increase() {
        let path = sample_switching(&two_state_mjls(), 50.0, 11).unwrap();
        assert!(path.events.len() > 10);
        assert!(path.events.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 != w[1].1));
        assert_eq!(path.events[0].0, 0.0);
        assert!(path.events.last().unwrap().0 < 50.0);
    }

    #[test]
    fn deterministic_holding_regenerates_on_a_lattice() {
        let modes = ModeSet::new(vec!["a".into()], vec![dmatrix![-1.0]]).unwrap();
        let kernel =
            SemiMarkovKernel::new(dmatrix![1.0], vec![((0, 0), HoldingDistribution::Deterministic { value: 0.25 })])
                .unwrap();
        let model = SwitchedSystemModel::semi_markov(modes, kernel, vec![0], 2).unwrap();
        let path = sample_switching(&model, 1.1, 0).unwrap();
        let times: Vec<f64> = path.regenerations.iter().map(|r| r.0).collect();
        assert_eq!(times, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn periodic_observation_changes_only_at_samples() {
        let q = InfinitesimalGenerator::new(dmatrix![-3.0, 3.0; 3.0, -3.0]).unwrap();
        let p = PeriodicObservation::new(
            vec![dmatrix![-1.0], dmatrix![0.5]],
            vec![dmatrix![1.0], dmatrix![1.0]],
            vec![dmatrix![-0.5], dmatrix![-1.0]],
            q,
            0.3,
        )
        .unwrap();
        let model = SwitchedSystemModel::periodic(p.clone(), 2).unwrap();
        let path = sample_switching(&model, 30.0, 5).unwrap();
        let big_n = p.states();
        for w in path.events.windows(2) {
            let (q_before, q_after) = (w[0].1 % big_n, w[1].1 % big_n);
            if q_before != q_after {
                let k = (w[1].0 / 0.3).round();
                assert!((w[1].0 - k * 0.3).abs() < 1e-12, "observation changed at {}", w[1].0);
            }
        }
        for (k, (t, r)) in path.regenerations.iter().enumerate() {
            assert_eq!(*t, k as f64 * 0.3);
            assert_eq!(path.mode_at(*t) % big_n, *r);
        }
    }

    #[test]
    fn regenerative_paths_follow_scenarios() {
        let modes = ModeSet::new(vec!["a".into(), "b".into()], vec![dmatrix![-1.0], dmatrix![1.0]]).unwrap();
        let cycles = vec![Scenario {
            prob: 1.0,
            schedule: vec![Segment { mode: 0, duration: 1.0 }, Segment { mode: 1, duration: 0.5 }],
        }];
        let model = SwitchedSystemModel::regenerative(modes, cycles, 2).unwrap();
        let path = sample_switching(&model, 3.2, 0).unwrap();
        assert_eq!(path.events, vec![(0.0, 0), (1.0, 1), (1.5, 0), (2.5, 1), (3.0, 0)]);
        assert_eq!(path.regenerations, vec![(0.0, 0), (1.5, 0), (3.0, 0)]);
    }

    #[test]
    fn single_mode_propagation_is_the_exponential() {
        let a = dmatrix![-0.3, 1.0; -1.0, -0.3];
        let model = single_mode(a.clone());
        let path = sample_switching(&model, 2.0, 0).unwrap();
        let x0 = dvector![1.0, 2.0];
        let xs = propagate_state(&path, model.modes(), &x0, &[0.0, 0.7, 2.0]).unwrap();
        assert_eq!(xs[0], x0);
        assert_relative_eq!(xs[1], expm(&(&a * 0.7)).unwrap() * &x0, epsilon = 1e-14);
        assert_relative_eq!(xs[2], expm(&(&a * 2.0)).unwrap() * &x0, epsilon = 1e-13);
        let zeros = propagate_state(&path, model.modes(), &DVector::zeros(2), &[0.0, 1.0]).unwrap();
        assert!(zeros.iter().all(|x| x.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn propagation_rejects_bad_grid() {
        let model = single_mode(dmatrix![-1.0]);
        let path = sample_switching(&model, 1.0, 0).unwrap();
        assert!(propagate_state(&path, model.modes(), &dvector![1.0], &[0.5, 0.2]).is_err());
        assert!(propagate_state(&path, model.modes(), &dvector![1.0], &[2.0]).is_err());
        assert!(propagate_state(&path, model.modes(), &dvector![1.0, 0.0], &[0.5]).is_err());
    }

    #[test]
    fn rescaling_keeps_log_moment_finite() {
        let model = single_mode(dmatrix![400.0]);
        let config = MomentConfig {
            m: 2,
            initial: InitialCondition::Fixed { x0: dvector![1.0], theta0: None },
            paths: 2,
            horizon: 2.0,
            grid: uniform_grid(2.0, 0.5).unwrap(),
            seed: 0,
            keep_paths: false,
        };
        let ens = estimate_moments(&model, &config).unwrap();
        assert_relative_eq!(ens.log_moment_mean[4], 1600.0, max_relative = 1e-12);
        assert!(ens.moment_mean[4].is_infinite());
        assert_eq!(ens.saturation_time, Some(1.0));
        assert_relative_eq!(ens.empirical_growth_rate.unwrap(), 800.0, max_relative = 1e-10);
    }

    #[test]
    fn deterministic_start_is_exact() {
        let model = two_state_mjls();
        let config = MomentConfig {
            m: 2,
            initial: InitialCondition::Fixed { x0: dvector![0.3, 0.4], theta0: None },
            paths: 7,
            horizon: 1.0,
            grid: uniform_grid(1.0, 0.1).unwrap(),
            seed: 9,
            keep_paths: true,
        };
        let ens = estimate_moments(&model, &config).unwrap();
        assert_eq!(ens.moment_mean[0], dvector![0.3f64, 0.4].norm().powi(2));
        assert_eq!(ens.time_grid.len(), 11);
        assert!(ens.moment_mean.iter().all(|v| *v >= 0.0));
        assert_eq!(ens.per_path_norms.as_ref().unwrap().len(), 7);
    }

    #[test]
    fn lift_propagation_starts_at_the_lifted_state() {
        let model = two_state_mjls();
        let x0 = dvector![1.0, -2.0];
        let est = empirical_lift_propagation(&model, 2, 1, &x0, 2, None, 5, 0).unwrap();
        assert_eq!(est.len(), 3);
        let basis = MultiIndexBasis::new(2, 2).unwrap();
        let mut want = DVector::zeros(6);
        want.rows_mut(3, 3).copy_from(&basis.lift(&x0).unwrap());
        assert_eq!(est[0].mean, want);
        assert_eq!(est[0].standard_error, DVector::zeros(6));
    }

    #[test]
    fn slope_fit() {
        let t = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        assert_relative_eq!(fit_slope(&t, &y).unwrap(), 2.0);
        assert_eq!(fit_slope(&t[..1], &y[..1]), None);
    }

    #[test]
    fn csv_quotes_labels_with_commas() {
        let modes = ModeSet::new(vec!["(1,2)".into()], vec![dmatrix![0.0]]).unwrap();
        let path = SamplePath { events: vec![(0.0, 0)], regenerations: vec![(0.0, 0)], horizon: 1.0, seed: 0 };
        let mut buf = Vec::new();
        write_switching_csv(&path, &modes, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "time,mode\n0,\"(1,2)\"\n");
    }

    #[test]
    fn uniform_grid_includes_horizon() {
        let g = uniform_grid(1.0, 0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(uniform_grid(1.0, 0.0).is_err());
    }
}
