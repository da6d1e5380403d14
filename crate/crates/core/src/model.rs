//! Switched-system models and the model file format.
//!
//! A model pairs a finite set of mode matrices with one of four switching
//! classes: Markov jump (`mjls`), semi-Markov (`semi_markov`), regenerative
//! cycles drawn from finitely many scenarios (`regenerative`) and Markov jump
//! plants under periodically sampled mode feedback (`periodic`).
//!
//! Files are JSON with row-major matrices. Embedded states in `kernel` blocks
//! are numbered from 1. See `models/` in the repository for complete files.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::gauss_legendre_adaptive;

/// Tolerance on row sums of stochastic matrices, generators and atom weights.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-12;

pub const FORMAT_VERSION: u32 = 1;

pub fn is_metzler(a: &DMatrix<f64>) -> bool {
    (0..a.nrows()).all(|i| (0..a.ncols()).all(|j| i == j || a[(i, j)] >= 0.0))
}

/// Mode matrices `A_λ` indexed by label.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSet {
    n: usize,
    labels: Vec<String>,
    matrices: Vec<DMatrix<f64>>,
    metzler: Vec<bool>,
}

impl ModeSet {
    pub fn new(labels: Vec<String>, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("modes", "at least one mode is required"));
        }
        if labels.len() != matrices.len() {
            return Err(Error::invalid("modes", "one matrix per label is required"));
        }
        let n = matrices[0].nrows();
        let mut seen = HashMap::new();
        for (k, (label, a)) in labels.iter().zip(&matrices).enumerate() {
            if seen.insert(label.as_str(), k).is_some() {
                return Err(Error::invalid(format!("modes[{k}].label"), format!("duplicate label `{label}`")));
            }
            if !a.is_square() || a.nrows() != n || n == 0 {
                return Err(Error::invalid(
                    format!("modes[{k}].matrix"),
                    format!("expected {n}x{n}, got {}x{}", a.nrows(), a.ncols()),
                ));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("modes[{k}].matrix"), "non-finite entry"));
            }
        }
        let metzler = matrices.iter().map(is_metzler).collect();
        Ok(ModeSet { n, labels, matrices, metzler })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn matrix(&self, k: usize) -> &DMatrix<f64> {
        &self.matrices[k]
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn metzler_flags(&self) -> &[bool] {
        &self.metzler
    }

    /// Sufficient condition for positivity of the switched system.
    pub fn all_metzler(&self) -> bool {
        self.metzler.iter().all(|&b| b)
    }

    /// Applies `f` to every mode matrix, keeping labels.
    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        ModeSet::new(self.labels.clone(), self.matrices.iter().map(f).collect())
    }
}

pub fn check_metzler(modes: &ModeSet) -> BTreeMap<String, bool> {
    modes.labels.iter().cloned().zip(modes.metzler.iter().copied()).collect()
}

/// Distribution of a holding time `τ_{k+1} - τ_k`; always supported on a
/// bounded subset of `(0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum HoldingDistribution {
    Deterministic {
        value: f64,
    },
    /// `(time, probability)` atoms.
    DiscreteFinite {
        atoms: Vec<(f64, f64)>,
    },
    Uniform {
        low: f64,
        high: f64,
    },
    /// Exponential with the given rate conditioned on `τ ≤ cap`.
    TruncatedExponential {
        rate: f64,
        cap: f64,
    },
}

impl HoldingDistribution {
    pub fn validate(&self, path: &str) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self {
            Self::Deterministic { value } => {
                if !positive(*value) {
                    return Err(Error::invalid(path, format!("holding time {value} must be positive and finite")));
                }
            }
            Self::DiscreteFinite { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::invalid(path, "discrete distribution without atoms"));
                }
                for (k, (t, p)) in atoms.iter().enumerate() {
                    if !positive(*t) {
                        return Err(Error::invalid(
                            format!("{path}.atoms[{k}]"),
                            format!("atom time {t} must be positive and finite"),
                        ));
                    }
                    if !(p.is_finite() && *p >= 0.0) {
                        return Err(Error::invalid(
                            format!("{path}.atoms[{k}]"),
                            format!("atom probability {p} is negative"),
                        ));
                    }
                }
                let total: f64 = atoms.iter().map(|(_, p)| p).sum();
                if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                    return Err(Error::invalid(path, format!("atom probabilities sum to {total}")));
                }
            }
            Self::Uniform { low, high } => {
                if !(low.is_finite() && high.is_finite() && *low >= 0.0 && low < high) {
                    return Err(Error::invalid(
                        path,
                        format!("uniform bounds [{low}, {high}] must satisfy 0 <= low < high < inf"),
                    ));
                }
            }
            Self::TruncatedExponential { rate, cap } => {
                if !positive(*rate) || !positive(*cap) {
                    return Err(Error::invalid(path, "truncated exponential needs positive finite rate and cap"));
                }
            }
        }
        Ok(())
    }

    /// Upper end `T` of the support.
    pub fn support_bound(&self) -> f64 {
        match self {
            Self::Deterministic { value } => *value,
            Self::DiscreteFinite { atoms } => {
                atoms.iter().filter(|(_, p)| *p > 0.0).map(|(t, _)| *t).fold(0.0, f64::max)
            }
            Self::Uniform { high, .. } => *high,
            Self::TruncatedExponential { cap, .. } => *cap,
        }
    }

    /// Draws a strictly positive holding time.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Deterministic { value } => *value,
            Self::DiscreteFinite { atoms } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (t, p) in atoms {
                    acc += p;
                    if u < acc {
                        return *t;
                    }
                }
                // rounding in the cumulative sum
                atoms.iter().rev().find(|(_, p)| *p > 0.0).map(|(t, _)| *t).unwrap()
            }
            Self::Uniform { low, high } => loop {
                let t = low + (high - low) * rng.random::<f64>();
                if t > 0.0 {
                    return t;
                }
            },
            Self::TruncatedExponential { rate, cap } => {
                // inverse CDF of the truncated law with u in (0, 1]
                let u = 1.0 - rng.random::<f64>();
                let mass = -(-rate * cap).exp_m1();
                let t = -(-u * mass).ln_1p() / rate;
                t.min(*cap)
            }
        }
    }

    /// `E[f(τ)]` for a matrix-valued `f`: exact sums for atomic laws and
    /// adaptive Gauss–Legendre quadrature for continuous ones.
    pub fn expectation<F>(&self, mut f: F) -> Result<DMatrix<f64>>
    where
        F: FnMut(f64) -> Result<DMatrix<f64>>,
    {
        match self {
            Self::Deterministic { value } => f(*value),
            Self::DiscreteFinite { atoms } => {
                let mut acc: Option<DMatrix<f64>> = None;
                for (t, p) in atoms.iter().filter(|(_, p)| *p > 0.0) {
                    let v = f(*t)? * *p;
                    acc = Some(match acc {
                        Some(s) => s + v,
                        None => v,
                    });
                }
                Ok(acc.expect("validated distribution has positive mass"))
            }
            Self::Uniform { low, high } => {
                let density = 1.0 / (high - low);
                Ok(gauss_legendre_adaptive(&mut f, *low, *high)? * density)
            }
            Self::TruncatedExponential { rate, cap } => {
                let mass = -(-rate * cap).exp_m1();
                gauss_legendre_adaptive(|t| Ok(f(t)? * (rate * (-rate * t).exp() / mass)), 0.0, *cap)
            }
        }
    }
}

/// Infinitesimal generator `Q` of a continuous-time Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct InfinitesimalGenerator {
    q: DMatrix<f64>,
}

impl InfinitesimalGenerator {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        Self::validated(q, "generator")
    }

    fn validated(q: DMatrix<f64>, path: &str) -> Result<Self> {
        if !q.is_square() || q.nrows() == 0 {
            return Err(Error::invalid(path, format!("generator must be square, got {}x{}", q.nrows(), q.ncols())));
        }
        for i in 0..q.nrows() {
            for j in 0..q.ncols() {
                let v = q[(i, j)];
                if !v.is_finite() {
                    return Err(Error::invalid(format!("{path}[{}]", i), "non-finite rate"));
                }
                if i != j && v < 0.0 {
                    return Err(Error::invalid(
                        format!("{path}[{i}][{j}]"),
                        format!("off-diagonal rate {v} is negative"),
                    ));
                }
            }
            let sum: f64 = q.row(i).sum();
            if sum.abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::invalid(format!("{path}[{i}]"), format!("generator row sums to {sum}, expected 0")));
            }
        }
        Ok(InfinitesimalGenerator { q })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn states(&self) -> usize {
        self.q.nrows()
    }
}

/// Markov renewal kernel factored as `p_ij · F_ij(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiMarkovKernel {
    p: DMatrix<f64>,
    /// Row-major `N × N`; present wherever `p_ij > 0`.
    holding: Vec<Option<HoldingDistribution>>,
}

impl SemiMarkovKernel {
    pub fn new(p: DMatrix<f64>, holding: Vec<((usize, usize), HoldingDistribution)>) -> Result<Self> {
        check_stochastic(&p, "kernel.P")?;
        let n = p.nrows();
        let mut table: Vec<Option<HoldingDistribution>> = vec![None; n * n];
        for (k, ((i, j), dist)) in holding.into_iter().enumerate() {
            let path = format!("kernel.holding[{k}]");
            if i >= n || j >= n {
                return Err(Error::invalid(path, format!("transition ({}, {}) outside 1..={n}", i + 1, j + 1)));
            }
            dist.validate(&format!("{path}.dist"))?;
            if table[i * n + j].replace(dist).is_some() {
                return Err(Error::invalid(path, format!("duplicate holding law for ({}, {})", i + 1, j + 1)));
            }
        }
        for i in 0..n {
            for j in 0..n {
                if p[(i, j)] > 0.0 && table[i * n + j].is_none() {
                    return Err(Error::invalid(
                        "kernel.holding",
                        format!("no holding law for transition ({}, {}) with positive probability", i + 1, j + 1),
                    ));
                }
            }
        }
        Ok(SemiMarkovKernel { p, holding: table })
    }

    pub fn states(&self) -> usize {
        self.p.nrows()
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn holding(&self, from: usize, to: usize) -> Option<&HoldingDistribution> {
        self.holding[from * self.states() + to].as_ref()
    }

    /// Largest holding time over transitions that can occur.
    pub fn support_bound(&self) -> f64 {
        let n = self.states();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.p[(i, j)] > 0.0)
            .filter_map(|(i, j)| self.holding(i, j))
            .map(HoldingDistribution::support_bound)
            .fold(0.0, f64::max)
    }
}

fn check_stochastic(p: &DMatrix<f64>, path: &str) -> Result<()> {
    if !p.is_square() || p.nrows() == 0 {
        return Err(Error::invalid(path, format!("transition matrix must be square, got {}x{}", p.nrows(), p.ncols())));
    }
    for i in 0..p.nrows() {
        if p.row(i).iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!("{path}[{i}]"), "probabilities must be finite and nonnegative"));
        }
        let sum: f64 = p.row(i).sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::invalid(format!("{path}[{i}]"), format!("row sums to {sum}, expected 1")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub mode: usize,
    pub duration: f64,
}

/// One possible regeneration cycle: a piecewise-constant mode schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub prob: f64,
    pub schedule: Vec<Segment>,
}

impl Scenario {
    pub fn duration(&self) -> f64 {
        self.schedule.iter().map(|s| s.duration).sum()
    }
}

/// Markov jump plant `dx/dt = A_{P,r} x + B_{P,r} u` with `u = K_q x`, where
/// `q` holds the value of `r` sampled every `h` time units.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicObservation {
    plant_a: Vec<DMatrix<f64>>,
    plant_b: Vec<DMatrix<f64>>,
    gains: Vec<DMatrix<f64>>,
    generator: InfinitesimalGenerator,
    h: f64,
}

impl PeriodicObservation {
    pub fn new(
        plant_a: Vec<DMatrix<f64>>,
        plant_b: Vec<DMatrix<f64>>,
        gains: Vec<DMatrix<f64>>,
        generator: InfinitesimalGenerator,
        h: f64,
    ) -> Result<Self> {
        let big_n = generator.states();
        for (name, list) in [("plant_A", &plant_a), ("plant_B", &plant_b), ("gains", &gains)] {
            if list.len() != big_n {
                return Err(Error::invalid(
                    format!("periodic.{name}"),
                    format!("expected {big_n} matrices (one per generator state), got {}", list.len()),
                ));
            }
        }
        let n = plant_a[0].nrows();
        let p = plant_b[0].ncols();
        for i in 0..big_n {
            let (a, b, k) = (&plant_a[i], &plant_b[i], &gains[i]);
            if a.shape() != (n, n) || n == 0 {
                return Err(Error::invalid(format!("periodic.plant_A[{i}]"), format!("expected {n}x{n}")));
            }
            if b.shape() != (n, p) {
                return Err(Error::invalid(
                    format!("periodic.plant_B[{i}]"),
                    format!("expected {n}x{p}, got {}x{}", b.nrows(), b.ncols()),
                ));
            }
            if k.shape() != (p, n) {
                return Err(Error::invalid(
                    format!("periodic.gains[{i}]"),
                    format!("expected {p}x{n}, got {}x{}", k.nrows(), k.ncols()),
                ));
            }
            if a.iter().chain(b.iter()).chain(k.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("periodic[{i}]"), "non-finite entry"));
            }
        }
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid("periodic.h", format!("sampling period {h} must be positive")));
        }
        Ok(PeriodicObservation { plant_a, plant_b, gains, generator, h })
    }

    pub fn with_h(&self, h: f64) -> Result<Self> {
        Self::new(self.plant_a.clone(), self.plant_b.clone(), self.gains.clone(), self.generator.clone(), h)
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn generator(&self) -> &InfinitesimalGenerator {
        &self.generator
    }

    pub fn states(&self) -> usize {
        self.generator.states()
    }

    pub fn plant_a(&self) -> &[DMatrix<f64>] {
        &self.plant_a
    }

    pub fn plant_b(&self) -> &[DMatrix<f64>] {
        &self.plant_b
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    /// Mode index of the pair `(r, q)` (0-based) in [`closed_loop_modes`].
    pub fn pair_index(&self, r: usize, q: usize) -> usize {
        r * self.states() + q
    }

    /// Closed-loop matrices `A_{P,i} + B_{P,i} K_j`, labelled `(i,j)` from 1,
    /// ordered with `i` major.
    pub fn closed_loop_modes(&self) -> Result<ModeSet> {
        let big_n = self.states();
        let mut labels = Vec::with_capacity(big_n * big_n);
        let mut matrices = Vec::with_capacity(big_n * big_n);
        for i in 0..big_n {
            for j in 0..big_n {
                if self.plant_b[i].ncols() != self.gains[j].nrows() {
                    return Err(Error::Dimension(format!("B_{} and K_{} do not conform", i + 1, j + 1)));
                }
                labels.push(format!("({},{})", i + 1, j + 1));
                matrices.push(&self.plant_a[i] + &self.plant_b[i] * &self.gains[j]);
            }
        }
        ModeSet::new(labels, matrices)
    }

    /// Closed loop under continuous mode observation, `A_{P,i} + B_{P,i} K_i`.
    pub fn continuous_observation_modes(&self) -> Result<ModeSet> {
        let big_n = self.states();
        ModeSet::new(
            (1..=big_n).map(|i| i.to_string()).collect(),
            (0..big_n).map(|i| &self.plant_a[i] + &self.plant_b[i] * &self.gains[i]).collect(),
        )
    }
}

pub fn closed_loop_modes(model: &PeriodicObservation) -> Result<ModeSet> {
    model.closed_loop_modes()
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemClass {
    Mjls {
        generator: InfinitesimalGenerator,
    },
    SemiMarkov {
        kernel: SemiMarkovKernel,
        /// Mode index for each embedded state.
        mode_of_state: Vec<usize>,
    },
    Regenerative {
        cycles: Vec<Scenario>,
    },
    PeriodicObservation(PeriodicObservation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTag {
    Mjls,
    SemiMarkov,
    Regenerative,
    Periodic,
}

impl ClassTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassTag::Mjls => "mjls",
            ClassTag::SemiMarkov => "semi_markov",
            ClassTag::Regenerative => "regenerative",
            ClassTag::Periodic => "periodic",
        }
    }
}

impl SystemClass {
    pub fn tag(&self) -> ClassTag {
        match self {
            SystemClass::Mjls { .. } => ClassTag::Mjls,
            SystemClass::SemiMarkov { .. } => ClassTag::SemiMarkov,
            SystemClass::Regenerative { .. } => ClassTag::Regenerative,
            SystemClass::PeriodicObservation(_) => ClassTag::Periodic,
        }
    }

    /// Number of embedded states `N`.
    pub fn embedded_states(&self) -> usize {
        match self {
            SystemClass::Mjls { generator } => generator.states(),
            SystemClass::SemiMarkov { kernel, .. } => kernel.states(),
            SystemClass::Regenerative { .. } => 1,
            SystemClass::PeriodicObservation(p) => p.states(),
        }
    }
}

/// Status of the two standing assumptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Assumptions {
    pub m_even: bool,
    pub all_metzler: bool,
    /// (A1): `m` even or every mode Metzler.
    pub a1: bool,
    /// (A2) bound `T` on regeneration intervals; `None` for Markov jump
    /// models, which admit any sampling horizon.
    pub support_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedSystemModel {
    modes: ModeSet,
    m: usize,
    class: SystemClass,
    assumptions: Assumptions,
}

impl SwitchedSystemModel {
    pub fn mjls(modes: ModeSet, generator: InfinitesimalGenerator, m: usize) -> Result<Self> {
        if modes.len() != generator.states() {
            return Err(Error::invalid(
                "modes",
                format!("{} modes for a {}-state generator", modes.len(), generator.states()),
            ));
        }
        Self::assemble(modes, m, SystemClass::Mjls { generator })
    }

    pub fn semi_markov(modes: ModeSet, kernel: SemiMarkovKernel, mode_of_state: Vec<usize>, m: usize) -> Result<Self> {
        if mode_of_state.len() != kernel.states() {
            return Err(Error::invalid(
                "kernel.modes",
                format!("{} mode assignments for {} embedded states", mode_of_state.len(), kernel.states()),
            ));
        }
        if let Some(k) = mode_of_state.iter().position(|&k| k >= modes.len()) {
            return Err(Error::invalid(format!("kernel.modes[{k}]"), "unknown mode"));
        }
        Self::assemble(modes, m, SystemClass::SemiMarkov { kernel, mode_of_state })
    }

    pub fn regenerative(modes: ModeSet, cycles: Vec<Scenario>, m: usize) -> Result<Self> {
        if cycles.is_empty() {
            return Err(Error::invalid("cycles", "at least one scenario is required"));
        }
        let mut total = 0.0;
        for (k, c) in cycles.iter().enumerate() {
            if !(c.prob.is_finite() && c.prob >= 0.0) {
                return Err(Error::invalid(format!("cycles[{k}].prob"), "probability must be nonnegative"));
            }
            if c.schedule.is_empty() {
                return Err(Error::invalid(format!("cycles[{k}].schedule"), "empty schedule"));
            }
            for (s, seg) in c.schedule.iter().enumerate() {
                if seg.mode >= modes.len() {
                    return Err(Error::invalid(format!("cycles[{k}].schedule[{s}].label"), "unknown mode"));
                }
                if !(seg.duration.is_finite() && seg.duration > 0.0) {
                    return Err(Error::invalid(
                        format!("cycles[{k}].schedule[{s}].duration"),
                        format!("duration {} must be positive", seg.duration),
                    ));
                }
            }
            total += c.prob;
        }
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::invalid("cycles", format!("scenario probabilities sum to {total}")));
        }
        Self::assemble(modes, m, SystemClass::Regenerative { cycles })
    }

    pub fn periodic(periodic: PeriodicObservation, m: usize) -> Result<Self> {
        let modes = periodic.closed_loop_modes()?;
        Self::assemble(modes, m, SystemClass::PeriodicObservation(periodic))
    }

    fn assemble(modes: ModeSet, m: usize, class: SystemClass) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("m", "lift degree must be at least 1"));
        }
        let m_even = m.is_multiple_of(2);
        let all_metzler = modes.all_metzler();
        if !m_even && !all_metzler {
            let offending: Vec<&str> = modes
                .labels()
                .iter()
                .zip(modes.metzler_flags())
                .filter(|(_, &f)| !f)
                .map(|(l, _)| l.as_str())
                .collect();
            return Err(Error::AssumptionA1(format!("m = {m} is odd and modes {offending:?} are not Metzler")));
        }
        let support_bound = match &class {
            SystemClass::Mjls { .. } => None,
            SystemClass::SemiMarkov { kernel, .. } => Some(kernel.support_bound()),
            SystemClass::Regenerative { cycles } => {
                Some(cycles.iter().filter(|c| c.prob > 0.0).map(Scenario::duration).fold(0.0, f64::max))
            }
            SystemClass::PeriodicObservation(p) => Some(p.h()),
        };
        Ok(SwitchedSystemModel {
            modes,
            m,
            class,
            assumptions: Assumptions { m_even, all_metzler, a1: true, support_bound },
        })
    }

    /// Same system analysed at a different lift degree.
    pub fn with_m(&self, m: usize) -> Result<Self> {
        Self::assemble(self.modes.clone(), m, self.class.clone())
    }

    /// Same periodic system with a different sampling period.
    pub fn with_h(&self, h: f64) -> Result<Self> {
        match &self.class {
            SystemClass::PeriodicObservation(p) => Self::periodic(p.with_h(h)?, self.m),
            other => Err(Error::Unsupported(format!(
                "sampling period applies to periodic models, not `{}`",
                other.tag().as_str()
            ))),
        }
    }

    pub fn modes(&self) -> &ModeSet {
        &self.modes
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn class(&self) -> &SystemClass {
        &self.class
    }

    pub fn assumptions(&self) -> &Assumptions {
        &self.assumptions
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelDocument::from(self)).expect("model documents always serialize")
    }
}

// ---------------------------------------------------------------------------
// File format

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    version: u32,
    m: usize,
    class: ClassTag,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    modes: Vec<ModeDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<KernelDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cycles: Option<Vec<CycleDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    periodic: Option<PeriodicDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeDoc {
    label: String,
    matrix: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelDoc {
    #[serde(rename = "P")]
    p: Rows,
    holding: Vec<HoldingDoc>,
    /// Mode label per embedded state; defaults to the mode list order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modes: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HoldingDoc {
    from: usize,
    to: usize,
    dist: HoldingDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CycleDoc {
    prob: f64,
    schedule: Vec<SegmentDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentDoc {
    label: String,
    duration: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PeriodicDoc {
    #[serde(rename = "plant_A")]
    plant_a: Vec<Rows>,
    #[serde(rename = "plant_B")]
    plant_b: Vec<Rows>,
    gains: Vec<Rows>,
    generator: Rows,
    h: f64,
}

fn to_matrix(rows: &Rows, path: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::invalid(path, "empty matrix"));
    }
    if let Some(k) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::invalid(
            format!("{path}[{k}]"),
            format!("row has {} entries, expected {ncols}", rows[k].len()),
        ));
    }
    Ok(DMatrix::from_row_iterator(nrows, ncols, rows.iter().flatten().copied()))
}

fn to_rows(a: &DMatrix<f64>) -> Rows {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn require<T>(v: Option<T>, field: &str, class: ClassTag) -> Result<T> {
    v.ok_or_else(|| Error::invalid(field, format!("required for class `{}`", class.as_str())))
}

fn forbid<T>(v: &Option<T>, field: &str, class: ClassTag) -> Result<()> {
    match v {
        Some(_) => Err(Error::invalid(field, format!("not allowed for class `{}`", class.as_str()))),
        None => Ok(()),
    }
}

impl ModelDocument {
    fn into_model(self) -> Result<SwitchedSystemModel> {
        if self.version != FORMAT_VERSION {
            return Err(Error::invalid(
                "version",
                format!("unsupported version {}, expected {FORMAT_VERSION}", self.version),
            ));
        }
        let class = self.class;
        let modes = || -> Result<ModeSet> {
            let mut labels = Vec::with_capacity(self.modes.len());
            let mut matrices = Vec::with_capacity(self.modes.len());
            for (k, mode) in self.modes.iter().enumerate() {
                labels.push(mode.label.clone());
                matrices.push(to_matrix(&mode.matrix, &format!("modes[{k}].matrix"))?);
            }
            ModeSet::new(labels, matrices)
        };
        let (kernel_field, cycles_field, periodic_field, generator_field) =
            (&self.kernel, &self.cycles, &self.periodic, &self.generator);
        match class {
            ClassTag::Mjls => {
                forbid(kernel_field, "kernel", class)?;
                forbid(cycles_field, "cycles", class)?;
                forbid(periodic_field, "periodic", class)?;
                let q = to_matrix(require(generator_field.as_ref(), "generator", class)?, "generator")?;
                let generator = InfinitesimalGenerator::validated(q, "generator")?;
                SwitchedSystemModel::mjls(modes()?, generator, self.m)
            }
            ClassTag::SemiMarkov => {
                forbid(generator_field, "generator", class)?;
                forbid(cycles_field, "cycles", class)?;
                forbid(periodic_field, "periodic", class)?;
                let modes = modes()?;
                let doc = require(kernel_field.as_ref(), "kernel", class)?;
                let p = to_matrix(&doc.p, "kernel.P")?;
                let mut holding = Vec::with_capacity(doc.holding.len());
                for (k, h) in doc.holding.iter().enumerate() {
                    if h.from == 0 || h.to == 0 {
                        return Err(Error::invalid(format!("kernel.holding[{k}]"), "states are numbered from 1"));
                    }
                    holding.push(((h.from - 1, h.to - 1), h.dist.clone()));
                }
                let kernel = SemiMarkovKernel::new(p, holding)?;
                let mode_of_state = match &doc.modes {
                    Some(labels) => labels
                        .iter()
                        .enumerate()
                        .map(|(k, l)| {
                            modes.index_of(l).ok_or_else(|| {
                                Error::invalid(format!("kernel.modes[{k}]"), format!("unknown mode `{l}`"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                    None => (0..kernel.states()).collect(),
                };
                SwitchedSystemModel::semi_markov(modes, kernel, mode_of_state, self.m)
            }
            ClassTag::Regenerative => {
                forbid(generator_field, "generator", class)?;
                forbid(kernel_field, "kernel", class)?;
                forbid(periodic_field, "periodic", class)?;
                let modes = modes()?;
                let docs = require(cycles_field.as_ref(), "cycles", class)?;
                let mut cycles = Vec::with_capacity(docs.len());
                for (k, c) in docs.iter().enumerate() {
                    let schedule = c
                        .schedule
                        .iter()
                        .enumerate()
                        .map(|(s, seg)| {
                            let mode = modes.index_of(&seg.label).ok_or_else(|| {
                                Error::invalid(
                                    format!("cycles[{k}].schedule[{s}].label"),
                                    format!("unknown mode `{}`", seg.label),
                                )
                            })?;
                            Ok(Segment { mode, duration: seg.duration })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    cycles.push(Scenario { prob: c.prob, schedule });
                }
                SwitchedSystemModel::regenerative(modes, cycles, self.m)
            }
            ClassTag::Periodic => {
                forbid(generator_field, "generator", class)?;
                forbid(kernel_field, "kernel", class)?;
                forbid(cycles_field, "cycles", class)?;
                if !self.modes.is_empty() {
                    return Err(Error::invalid(
                        "modes",
                        "periodic models derive their modes from the `periodic` block",
                    ));
                }
                let doc = require(periodic_field.as_ref(), "periodic", class)?;
                let list = |mats: &[Rows], name: &str| -> Result<Vec<DMatrix<f64>>> {
                    mats.iter().enumerate().map(|(k, r)| to_matrix(r, &format!("periodic.{name}[{k}]"))).collect()
                };
                let generator = InfinitesimalGenerator::validated(
                    to_matrix(&doc.generator, "periodic.generator")?,
                    "periodic.generator",
                )?;
                let periodic = PeriodicObservation::new(
                    list(&doc.plant_a, "plant_A")?,
                    list(&doc.plant_b, "plant_B")?,
                    list(&doc.gains, "gains")?,
                    generator,
                    doc.h,
                )?;
                SwitchedSystemModel::periodic(periodic, self.m)
            }
        }
    }
}

impl From<&SwitchedSystemModel> for ModelDocument {
    fn from(model: &SwitchedSystemModel) -> Self {
        let modes = model
            .modes
            .labels()
            .iter()
            .zip(model.modes.matrices())
            .map(|(label, a)| ModeDoc { label: label.clone(), matrix: to_rows(a) })
            .collect();
        let mut doc = ModelDocument {
            version: FORMAT_VERSION,
            m: model.m,
            class: model.class.tag(),
            modes,
            generator: None,
            kernel: None,
            cycles: None,
            periodic: None,
        };
        match &model.class {
            SystemClass::Mjls { generator } => doc.generator = Some(to_rows(generator.matrix())),
            SystemClass::SemiMarkov { kernel, mode_of_state } => {
                let n = kernel.states();
                let holding = (0..n)
                    .flat_map(|i| (0..n).map(move |j| (i, j)))
                    .filter_map(|(i, j)| {
                        kernel.holding(i, j).map(|d| HoldingDoc { from: i + 1, to: j + 1, dist: d.clone() })
                    })
                    .collect();
                doc.kernel = Some(KernelDoc {
                    p: to_rows(kernel.transition_matrix()),
                    holding,
                    modes: Some(mode_of_state.iter().map(|&k| model.modes.label(k).to_string()).collect()),
                });
            }
            SystemClass::Regenerative { cycles } => {
                doc.cycles = Some(
                    cycles
                        .iter()
                        .map(|c| CycleDoc {
                            prob: c.prob,
                            schedule: c
                                .schedule
                                .iter()
                                .map(|s| SegmentDoc {
                                    label: model.modes.label(s.mode).to_string(),
                                    duration: s.duration,
                                })
                                .collect(),
                        })
                        .collect(),
                );
            }
            SystemClass::PeriodicObservation(p) => {
                doc.modes.clear();
                doc.periodic = Some(PeriodicDoc {
                    plant_a: p.plant_a.iter().map(to_rows).collect(),
                    plant_b: p.plant_b.iter().map(to_rows).collect(),
                    gains: p.gains.iter().map(to_rows).collect(),
                    generator: to_rows(p.generator.matrix()),
                    h: p.h,
                });
            }
        }
        doc
    }
}

/// Parses and validates a model document.
pub fn parse_model(document: &str) -> Result<SwitchedSystemModel> {
    let doc: ModelDocument = serde_json::from_str(document).map_err(|e| Error::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    doc.into_model()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SwitchedSystemModel> {
    parse_model(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    const MJLS: &str = r#"{
        "version": 1, "m": 2, "class": "mjls",
        "modes": [
            {"label": "a", "matrix": [[-1.0, 2.0], [0.5, -3.0]]},
            {"label": "b", "matrix": [[-1.0, -0.1], [0.5, -3.0]]}
        ],
        "generator": [[-0.5, 0.5], [1.0, -1.0]]
    }"#;

    #[test]
    fn metzler_flags() {
        assert!(is_metzler(&dmatrix![-1.0, 2.0; 0.5, -3.0]));
        assert!(!is_metzler(&dmatrix![-1.0, -0.1; 0.5, -3.0]));
        let model = parse_model(MJLS).unwrap();
        let flags = check_metzler(model.modes());
        assert!(flags["a"]);
        assert!(!flags["b"]);
        assert!(!model.assumptions().all_metzler);
        assert!(model.assumptions().a1);
        assert_eq!(model.assumptions().support_bound, None);
    }

    #[test]
    fn odd_degree_needs_metzler_modes() {
        let odd = MJLS.replace("\"m\": 2", "\"m\": 3");
        assert!(matches!(parse_model(&odd), Err(Error::AssumptionA1(_))));
        let metzler_only = odd.replace("-0.1", "0.1");
        assert!(parse_model(&metzler_only).unwrap().assumptions().all_metzler);
    }

    #[test]
    fn generator_row_sum_checked() {
        let bad = MJLS.replace("[1.0, -1.0]", "[1.0, -0.9]");
        match parse_model(&bad) {
            Err(Error::Invalid { path, .. }) => assert_eq!(path, "generator[1]"),
            other => panic!("expected invalid generator, got {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse_model("{\n  \"version\": 1,\n  \"m\": oops\n}").unwrap_err();
        match err {
            Error::Syntax { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_model(&MJLS.replace("mjls", "mystery")), Err(Error::Syntax { .. })));
    }

    #[test]
    fn zero_holding_time_rejected() {
        let doc = r#"{
            "version": 1, "m": 2, "class": "semi_markov",
            "modes": [{"label": "a", "matrix": [[-1.0]]}],
            "kernel": {"P": [[1.0]], "holding": [{"from": 1, "to": 1, "dist": {"type": "deterministic", "value": 0.0}}]}
        }"#;
        assert!(matches!(parse_model(doc), Err(Error::Invalid { .. })));
        let ok = doc.replace("\"value\": 0.0", "\"value\": 0.5");
        let model = parse_model(&ok).unwrap();
        assert_eq!(model.assumptions().support_bound, Some(0.5));
    }

    #[test]
    fn missing_holding_law_rejected() {
        let doc = r#"{
            "version": 1, "m": 2, "class": "semi_markov",
            "modes": [{"label": "a", "matrix": [[-1.0]]}, {"label": "b", "matrix": [[1.0]]}],
            "kernel": {"P": [[0.0, 1.0], [1.0, 0.0]],
                       "holding": [{"from": 1, "to": 2, "dist": {"type": "uniform", "low": 0.5, "high": 1.5}}]}
        }"#;
        assert!(matches!(parse_model(doc), Err(Error::Invalid { .. })));
    }

    #[test]
    fn discrete_atoms_must_normalize() {
        let d = HoldingDistribution::DiscreteFinite { atoms: vec![(1.0, 0.5), (2.0, 0.49)] };
        assert!(d.validate("d").is_err());
        let d = HoldingDistribution::DiscreteFinite { atoms: vec![(1.0, 0.5), (2.0, 0.5)] };
        assert!(d.validate("d").is_ok());
        assert_eq!(d.support_bound(), 2.0);
    }

    #[test]
    fn regenerative_probabilities_must_sum_to_one() {
        let doc = r#"{
            "version": 1, "m": 2, "class": "regenerative",
            "modes": [{"label": "a", "matrix": [[-1.0]]}],
            "cycles": [{"prob": 0.4, "schedule": [{"label": "a", "duration": 1.0}]},
                       {"prob": 0.5, "schedule": [{"label": "a", "duration": 2.0}]}]
        }"#;
        assert!(parse_model(doc).is_err());
        let model = parse_model(&doc.replace("0.4", "0.5")).unwrap();
        assert_eq!(model.assumptions().support_bound, Some(2.0));
    }

    #[test]
    fn class_blocks_are_exclusive() {
        let doc = MJLS.replace("\"generator\"", "\"cycles\": [], \"generator\"");
        assert!(matches!(parse_model(&doc), Err(Error::Invalid { .. })));
    }

    #[test]
    fn truncated_exponential_samples_stay_in_support() {
        use rand::SeedableRng;
        let d = HoldingDistribution::TruncatedExponential { rate: 2.0, cap: 0.3 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let t = d.sample(&mut rng);
            assert!(t > 0.0 && t <= 0.3);
        }
    }

    #[test]
    fn truncated_exponential_expectation_of_identity_is_one() {
        let d = HoldingDistribution::TruncatedExponential { rate: 1.5, cap: 4.0 };
        let e = d.expectation(|_| Ok(DMatrix::identity(2, 2))).unwrap();
        assert!((e[(0, 0)] - 1.0).abs() < 1e-12);
        // E[τ] for the truncated law: 1/λ - c e^{-λc}/(1 - e^{-λc})
        let mean = d.expectation(|t| Ok(DMatrix::from_element(1, 1, t))).unwrap()[(0, 0)];
        let want = 1.0 / 1.5 - 4.0 * (-6f64).exp() / (1.0 - (-6f64).exp());
        assert!((mean - want).abs() < 1e-12);
    }
}
