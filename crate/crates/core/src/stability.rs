//! Lifted block stability matrices and spectral verdicts.
//!
//! Every construction reduces the continuous-time switched system to the
//! lifted moment recursion `v_{k+1} = 𝒜 v_k` over regeneration instants,
//! where `v_k = E[e_{θ_k} ⊗ x(τ_k)^[m]]` and block `(i, j)` of `𝒜` is
//! `p_ji · E[Φ(τ₁; 0)^[m] | θ₀ = j, θ₁ = i]`. The system is exponentially
//! m-th mean stable iff `𝒜` is Schur stable. For Markov jump systems the
//! equivalent continuous test is Hurwitz stability of
//! `𝓑_Σ = Qᵀ ⊗ I + ⊕ᵢ (A_i)_[m]`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lift::MultiIndexBasis;
use crate::model::{
    Assumptions, InfinitesimalGenerator, ModeSet, PeriodicObservation, Scenario, SemiMarkovKernel, SwitchedSystemModel,
    SystemClass, NORMALIZATION_TOLERANCE,
};
use crate::numeric::{expm, spectral_summary, SpectralSummary};

/// Distance from the stability boundary inside which no verdict is given.
pub const MARGINAL_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralTest {
    /// Spectral radius below one.
    Schur,
    /// Spectral abscissa below zero.
    Hurwitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
    /// Within [`MARGINAL_TOLERANCE`] of the boundary.
    Marginal,
}

impl Verdict {
    pub fn decide(test: SpectralTest, value: f64) -> Verdict {
        let boundary = match test {
            SpectralTest::Schur => 1.0,
            SpectralTest::Hurwitz => 0.0,
        };
        if (value - boundary).abs() <= MARGINAL_TOLERANCE {
            Verdict::Marginal
        } else if value < boundary {
            Verdict::Stable
        } else {
            Verdict::Unstable
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Stable => "stable",
            Verdict::Unstable => "unstable",
            Verdict::Marginal => "marginal",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportClass {
    Mjls,
    SemiMarkov,
    Regenerative,
    Periodic,
    DiscreteSemiMarkov,
    /// Built from a user-supplied [`CycleLaw`].
    Custom,
}

impl ReportClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportClass::Mjls => "mjls",
            ReportClass::SemiMarkov => "semi_markov",
            ReportClass::Regenerative => "regenerative",
            ReportClass::Periodic => "periodic",
            ReportClass::DiscreteSemiMarkov => "discrete_semi_markov",
            ReportClass::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub class: ReportClass,
    pub matrix: DMatrix<f64>,
    pub test: SpectralTest,
    /// Spectral radius for [`SpectralTest::Schur`], abscissa for Hurwitz.
    pub decisive_value: f64,
    pub verdict: Verdict,
    /// `h⁻¹ ln ρ` for periodic sampling, the abscissa for Hurwitz tests and
    /// `ln ρ` per regeneration cycle otherwise.
    pub growth_rate: f64,
    pub h: Option<f64>,
    pub spectrum: SpectralSummary,
    pub assumptions: Option<Assumptions>,
}

/// The serialized form of a report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub class: ReportClass,
    pub test: SpectralTest,
    pub dimension: usize,
    pub decisive_value: f64,
    pub verdict: Verdict,
    pub growth_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

impl StabilityReport {
    fn schur(class: ReportClass, matrix: DMatrix<f64>, h: Option<f64>) -> Result<Self> {
        let spectrum = spectral_summary(&matrix)?;
        let rho = spectrum.spectral_radius;
        let growth_rate = match h {
            Some(h) => rho.ln() / h,
            None => rho.ln(),
        };
        Ok(StabilityReport {
            class,
            test: SpectralTest::Schur,
            decisive_value: rho,
            verdict: Verdict::decide(SpectralTest::Schur, rho),
            growth_rate,
            h,
            spectrum,
            matrix,
            assumptions: None,
        })
    }

    fn hurwitz(class: ReportClass, matrix: DMatrix<f64>) -> Result<Self> {
        let spectrum = spectral_summary(&matrix)?;
        let abscissa = spectrum.spectral_abscissa;
        Ok(StabilityReport {
            class,
            test: SpectralTest::Hurwitz,
            decisive_value: abscissa,
            verdict: Verdict::decide(SpectralTest::Hurwitz, abscissa),
            growth_rate: abscissa,
            h: None,
            spectrum,
            matrix,
            assumptions: None,
        })
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            class: self.class,
            test: self.test,
            dimension: self.dimension(),
            decisive_value: self.decisive_value,
            verdict: self.verdict,
            growth_rate: self.growth_rate,
            h: self.h,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }

    pub fn to_text(&self) -> String {
        let quantity = match self.test {
            SpectralTest::Schur => "spectral radius",
            SpectralTest::Hurwitz => "spectral abscissa",
        };
        let mut s = format!(
            "class: {}\ntest: {}\ndimension: {}\n{quantity}: {:.12}\ngrowth rate: {:.12}\n",
            self.class.as_str(),
            match self.test {
                SpectralTest::Schur => "schur",
                SpectralTest::Hurwitz => "hurwitz",
            },
            self.dimension(),
            self.decisive_value,
            self.growth_rate,
        );
        if let Some(h) = self.h {
            s.push_str(&format!("h: {h}\n"));
        }
        s.push_str(&format!("verdict: {}\n", self.verdict));
        s
    }
}

fn check_a1(modes: &ModeSet, m: usize) -> Result<()> {
    if m % 2 == 1 && !modes.all_metzler() {
        return Err(Error::AssumptionA1(format!("m = {m} is odd and not every mode is Metzler")));
    }
    Ok(())
}

fn lifted_generators(modes: &ModeSet, basis: &MultiIndexBasis) -> Result<Vec<DMatrix<f64>>> {
    modes.matrices().iter().map(|a| basis.infinitesimal(a)).collect()
}

/// `Qᵀ ⊗ I + blockdiag(L_0, …, L_{N-1})` for per-state lifted generators.
fn generator_block_matrix(q: &DMatrix<f64>, lifted: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let nm = lifted[0].nrows();
    let mut b = q.transpose().kronecker(&DMatrix::<f64>::identity(nm, nm));
    for (i, l) in lifted.iter().enumerate() {
        let mut block = b.view_mut((i * nm, i * nm), (nm, nm));
        block += *l;
    }
    b
}

/// `𝓑_Σ = Qᵀ ⊗ I_{n_m} + ⊕ᵢ (A_i)_[m]`.
pub fn mjls_generator(generator: &InfinitesimalGenerator, modes: &ModeSet, m: usize) -> Result<DMatrix<f64>> {
    if modes.len() != generator.states() {
        return Err(Error::Dimension(format!("{} modes for a {}-state generator", modes.len(), generator.states())));
    }
    let basis = MultiIndexBasis::new(modes.n(), m)?;
    let lifted = lifted_generators(modes, &basis)?;
    Ok(generator_block_matrix(generator.matrix(), &lifted.iter().collect::<Vec<_>>()))
}

/// Hurwitz test of `𝓑_Σ` for a Markov jump linear system.
pub fn mjls_matrix(generator: &InfinitesimalGenerator, modes: &ModeSet, m: usize) -> Result<StabilityReport> {
    check_a1(modes, m)?;
    StabilityReport::hurwitz(ReportClass::Mjls, mjls_generator(generator, modes, m)?)
}

/// Source of the conditional lifted cycle expectations that fill the block
/// matrix: block `(i, j)` is `p_ji · E[Φ^[m] | θ₀ = j, θ₁ = i]`.
pub trait CycleLaw {
    /// Number of embedded states `N`.
    fn states(&self) -> usize;

    /// `P(θ₁ = to | θ₀ = from)`.
    fn transition_probability(&self, from: usize, to: usize) -> f64;

    /// `E[Φ(τ₁; 0)^[m] | θ₀ = from, θ₁ = to]`; only called when the
    /// transition has positive probability.
    fn lifted_expectation(&self, from: usize, to: usize, basis: &MultiIndexBasis) -> Result<DMatrix<f64>>;
}

/// Assembles the `N·n_m` square block matrix for any [`CycleLaw`].
pub fn block_matrix(law: &impl CycleLaw, basis: &MultiIndexBasis) -> Result<DMatrix<f64>> {
    let big_n = law.states();
    let nm = basis.len();
    let mut out = DMatrix::zeros(big_n * nm, big_n * nm);
    for i in 0..big_n {
        for j in 0..big_n {
            let p = law.transition_probability(j, i);
            if p == 0.0 {
                continue;
            }
            let e = law.lifted_expectation(j, i, basis)?;
            out.view_mut((i * nm, j * nm), (nm, nm)).copy_from(&(e * p));
        }
    }
    Ok(out)
}

/// Schur test of the block matrix of an arbitrary [`CycleLaw`].
pub fn cycle_law_matrix(law: &impl CycleLaw, n: usize, m: usize) -> Result<StabilityReport> {
    let basis = MultiIndexBasis::new(n, m)?;
    StabilityReport::schur(ReportClass::Custom, block_matrix(law, &basis)?, None)
}

struct SemiMarkovLaw<'a> {
    kernel: &'a SemiMarkovKernel,
    lifted: Vec<DMatrix<f64>>,
}

impl CycleLaw for SemiMarkovLaw<'_> {
    fn states(&self) -> usize {
        self.kernel.states()
    }

    fn transition_probability(&self, from: usize, to: usize) -> f64 {
        self.kernel.transition_matrix()[(from, to)]
    }

    fn lifted_expectation(&self, from: usize, to: usize, _basis: &MultiIndexBasis) -> Result<DMatrix<f64>> {
        let dist = self.kernel.holding(from, to).ok_or_else(|| {
            Error::invalid("kernel.holding", format!("no holding law for ({}, {})", from + 1, to + 1))
        })?;
        let l = &self.lifted[from];
        dist.expectation(|t| expm(&(l * t)))
    }
}

/// Schur test for a semi-Markov jump linear system: block `(i, j)` is
/// `p_ji · E[exp((A_j)_[m] τ) | θ₀ = j, θ₁ = i]`.
pub fn semimarkov_matrix(
    kernel: &SemiMarkovKernel,
    modes: &ModeSet,
    mode_of_state: &[usize],
    m: usize,
) -> Result<StabilityReport> {
    check_a1(modes, m)?;
    if mode_of_state.len() != kernel.states() {
        return Err(Error::Dimension("one mode per embedded state is required".into()));
    }
    let basis = MultiIndexBasis::new(modes.n(), m)?;
    let lifted = mode_of_state.iter().map(|&k| basis.infinitesimal(modes.matrix(k))).collect::<Result<Vec<_>>>()?;
    let law = SemiMarkovLaw { kernel, lifted };
    StabilityReport::schur(ReportClass::SemiMarkov, block_matrix(&law, &basis)?, None)
}

/// Transition matrix of one schedule, later segments multiplied on the left.
pub fn schedule_transition(modes: &ModeSet, scenario: &Scenario) -> Result<DMatrix<f64>> {
    let mut phi = DMatrix::identity(modes.n(), modes.n());
    for seg in &scenario.schedule {
        phi = expm(&(modes.matrix(seg.mode) * seg.duration))? * phi;
    }
    Ok(phi)
}

/// Schur test of `E[Φ(R₁; 0)^[m]]` over finitely many cycle scenarios.
pub fn regenerative_matrix(cycles: &[Scenario], modes: &ModeSet, m: usize) -> Result<StabilityReport> {
    check_a1(modes, m)?;
    if cycles.is_empty() {
        return Err(Error::invalid("cycles", "at least one scenario is required"));
    }
    let basis = MultiIndexBasis::new(modes.n(), m)?;
    let mut acc = DMatrix::zeros(basis.len(), basis.len());
    for c in cycles.iter().filter(|c| c.prob > 0.0) {
        acc += basis.induced(&schedule_transition(modes, c)?)? * c.prob;
    }
    StabilityReport::schur(ReportClass::Regenerative, acc, None)
}

/// `(probability, matrix)` atoms of each conditional law, keyed by `(from, to)`.
pub type CycleAtoms = BTreeMap<(usize, usize), Vec<(f64, DMatrix<f64>)>>;

/// Finite conditional laws of the one-step matrix `F₀` of a discrete-time
/// semi-Markov jump linear system.
#[derive(Debug, Clone)]
pub struct FiniteCycleLaw {
    p: DMatrix<f64>,
    atoms: CycleAtoms,
}

impl FiniteCycleLaw {
    /// `atoms[(i, j)]` lists `(probability, F)` for `F₀` given `θ₀ = i, θ₁ = j`.
    pub fn new(p: DMatrix<f64>, atoms: CycleAtoms) -> Result<Self> {
        let big_n = p.nrows();
        if !p.is_square() || big_n == 0 {
            return Err(Error::Dimension("transition matrix must be square".into()));
        }
        for i in 0..big_n {
            let sum: f64 = p.row(i).sum();
            if p.row(i).iter().any(|v| *v < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::invalid(format!("P[{i}]"), format!("row sums to {sum}, expected 1")));
            }
            for j in 0..big_n {
                if p[(i, j)] == 0.0 {
                    continue;
                }
                let list = atoms
                    .get(&(i, j))
                    .ok_or_else(|| Error::invalid("atoms", format!("no distribution for transition ({i}, {j})")))?;
                let total: f64 = list.iter().map(|(q, _)| q).sum();
                if list.is_empty()
                    || list.iter().any(|(q, _)| *q < 0.0)
                    || (total - 1.0).abs() > NORMALIZATION_TOLERANCE
                {
                    return Err(Error::invalid(
                        format!("atoms[({i}, {j})]"),
                        format!("atom probabilities sum to {total}"),
                    ));
                }
            }
        }
        Ok(FiniteCycleLaw { p, atoms })
    }

    pub fn transition_matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn atoms(&self, from: usize, to: usize) -> &[(f64, DMatrix<f64>)] {
        self.atoms.get(&(from, to)).map_or(&[], Vec::as_slice)
    }
}

impl CycleLaw for FiniteCycleLaw {
    fn states(&self) -> usize {
        self.p.nrows()
    }

    fn transition_probability(&self, from: usize, to: usize) -> f64 {
        self.p[(from, to)]
    }

    fn lifted_expectation(&self, from: usize, to: usize, basis: &MultiIndexBasis) -> Result<DMatrix<f64>> {
        let mut acc = DMatrix::zeros(basis.len(), basis.len());
        for (q, f) in self.atoms(from, to) {
            acc += basis.induced(f)? * *q;
        }
        Ok(acc)
    }
}

/// Schur test of `𝓕` for a discrete-time semi-Markov jump linear system.
pub fn discrete_semimarkov_matrix(law: &FiniteCycleLaw, m: usize) -> Result<StabilityReport> {
    let n = law
        .atoms
        .values()
        .flatten()
        .map(|(_, f)| f.nrows())
        .next()
        .ok_or_else(|| Error::invalid("atoms", "no matrices given"))?;
    let basis = MultiIndexBasis::new(n, m)?;
    if m % 2 == 1 {
        let positive = law.atoms.values().flatten().all(|(_, f)| f.iter().all(|v| *v >= 0.0));
        if !positive {
            return Err(Error::AssumptionA1(format!("m = {m} is odd and some atoms are not nonnegative")));
        }
    }
    StabilityReport::schur(ReportClass::DiscreteSemiMarkov, block_matrix(law, &basis)?, None)
}

/// Per-observation generators `𝓑_j` of a periodically observed plant.
#[derive(Debug, Clone)]
pub struct PeriodicLift {
    states: usize,
    lifted_dim: usize,
    generators: Vec<DMatrix<f64>>,
}

impl PeriodicLift {
    pub fn new(model: &PeriodicObservation, m: usize) -> Result<Self> {
        if m % 2 == 1 {
            return Err(Error::AssumptionA1(format!(
                "periodic mode observation is characterized for even m only, got m = {m}"
            )));
        }
        let modes = model.closed_loop_modes()?;
        let basis = MultiIndexBasis::new(modes.n(), m)?;
        let lifted = lifted_generators(&modes, &basis)?;
        let big_n = model.states();
        let generators = (0..big_n)
            .map(|j| {
                let column: Vec<&DMatrix<f64>> = (0..big_n).map(|i| &lifted[model.pair_index(i, j)]).collect();
                generator_block_matrix(model.generator().matrix(), &column)
            })
            .collect();
        Ok(PeriodicLift { states: big_n, lifted_dim: basis.len(), generators })
    }

    /// `𝓑_j = Qᵀ ⊗ I + ⊕ᵢ (A_(i,j))_[m]`.
    pub fn generator(&self, j: usize) -> &DMatrix<f64> {
        &self.generators[j]
    }

    /// `𝒜_h = Σ_j exp(𝓑_j h) (e_j e_jᵀ ⊗ I)`: block column j of `exp(𝓑_j h)`.
    pub fn sampled_matrix(&self, h: f64) -> Result<DMatrix<f64>> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::invalid("h", format!("sampling period {h} must be positive")));
        }
        let nm = self.lifted_dim;
        let dim = self.states * nm;
        let mut out = DMatrix::zeros(dim, dim);
        for (j, b) in self.generators.iter().enumerate() {
            let e = expm(&(b * h))?;
            out.columns_mut(j * nm, nm).copy_from(&e.columns(j * nm, nm));
        }
        Ok(out)
    }

    pub fn report(&self, h: f64) -> Result<StabilityReport> {
        StabilityReport::schur(ReportClass::Periodic, self.sampled_matrix(h)?, Some(h))
    }
}

/// Schur test of `𝒜_h` at the model's own sampling period.
pub fn periodic_observation_matrix(model: &PeriodicObservation, m: usize) -> Result<StabilityReport> {
    PeriodicLift::new(model, m)?.report(model.h())
}

/// Hurwitz test of the same plant under continuous mode observation.
pub fn continuous_observation_matrix(model: &PeriodicObservation, m: usize) -> Result<StabilityReport> {
    let modes = model.continuous_observation_modes()?;
    mjls_matrix(model.generator(), &modes, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub h: f64,
    pub rho: f64,
    pub growth_rate: f64,
}

/// Evaluates `ρ(𝒜_h)` and `h⁻¹ ln ρ(𝒜_h)` over a grid, in grid order.
pub fn sweep_growth_rate(model: &PeriodicObservation, m: usize, h_grid: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(h) = h_grid.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
        return Err(Error::invalid("h_grid", format!("sampling period {h} must be positive")));
    }
    let lift = PeriodicLift::new(model, m)?;
    h_grid
        .par_iter()
        .map(|&h| {
            let rho = spectral_summary(&lift.sampled_matrix(h)?)?.spectral_radius;
            Ok(SweepRow { h, rho, growth_rate: rho.ln() / h })
        })
        .collect()
}

/// First adjacent pair of grid points between which `ρ` crosses one.
pub fn crossing_bracket(rows: &[SweepRow]) -> Option<(f64, f64)> {
    rows.windows(2).find(|w| (w[0].rho < 1.0) != (w[1].rho < 1.0)).map(|w| (w[0].h, w[1].h))
}

/// `h,rho,growth_rate` with shortest round-trip decimal formatting.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    out.write_all(b"h,rho,growth_rate\n")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.h, r.rho, r.growth_rate)?;
    }
    Ok(())
}

/// Dispatches to the construction matching the model's class.
pub fn analyze(model: &SwitchedSystemModel) -> Result<StabilityReport> {
    let m = model.m();
    let mut report = match model.class() {
        SystemClass::Mjls { generator } => mjls_matrix(generator, model.modes(), m)?,
        SystemClass::SemiMarkov { kernel, mode_of_state } => {
            semimarkov_matrix(kernel, model.modes(), mode_of_state, m)?
        }
        SystemClass::Regenerative { cycles } => regenerative_matrix(cycles, model.modes(), m)?,
        SystemClass::PeriodicObservation(p) => periodic_observation_matrix(p, m)?,
    };
    report.assumptions = Some(*model.assumptions());
    Ok(report)
}
