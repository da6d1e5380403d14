//! Moment stability of linear systems switched by regenerative processes.
//!
//! The m-th moment of the state is propagated exactly by the induced
//! representation on symmetric tensors (the m-lift), which reduces stability
//! of Markov, semi-Markov, regenerative and periodically observed switching
//! to a spectral test on a finite block matrix.

mod error;
pub mod lift;
pub mod model;
pub mod montecarlo;
pub mod numeric;
pub mod stability;

pub use error::{Error, Result};
pub use lift::{
    induced_matrix, infinitesimal_lift, lift_vector, multi_index_basis, LiftKind, LiftedMatrix, MultiIndexBasis,
};
pub use model::{
    check_metzler, load_model, parse_model, HoldingDistribution, InfinitesimalGenerator, ModeSet, PeriodicObservation,
    Scenario, Segment, SemiMarkovKernel, SwitchedSystemModel, SystemClass,
};
pub use numeric::{expm, gauss_legendre, kron, spectral_abscissa, spectral_radius, spectral_summary, SpectralSummary};
pub use stability::{analyze, StabilityReport, Verdict};
