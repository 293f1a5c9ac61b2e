//! Monte Carlo estimation of the effective diffusivity of passive tracers in
//! time-dependent, divergence-free flows.
//!
//! The tracer obeys `dX = v(t, X) dt + Σ dW`. Trajectories are integrated
//! with structure-preserving splitting schemes (symplectic in 2D,
//! volume-preserving in any dimension) and the effective diffusivity is read
//! off the long-time growth of the displacement covariance,
//! `D_ij = E[Δ_i Δ_j] / (2t)`.

pub mod analysis;
pub mod config;
pub mod ensemble;
pub mod flows;
pub mod integrators;
pub mod oracles;
pub mod rng;
pub mod stats;

pub use analysis::{
    convergence_study, detect_plateau, effective_diffusivity, fit_loglog, sweep, ConvergenceStudy,
    DiffusivityReport, PlateauDetection, Reference, SlopeFit, SweepOptions, SweepParam, SweepTable,
};
pub use config::{
    ConfigFile, DiffusionSpec, FlowSpec, InitialDistribution, SampleSchedule, SimulationConfig,
};
pub use ensemble::{run_ensemble, run_particle, EnsembleStatistics, ExecOptions, RunError};
pub use flows::{FlowField, VelocityField};
pub use integrators::Scheme;
