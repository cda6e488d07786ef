//! Monte Carlo certificates for the sufficiency theorem and the link between
//! the adjoint and the value function.
//!
//! * [`sufficiency_experiment`] compares a closed-form control with a family
//!   of perturbations on shared noise.
//! * [`markov_reduction_experiment`] checks that semi-Markov machinery and a
//!   plain Markov-chain sampler agree when holding times are exponential.
//! * [`dp_connection_experiment`] and [`hjb_grid_check`] test adjoints and HJB
//!   residuals induced by a known value function.

mod dp;
mod reduction;
mod sufficiency;

pub use dp::{dp_connection_experiment, hjb_grid_check, DeterministicQuadratic, DpConnectionReport, HjbGridReport};
pub use reduction::{
    generator_age_spread, markov_reduction_experiment, MarkovReductionReport, PhiComparison, ReductionStatus,
};
pub use sufficiency::{
    first_order_check, sufficiency_experiment, Perturbation, PerturbationFamily, PerturbationKind, PerturbationRecord,
    SufficiencyOptions, SufficiencyReport,
};
