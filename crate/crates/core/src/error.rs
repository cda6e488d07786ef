use thiserror::Error;

/// Errors raised by the simulation and verification routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid regime model: {0}")]
    InvalidModel(String),

    #[error("hazard undefined for state {state} at age {age}: holding cdf has reached 1")]
    AgeBeyondSupport { state: usize, age: f64 },

    #[error("hazard is singular for state {state} at age {age}")]
    SingularHazard { state: usize, age: f64 },

    #[error("hazard {hazard} exceeds declared bound {bound} for state {state} at age {age}")]
    BoundViolation {
        state: usize,
        age: f64,
        hazard: f64,
        bound: f64,
    },

    #[error("non-finite state at t={time} (path {path:?}): {detail}")]
    NonFinitePath {
        path: Option<usize>,
        time: f64,
        detail: String,
    },

    #[error("Hamiltonian is unbounded in the control (slope {slope} on an unbounded control set)")]
    UnboundedHamiltonian { slope: f64 },

    #[error("degenerate volatility in regime {regime} at t={time}")]
    DegenerateVol { regime: usize, time: f64 },

    #[error("singular denominator Λ={value} at t={time}, regime {regime}")]
    SingularDenominator { value: f64, time: f64, regime: usize },

    #[error("singular φ={value} at t={time}, regime {regime}")]
    SingularPhi { value: f64, time: f64, regime: usize },

    #[error("fixed point diverged after {iterations} iterations (sup-norm trace {trace:?})")]
    FixedPointDiverged { iterations: usize, trace: Vec<f64> },

    #[error("admissibility failure for perturbation {id}: {reason}")]
    AdmissibilityFailure { id: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
