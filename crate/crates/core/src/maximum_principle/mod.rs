//! Hamiltonian, adjoint equation and value-function identities.
//!
//! With the uncompensated jump measure `N` of intensity `λ π(dγ) dt` used by
//! the simulator, the Hamiltonian is
//!
//! ```text
//! H = f₁ + (b + λ∫g dπ)'p + tr(σ'q) + λ∫g'η dπ
//! ```
//!
//! and the adjoint `(p, q, η, η̃)` solves
//!
//! ```text
//! dp = −∇ₓH dt + q dW + ∫η Ñ(dt, dγ) + Σ_j η̃_j Ñ₁(dt, j),   p(T) = ∇ₓf₂
//! ```
//!
//! where `Ñ₁` is the compensated regime-jump measure with intensity
//! `h_i(y) p_ij`.

mod hamiltonian;
mod residual;
mod value;

pub use hamiltonian::{
    argmax_hamiltonian, grad_x_hamiltonian, hamiltonian, maximize, u_slope, Argmax, ArgmaxMode,
};
pub use residual::{
    adjoint_residual, adjoint_residual_order, adjoint_residual_path, integrability_report,
    ConditionRecord, IntegrabilityReport, PathResidual, ResidualOrder, ResidualReport,
};
pub use value::{
    adjoint_from_value, controlled_generator, dynkin_check, generator_g, hjb_residual, DerivativeMode,
    DynkinReport, FdSteps, FnValue, HjbResidual, ValueAdjoint, ValueFunction,
};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

pub type EtaFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

/// Adjoint variables at one point.
///
/// `eta` is the asset-jump adjoint as a function of the mark; `None` means
/// zero. `eta_tilde[j]` is the regime-jump adjoint for a switch into `j`
/// (entries for impossible targets are ignored).
#[derive(Clone)]
pub struct AdjointState {
    pub p: DVector<f64>,
    pub q: DMatrix<f64>,
    pub eta: Option<EtaFn>,
    pub eta_tilde: Vec<DVector<f64>>,
}

impl fmt::Debug for AdjointState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdjointState")
            .field("p", &self.p.as_slice())
            .field("q", &self.q.as_slice())
            .field("eta", &self.eta.is_some())
            .field("eta_tilde", &self.eta_tilde.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>())
            .finish()
    }
}

impl AdjointState {
    /// `p = q = η = η̃ = 0`.
    pub fn zero(dim: usize, regimes: usize) -> Self {
        Self {
            p: DVector::zeros(dim),
            q: DMatrix::zeros(dim, dim),
            eta: None,
            eta_tilde: vec![DVector::zeros(dim); regimes],
        }
    }

    /// Only `p` and `q`.
    pub fn diffusive(p: DVector<f64>, q: DMatrix<f64>, regimes: usize) -> Self {
        let r = p.len();
        Self {
            p,
            q,
            eta: None,
            eta_tilde: vec![DVector::zeros(r); regimes],
        }
    }

    pub fn eta_at(&self, mark: f64) -> DVector<f64> {
        match &self.eta {
            Some(f) => f(mark),
            None => DVector::zeros(self.p.len()),
        }
    }

    pub fn eta_tilde_at(&self, j: usize) -> DVector<f64> {
        self.eta_tilde.get(j).cloned().unwrap_or_else(|| DVector::zeros(self.p.len()))
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|v| v.is_finite())
            && self.eta_tilde.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }
}

/// Adjoint as a feedback field on `(t, x, u, i, y)`.
pub trait AdjointField: Send + Sync {
    fn adjoint(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, regime: usize, age: f64) -> Result<AdjointState>;
}

impl<F> AdjointField for F
where
    F: Fn(f64, &DVector<f64>, &DVector<f64>, usize, f64) -> Result<AdjointState> + Send + Sync,
{
    fn adjoint(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, regime: usize, age: f64) -> Result<AdjointState> {
        self(t, x, u, regime, age)
    }
}
