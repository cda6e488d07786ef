//! The two portfolio problems with closed-form candidates: a power-utility
//! (risk-sensitive) investor and a quadratic-loss hedger with jumps.
//!
//! Each model provides its simulator coefficients, objective, closed-form
//! control and adjoint field. The adjoints depend on regime functionals
//! `φ(t, i, y)` (and `ψ` for the hedger) estimated by Monte Carlo over regime
//! paths and stored on a grid.

mod functional;
mod quadratic;
mod risk_sensitive;

pub use functional::{write_functionals_csv, FunctionalGrid, RegimeFunctional};
pub use quadratic::{
    ql_adjoint, ql_lambda_factors, ql_optimal_control, ql_phi_psi, FixedPointOptions, LambdaForm, QlAdjoint,
    QlFunctionals, QlPolicy, QuadraticLossModel,
};
pub use risk_sensitive::{
    rs_adjoint, rs_optimal_control, rs_phi, rs_phi_functional, PhiVariant, RegimeJumpForm, RiskSensitiveModel,
    RsAdjoint, RsPolicy,
};

use std::sync::Arc;

use nalgebra::DVector;

use crate::jump_diffusion::{ControlPolicy, ControlledDynamics, ObjectiveSpec, Scenario};
use crate::maximum_principle::AdjointField;
use crate::semi_markov::{RegimeModel, RegimeSampler, RegimeState};

#[derive(Debug, Clone)]
enum Kind {
    RiskSensitive(RiskSensitiveModel),
    QuadraticLoss(QuadraticLossModel, Arc<QlFunctionals>),
}

/// A control problem packaged for the verification harness: coefficients,
/// objective, closed-form candidate, its adjoint and the Monte Carlo setup.
#[derive(Clone)]
pub struct ExampleProblem {
    pub name: String,
    pub dynamics: Arc<dyn ControlledDynamics>,
    pub objective: ObjectiveSpec,
    pub adjoint: Arc<dyn AdjointField>,
    pub scenario: Scenario,
    /// Whether the concavity hypotheses of the sufficiency theorem hold.
    pub within_hypotheses: bool,
    /// Wealth interval on which the payoff is probed for concavity.
    pub concavity_box: (f64, f64),
    kind: Kind,
}

impl std::fmt::Debug for ExampleProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExampleProblem")
            .field("name", &self.name)
            .field("scenario", &self.scenario)
            .field("within_hypotheses", &self.within_hypotheses)
            .finish_non_exhaustive()
    }
}

impl ExampleProblem {
    pub fn risk_sensitive(
        model: RiskSensitiveModel,
        regime: RegimeModel,
        sampler: RegimeSampler,
        x0: f64,
        dt: f64,
        phi: Arc<RegimeFunctional>,
    ) -> Self {
        let scenario = Scenario {
            regime,
            sampler,
            origin: RegimeState::new(0, 0.0),
            x0: DVector::from_element(1, x0),
            horizon: model.horizon(),
            dt,
        };
        Self {
            name: "risk-sensitive".into(),
            dynamics: Arc::new(model.dynamics()),
            objective: model.objective(),
            adjoint: Arc::new(RsAdjoint::new(model.clone(), phi)),
            scenario,
            within_hypotheses: model.within_sufficiency_hypotheses(),
            concavity_box: (0.05, 5.0),
            kind: Kind::RiskSensitive(model),
        }
    }

    pub fn quadratic_loss(
        model: QuadraticLossModel,
        regime: RegimeModel,
        sampler: RegimeSampler,
        x0: f64,
        dt: f64,
        functionals: Arc<QlFunctionals>,
    ) -> Self {
        let scenario = Scenario {
            regime,
            sampler,
            origin: RegimeState::new(0, 0.0),
            x0: DVector::from_element(1, x0),
            horizon: model.horizon(),
            dt,
        };
        Self {
            name: "quadratic-loss".into(),
            dynamics: Arc::new(model.dynamics()),
            objective: model.objective(),
            adjoint: Arc::new(QlAdjoint {
                model: model.clone(),
                functionals: functionals.clone(),
            }),
            scenario,
            within_hypotheses: true,
            concavity_box: (-5.0, 5.0),
            kind: Kind::QuadraticLoss(model, functionals),
        }
    }

    /// Re-estimate the candidate's `φ` with another regime sampler (the
    /// hedger's fixed point is re-run in full).
    pub fn phi_functional(
        &self,
        sampler: RegimeSampler,
        grid: &FunctionalGrid,
        n_paths: usize,
        seed: u64,
    ) -> crate::error::Result<RegimeFunctional> {
        let regime = &self.scenario.regime;
        match &self.kind {
            Kind::RiskSensitive(m) => rs_phi_functional(m, regime, sampler, grid, n_paths, seed, PhiVariant::Integral),
            Kind::QuadraticLoss(m, _) => {
                Ok(ql_phi_psi(m, regime, sampler, grid, n_paths, seed, &FixedPointOptions::default())?.phi)
            }
        }
    }

    /// Whether the payoff is only defined for positive wealth, so that
    /// competitors must keep wealth positive.
    pub fn requires_positive_wealth(&self) -> bool {
        matches!(self.kind, Kind::RiskSensitive(_))
    }

    /// The closed-form control.
    pub fn candidate(&self) -> Arc<dyn ControlPolicy> {
        self.scaled_candidate(1.0)
    }

    /// The closed-form control multiplied by `factor`.
    pub fn scaled_candidate(&self, factor: f64) -> Arc<dyn ControlPolicy> {
        match &self.kind {
            Kind::RiskSensitive(m) => Arc::new(m.policy(factor)),
            Kind::QuadraticLoss(m, f) => Arc::new(QlPolicy::new(m.clone(), f.clone(), factor)),
        }
    }
}
