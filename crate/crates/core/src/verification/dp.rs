use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::jump_diffusion::{ConstantPolicy, ControlPolicy, ControlSet, ControlledDynamics, MarkMeasure, ObjectiveSpec, ScalarDynamics, Scenario};
use crate::maximum_principle::{
    adjoint_from_value, adjoint_residual_order, hjb_residual, ArgmaxMode, FnValue, ValueAdjoint, ValueFunction,
};
use crate::semi_markov::RegimeModel;

/// `dX = rX dt` with `u ≡ 0` and payoff `−(X(T) − d)²`, whose value is
/// `V = −(x e^{r(T−t)} − d)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeterministicQuadratic {
    pub r: f64,
    pub d: f64,
    pub horizon: f64,
}

impl Default for DeterministicQuadratic {
    fn default() -> Self {
        Self {
            r: 0.05,
            d: 1.0,
            horizon: 1.0,
        }
    }
}

impl DeterministicQuadratic {
    pub fn dynamics(&self) -> ScalarDynamics {
        let r = self.r;
        ScalarDynamics::frozen(MarkMeasure::none())
            .with_drift(move |_, x, _, _| r * x)
            .with_x_derivatives(move |_, _, _, _| r, |_, _, _, _| 0.0, |_, _, _, _, _| 0.0)
    }

    pub fn objective(&self) -> ObjectiveSpec {
        let d = self.d;
        ObjectiveSpec::terminal_only(move |x, _, _| -(x[0] - d).powi(2))
            .with_terminal_gradient(move |x, _, _| DVector::from_element(1, -2.0 * (x[0] - d)))
    }

    /// The control set `{0}`.
    pub fn control_set(&self) -> ControlSet {
        ControlSet::interval(0.0, 0.0)
    }

    pub fn policy(&self) -> ConstantPolicy {
        ConstantPolicy(DVector::zeros(1))
    }

    /// The value function with the target moved to `d + shift`; `shift = 0`
    /// gives the exact value.
    pub fn value(&self, shift: f64) -> FnValue {
        let (r, horizon) = (self.r, self.horizon);
        let d = self.d + shift;
        let e = move |t: f64| (r * (horizon - t)).exp();
        FnValue::new(move |t, x, _, _| -(x[0] * e(t) - d).powi(2))
            .with_gradient(move |t, x, _, _| DVector::from_element(1, -2.0 * (x[0] * e(t) - d) * e(t)))
            .with_hessian(move |t, _, _, _| DMatrix::from_element(1, 1, -2.0 * e(t) * e(t)))
            .with_time_derivative(move |t, x, _, _| 2.0 * (x[0] * e(t) - d) * x[0] * r * e(t))
            .with_age_derivative(|_, _, _, _| 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbGridReport {
    pub points: usize,
    pub max_residual: f64,
    pub max_terminal_gap: f64,
}

impl HjbGridReport {
    pub fn worst(&self) -> f64 {
        self.max_residual.max(self.max_terminal_gap)
    }
}

/// HJB residual and terminal gap of `v` on the product grid `times × xs` in
/// one regime and age.
#[allow(clippy::too_many_arguments)]
pub fn hjb_grid_check(
    v: &dyn ValueFunction,
    objective: &ObjectiveSpec,
    dynamics: &dyn ControlledDynamics,
    model: &RegimeModel,
    horizon: f64,
    times: &[f64],
    xs: &[f64],
    regime: usize,
    age: f64,
    set: &ControlSet,
    mode: ArgmaxMode,
) -> Result<HjbGridReport> {
    let mut report = HjbGridReport {
        points: 0,
        max_residual: 0.0,
        max_terminal_gap: 0.0,
    };
    for &t in times {
        for &x in xs {
            let h = hjb_residual(v, objective, dynamics, model, horizon, t, &DVector::from_element(1, x), regime, age, set, mode)?;
            report.points += 1;
            report.max_residual = report.max_residual.max(h.residual.abs());
            report.max_terminal_gap = report.max_terminal_gap.max(h.terminal_gap);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConnectionReport {
    pub dts: Vec<f64>,
    pub mean_abs: Vec<f64>,
    pub ratios: Vec<f64>,
    pub terminal_mismatch: f64,
    /// Largest `|η̃|` along one path.
    pub eta_tilde_max: f64,
    /// The value function is a surrogate rather than exact.
    pub approximate: bool,
}

/// Build the adjoint from `value`, run the adjoint residual at `levels`
/// step sizes and report the order and the terminal mismatch.
#[allow(clippy::too_many_arguments)]
pub fn dp_connection_experiment(
    dynamics: Arc<dyn ControlledDynamics>,
    objective: &ObjectiveSpec,
    value: Arc<dyn ValueFunction>,
    policy: &dyn ControlPolicy,
    scenario: &Scenario,
    coarsest: f64,
    levels: usize,
    n_paths: usize,
    seed: u64,
    approximate: bool,
) -> Result<DpConnectionReport> {
    let adj = ValueAdjoint::new(value, dynamics.clone(), scenario.regime.clone());
    let order = adjoint_residual_order(dynamics.as_ref(), policy, objective, &adj, scenario, coarsest, levels, n_paths, seed)?;
    let path = Scenario {
        dt: coarsest,
        ..scenario.clone()
    }
    .simulate(dynamics.as_ref(), policy, seed, 0)?;
    let eta_tilde_max = adjoint_from_value(&adj, &path)?
        .iter()
        .flat_map(|a| a.eta_tilde.iter().flat_map(|v| v.iter().map(|c| c.abs())).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    Ok(DpConnectionReport {
        dts: order.levels.iter().map(|l| l.dt).collect(),
        mean_abs: order.levels.iter().map(|l| l.mean_abs.mean).collect(),
        terminal_mismatch: order.terminal_mismatch_max(),
        ratios: order.ratios,
        eta_tilde_max,
        approximate,
    })
}
