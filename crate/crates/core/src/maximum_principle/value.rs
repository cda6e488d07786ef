use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{maximize, AdjointField, AdjointState, ArgmaxMode};
use crate::error::{Error, Result};
use crate::jump_diffusion::{ControlPolicy, ControlSet, ControlledDynamics, ObjectiveSpec, SamplePath, Scenario};
use crate::semi_markov::RegimeModel;
use crate::stats::Estimate;

/// Relative finite-difference steps: `h = step · (1 + |arg|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdSteps {
    pub first: f64,
    pub second: f64,
}

impl Default for FdSteps {
    fn default() -> Self {
        Self { first: 1e-5, second: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeMode {
    Analytic,
    FiniteDifference,
    Mixed,
}

/// A candidate value function `V(t, x, i, y)`.
///
/// Derivatives that return `None` are replaced by central differences with
/// the steps of [`ValueFunction::fd_steps`].
pub trait ValueFunction: Send + Sync {
    fn value(&self, t: f64, x: &DVector<f64>, regime: usize, age: f64) -> f64;

    fn time_derivative(&self, _t: f64, _x: &DVector<f64>, _regime: usize, _age: f64) -> Option<f64> {
        None
    }

    fn gradient(&self, _t: f64, _x: &DVector<f64>, _regime: usize, _age: f64) -> Option<DVector<f64>> {
        None
    }

    fn hessian(&self, _t: f64, _x: &DVector<f64>, _regime: usize, _age: f64) -> Option<DMatrix<f64>> {
        None
    }

    fn age_derivative(&self, _t: f64, _x: &DVector<f64>, _regime: usize, _age: f64) -> Option<f64> {
        None
    }

    fn fd_steps(&self) -> FdSteps {
        FdSteps::default()
    }

    fn derivative_mode(&self) -> DerivativeMode {
        DerivativeMode::FiniteDifference
    }
}

type Scalar = Arc<dyn Fn(f64, &DVector<f64>, usize, f64) -> f64 + Send + Sync>;
type Vector = Arc<dyn Fn(f64, &DVector<f64>, usize, f64) -> DVector<f64> + Send + Sync>;
type Matrix = Arc<dyn Fn(f64, &DVector<f64>, usize, f64) -> DMatrix<f64> + Send + Sync>;

/// [`ValueFunction`] built from closures.
#[derive(Clone)]
pub struct FnValue {
    value: Scalar,
    dt: Option<Scalar>,
    grad: Option<Vector>,
    hess: Option<Matrix>,
    dy: Option<Scalar>,
    steps: FdSteps,
}

impl fmt::Debug for FnValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnValue")
            .field("mode", &self.derivative_mode())
            .field("steps", &self.steps)
            .finish()
    }
}

impl FnValue {
    pub fn new(value: impl Fn(f64, &DVector<f64>, usize, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            dt: None,
            grad: None,
            hess: None,
            dy: None,
            steps: FdSteps::default(),
        }
    }

    pub fn with_time_derivative(mut self, f: impl Fn(f64, &DVector<f64>, usize, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.dt = Some(Arc::new(f));
        self
    }

    pub fn with_gradient(
        mut self,
        f: impl Fn(f64, &DVector<f64>, usize, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.grad = Some(Arc::new(f));
        self
    }

    pub fn with_hessian(
        mut self,
        f: impl Fn(f64, &DVector<f64>, usize, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hess = Some(Arc::new(f));
        self
    }

    pub fn with_age_derivative(mut self, f: impl Fn(f64, &DVector<f64>, usize, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.dy = Some(Arc::new(f));
        self
    }

    pub fn with_fd_steps(mut self, steps: FdSteps) -> Self {
        self.steps = steps;
        self
    }
}

impl ValueFunction for FnValue {
    fn value(&self, t: f64, x: &DVector<f64>, i: usize, y: f64) -> f64 {
        (self.value)(t, x, i, y)
    }

    fn time_derivative(&self, t: f64, x: &DVector<f64>, i: usize, y: f64) -> Option<f64> {
        self.dt.as_ref().map(|f| f(t, x, i, y))
    }

    fn gradient(&self, t: f64, x: &DVector<f64>, i: usize, y: f64) -> Option<DVector<f64>> {
        self.grad.as_ref().map(|f| f(t, x, i, y))
    }

    fn hessian(&self, t: f64, x: &DVector<f64>, i: usize, y: f64) -> Option<DMatrix<f64>> {
        self.hess.as_ref().map(|f| f(t, x, i, y))
    }

    fn age_derivative(&self, t: f64, x: &DVector<f64>, i: usize, y: f64) -> Option<f64> {
        self.dy.as_ref().map(|f| f(t, x, i, y))
    }

    fn fd_steps(&self) -> FdSteps {
        self.steps
    }

    fn derivative_mode(&self) -> DerivativeMode {
        let set = [self.dt.is_some(), self.grad.is_some(), self.hess.is_some(), self.dy.is_some()];
        match set.iter().filter(|s| **s).count() {
            0 => DerivativeMode::FiniteDifference,
            4 => DerivativeMode::Analytic,
            _ => DerivativeMode::Mixed,
        }
    }
}

fn v_t(v: &dyn ValueFunction, t: f64, x: &DVector<f64>, i: usize, y: f64) -> f64 {
    v.time_derivative(t, x, i, y).unwrap_or_else(|| {
        let h = v.fd_steps().first * (1.0 + t.abs());
        (v.value(t + h, x, i, y) - v.value(t - h, x, i, y)) / (2.0 * h)
    })
}

fn v_y(v: &dyn ValueFunction, t: f64, x: &DVector<f64>, i: usize, y: f64) -> f64 {
    v.age_derivative(t, x, i, y).unwrap_or_else(|| {
        let h = v.fd_steps().first * (1.0 + y.abs());
        if y >= h {
            (v.value(t, x, i, y + h) - v.value(t, x, i, y - h)) / (2.0 * h)
        } else {
            // ages are non-negative
            let f0 = v.value(t, x, i, y);
            (4.0 * (v.value(t, x, i, y + h) - f0) - (v.value(t, x, i, y + 2.0 * h) - f0)) / (2.0 * h)
        }
    })
}

fn v_x(v: &dyn ValueFunction, t: f64, x: &DVector<f64>, i: usize, y: f64) -> DVector<f64> {
    v.gradient(t, x, i, y).unwrap_or_else(|| {
        let step = v.fd_steps().first;
        let mut g = DVector::zeros(x.len());
        let mut z = x.clone();
        for l in 0..x.len() {
            let h = step * (1.0 + x[l].abs());
            z[l] = x[l] + h;
            let up = v.value(t, &z, i, y);
            z[l] = x[l] - h;
            let dn = v.value(t, &z, i, y);
            z[l] = x[l];
            g[l] = (up - dn) / (2.0 * h);
        }
        g
    })
}

fn v_xx(v: &dyn ValueFunction, t: f64, x: &DVector<f64>, i: usize, y: f64) -> DMatrix<f64> {
    v.hessian(t, x, i, y).unwrap_or_else(|| {
        let step = v.fd_steps().second;
        let r = x.len();
        let f0 = v.value(t, x, i, y);
        let h: Vec<f64> = x.iter().map(|xl| step * (1.0 + xl.abs())).collect();
        let mut m = DMatrix::zeros(r, r);
        let mut z = x.clone();
        for k in 0..r {
            z[k] = x[k] + h[k];
            let up = v.value(t, &z, i, y);
            z[k] = x[k] - h[k];
            let dn = v.value(t, &z, i, y);
            z[k] = x[k];
            m[(k, k)] = ((up - f0) + (dn - f0)) / (h[k] * h[k]);
            for l in 0..k {
                let mut f = |sk: f64, sl: f64| {
                    z[k] = x[k] + sk * h[k];
                    z[l] = x[l] + sl * h[l];
                    let val = v.value(t, &z, i, y);
                    z[k] = x[k];
                    z[l] = x[l];
                    val
                };
                let c = (f(1.0, 1.0) - f(1.0, -1.0) - f(-1.0, 1.0) + f(-1.0, -1.0)) / (4.0 * h[k] * h[l]);
                m[(k, l)] = c;
                m[(l, k)] = c;
            }
        }
        m
    })
}

/// The `u`-independent part of the generator: age drift plus regime
/// switches.
fn regime_part(v: &dyn ValueFunction, model: &RegimeModel, t: f64, x: &DVector<f64>, i: usize, y: f64) -> Result<f64> {
    let mut out = v_y(v, t, x, i, y);
    if model.can_jump(i) {
        let h = model.hazard_rate(i, y)?;
        if h > 0.0 {
            let here = v.value(t, x, i, y);
            for j in 0..model.num_states() {
                let pij = model.kernel(i, j);
                if pij > 0.0 {
                    out += h * pij * (v.value(t, x, j, 0.0) - here);
                }
            }
        }
    }
    Ok(out)
}

/// Drift, diffusion and asset-jump terms for a fixed control.
fn state_part(
    v: &dyn ValueFunction,
    dynamics: &dyn ControlledDynamics,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    i: usize,
    y: f64,
) -> f64 {
    let b = dynamics.drift(t, x, u, i);
    let s = dynamics.vol(t, x, u, i);
    let a = &s * s.transpose();
    let mut out = b.dot(&v_x(v, t, x, i, y)) + 0.5 * a.component_mul(&v_xx(v, t, x, i, y)).sum();
    let marks = dynamics.marks();
    if marks.has_jumps() {
        let here = v.value(t, x, i, y);
        out += marks.rate() * marks.integrate(|m| v.value(t, &(x + dynamics.jump(t, x, u, i, m)), i, y) - here);
    }
    out
}

/// `A^u V`: the generator without the `∂V/∂t` term.
#[allow(clippy::too_many_arguments)]
pub fn controlled_generator(
    v: &dyn ValueFunction,
    dynamics: &dyn ControlledDynamics,
    model: &RegimeModel,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    regime: usize,
    age: f64,
) -> Result<f64> {
    Ok(state_part(v, dynamics, t, x, u, regime, age) + regime_part(v, model, t, x, regime, age)?)
}

/// `G V(t, x, i, y)` under control `u`:
///
/// ```text
/// ∂V/∂t + b'∇V + ½ tr(σσ'∇²V) + ∂V/∂y + h_i(y) Σ_j p_ij [V(t,x,j,0) − V]
///       + λ∫[V(t, x + g, i, y) − V] dπ
/// ```
#[allow(clippy::too_many_arguments)]
pub fn generator_g(
    v: &dyn ValueFunction,
    dynamics: &dyn ControlledDynamics,
    model: &RegimeModel,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    regime: usize,
    age: f64,
) -> Result<f64> {
    Ok(v_t(v, t, x, regime, age) + controlled_generator(v, dynamics, model, t, x, u, regime, age)?)
}

/// Both sides of `E V(T, X_T, θ_T, Y_T) − V(0, x0, i0, y0) = E∫ G V dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynkinReport {
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// Per-path `lhs − rhs`; its SE is the combined one.
    pub gap: Estimate,
}

impl DynkinReport {
    pub fn passes(&self, k: f64) -> bool {
        self.gap.mean.abs() <= k * self.gap.se + 1e-12
    }
}

/// Monte Carlo Dynkin check of [`generator_g`] along paths under `policy`;
/// the time integral uses the trapezoidal rule with left limits at the
/// right end of each step.
pub fn dynkin_check(
    v: &dyn ValueFunction,
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    scenario: &Scenario,
    n_paths: usize,
    seed: u64,
) -> Result<DynkinReport> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 paths, got {n_paths}")));
    }
    let model = &scenario.regime;
    let rows: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let noise = scenario.noise(dynamics.marks(), dynamics.dim(), seed, k)?;
            let path = crate::jump_diffusion::simulate_with_noise(dynamics, policy, &noise, &scenario.x0)?;
            let gv = |t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize, y: f64| {
                generator_g(v, dynamics, model, t, x, u, i, y)
            };
            let mut integral = 0.0;
            let mut prev = gv(path.times[0], &path.x[0], &path.u[0], path.theta[0], path.age[0])?;
            for n in 1..path.len() {
                let dt = path.times[n] - path.times[n - 1];
                let l = path.left_limit(n);
                let left = gv(path.times[n], l.x, l.u, l.theta, l.age)?;
                integral += 0.5 * (prev + left) * dt;
                prev = if path.event_at(n).is_some() {
                    gv(path.times[n], &path.x[n], &path.u[n], path.theta[n], path.age[n])?
                } else {
                    left
                };
            }
            let last = path.len() - 1;
            let lhs = v.value(path.times[last], &path.x[last], path.theta[last], path.age[last])
                - v.value(path.times[0], &path.x[0], path.theta[0], path.age[0]);
            Ok((lhs, integral))
        })
        .collect::<Result<_>>()?;
    let lhs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let rhs: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let gap: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(DynkinReport {
        lhs: Estimate::from_samples(&lhs),
        rhs: Estimate::from_samples(&rhs),
        gap: Estimate::from_samples(&gap),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbResidual {
    /// `∂V/∂t + sup_u {f₁ + A^u V}`.
    pub residual: f64,
    /// `|V(T, x, i, y) − f₂(x, i, y)|`.
    pub terminal_gap: f64,
    pub u: Vec<f64>,
    pub entire_line: bool,
}

impl HjbResidual {
    pub fn worst(&self) -> f64 {
        self.residual.abs().max(self.terminal_gap)
    }
}

/// HJB residual of `V` at one point, with the supremum taken over `set`.
#[allow(clippy::too_many_arguments)]
pub fn hjb_residual(
    v: &dyn ValueFunction,
    objective: &ObjectiveSpec,
    dynamics: &dyn ControlledDynamics,
    model: &RegimeModel,
    horizon: f64,
    t: f64,
    x: &DVector<f64>,
    regime: usize,
    age: f64,
    set: &ControlSet,
    mode: ArgmaxMode,
) -> Result<HjbResidual> {
    let fixed = v_t(v, t, x, regime, age) + regime_part(v, model, t, x, regime, age)?;
    let h = |u: &DVector<f64>| objective.running(t, x, u, regime, age) + state_part(v, dynamics, t, x, u, regime, age);
    let best = maximize(&h, dynamics.control_dim(), set, mode)?;
    Ok(HjbResidual {
        residual: fixed + best.value,
        terminal_gap: (v.value(horizon, x, regime, age) - objective.terminal(x, regime, age)).abs(),
        u: best.u,
        entire_line: best.entire_line,
    })
}

/// How the asset-jump slot `η` is induced from `V`.
#[derive(Clone, Default)]
pub enum EtaSlot {
    /// `η(γ) = ∇V(t, x + g(γ), i, y) − ∇V(t, x, i, y)`.
    #[default]
    AssetJump,
    /// `η(γ) = ∇V(t, x, j(γ), y) − ∇V(t, x, i, y)` for a caller-supplied
    /// mark-to-regime map.
    RegimeIndexed(Arc<dyn Fn(f64) -> usize + Send + Sync>),
}

impl fmt::Debug for EtaSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AssetJump => f.write_str("AssetJump"),
            Self::RegimeIndexed(_) => f.write_str("RegimeIndexed"),
        }
    }
}

/// Adjoint induced by a value function:
///
/// ```text
/// p = ∇V,  q = ∇²V σ,  η(γ) per EtaSlot,  η̃_j = ∇V(t, x, j, 0) − ∇V(t, x, i, y)
/// ```
#[derive(Clone)]
pub struct ValueAdjoint {
    pub value: Arc<dyn ValueFunction>,
    pub dynamics: Arc<dyn ControlledDynamics>,
    pub model: RegimeModel,
    pub eta: EtaSlot,
}

impl fmt::Debug for ValueAdjoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ValueAdjoint").field("eta", &self.eta).finish_non_exhaustive()
    }
}

impl ValueAdjoint {
    pub fn new(value: Arc<dyn ValueFunction>, dynamics: Arc<dyn ControlledDynamics>, model: RegimeModel) -> Self {
        Self {
            value,
            dynamics,
            model,
            eta: EtaSlot::AssetJump,
        }
    }
}

impl AdjointField for ValueAdjoint {
    fn adjoint(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize, y: f64) -> Result<AdjointState> {
        let v = self.value.as_ref();
        let p = v_x(v, t, x, i, y);
        let sigma = self.dynamics.vol(t, x, u, i);
        let q = v_xx(v, t, x, i, y) * sigma;
        let m = self.model.num_states();
        let eta_tilde = (0..m)
            .map(|j| {
                if j != i && self.model.kernel(i, j) > 0.0 {
                    v_x(v, t, x, j, 0.0) - &p
                } else {
                    DVector::zeros(x.len())
                }
            })
            .collect();
        let eta: Option<super::EtaFn> = if !self.dynamics.marks().has_jumps() {
            None
        } else {
            let (value, dynamics) = (self.value.clone(), self.dynamics.clone());
            let (x, u, p0) = (x.clone(), u.clone(), p.clone());
            Some(match &self.eta {
                EtaSlot::AssetJump => Arc::new(move |g: f64| {
                    let moved = &x + dynamics.jump(t, &x, &u, i, g);
                    v_x(value.as_ref(), t, &moved, i, y) - &p0
                }),
                EtaSlot::RegimeIndexed(map) => {
                    let map = map.clone();
                    Arc::new(move |g: f64| v_x(value.as_ref(), t, &x, map(g), y) - &p0)
                }
            })
        };
        Ok(AdjointState { p, q, eta, eta_tilde })
    }
}

/// Adjoint induced by `V` at every node of `path` (right limits).
pub fn adjoint_from_value(adj: &ValueAdjoint, path: &SamplePath) -> Result<Vec<AdjointState>> {
    (0..path.len())
        .map(|k| adj.adjoint(path.times[k], &path.x[k], &path.u[k], path.theta[k], path.age[k]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump_diffusion::{MarkMeasure, ScalarDynamics};

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn generator_elementary_cases() {
        let model = RegimeModel::single_state();
        let zero = scalar(0.0);
        let constant = FnValue::new(|_, _, _, _| 4.2);
        let d = ScalarDynamics::frozen(MarkMeasure::point(2.0, 0.3).unwrap())
            .with_drift(|_, x, _, _| 0.3 * x)
            .with_vol(|_, _, _, _| 0.5)
            .with_jump(|_, x, _, _, g| g * x);
        assert_eq!(generator_g(&constant, &d, &model, 0.2, &scalar(1.1), &zero, 0, 0.0).unwrap(), 0.0);

        let lin = FnValue::new(|_, x, _, _| x[0]);
        let drift_only = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(|_, _, _, _| 0.7);
        let g = generator_g(&lin, &drift_only, &model, 0.0, &scalar(2.0), &zero, 0, 0.0).unwrap();
        assert!((g - 0.7).abs() < 1e-9);

        let sq = FnValue::new(|_, x, _, _| x[0] * x[0]);
        let vol_only = ScalarDynamics::frozen(MarkMeasure::none()).with_vol(|_, _, _, _| 0.4);
        let g = generator_g(&sq, &vol_only, &model, 0.0, &scalar(1.5), &zero, 0, 0.0).unwrap();
        assert!((g - 0.16).abs() < 1e-7, "{g}");
    }

    #[test]
    fn deterministic_value_hjb() {
        let (r, d, horizon) = (0.05, 1.0, 1.0);
        let v = FnValue::new(move |t, x, _, _| -(x[0] * (r * (horizon - t)).exp() - d).powi(2));
        let obj = ObjectiveSpec::terminal_only(move |x, _, _| -(x[0] - d).powi(2));
        let dyn_ = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(move |_, x, _, _| r * x);
        let model = RegimeModel::single_state();
        let forced = ControlSet::interval(0.0, 0.0);
        for &t in &[0.0, 0.5, 1.0] {
            for &x in &[0.5, 1.0, 2.0] {
                let h = hjb_residual(&v, &obj, &dyn_, &model, horizon, t, &scalar(x), 0, 0.0, &forced, ArgmaxMode::Strict)
                    .unwrap();
                assert!(h.residual.abs() < 1e-7 && h.terminal_gap == 0.0, "{h:?}");
            }
        }
    }

    #[test]
    fn value_independent_of_x_gives_zero_adjoint() {
        let v: Arc<dyn ValueFunction> = Arc::new(FnValue::new(|t, _, i, y| t + i as f64 + y));
        let d: Arc<dyn ControlledDynamics> = Arc::new(
            ScalarDynamics::frozen(MarkMeasure::point(1.0, 0.2).unwrap())
                .with_vol(|_, _, _, _| 0.3)
                .with_jump(|_, x, _, _, g| g * x),
        );
        let model = RegimeModel::two_state(
            crate::semi_markov::HoldingDist::Exponential { rate: 1.0 },
            crate::semi_markov::HoldingDist::Exponential { rate: 2.0 },
        )
        .unwrap();
        let a = ValueAdjoint::new(v, d, model).adjoint(0.3, &scalar(1.0), &scalar(0.0), 0, 0.1).unwrap();
        assert_eq!(a.p[0], 0.0);
        assert_eq!(a.q[(0, 0)], 0.0);
        assert_eq!(a.eta_at(0.2)[0], 0.0);
        assert!(a.eta_tilde.iter().all(|e| e[0] == 0.0));
    }
}
