//! The controlled state process
//!
//! ```text
//! dX = b(t, X, u, θ) dt + σ(t, X, u, θ) dW + ∫ g(t, X, u, θ, γ) N(dt, dγ)
//! ```
//!
//! with `N` a Poisson random measure of intensity `λ π(dγ) dt` and `θ` the
//! semi-Markov regime. Paths are simulated by Euler–Maruyama on a grid that
//! contains every regime switch and every asset jump exactly.

mod marks;
mod noise;
mod objective;
mod policy;
mod probe;
mod simulate;

pub use marks::{MarkDist, MarkMeasure};
pub use noise::{AssetJump, PathNoise};
pub use objective::{estimate_objective, objective_samples, path_objective, ObjectiveSpec};
pub(crate) use objective::central_gradient;
pub use policy::{ConstantPolicy, ControlPolicy, ControlSet, FnPolicy};
pub use probe::{coefficient_regularity_probe, ProbeDomain, RegularityReport};
pub use simulate::{
    simulate_controlled_path, simulate_with_noise, NodeEvent, SamplePath, TruncatedPath,
};

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::semi_markov::{RegimeModel, RegimeSampler, RegimeState};

/// Everything a Monte Carlo run needs besides the coefficients and the
/// policy: regime law, sampler, initial data and discretisation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub regime: RegimeModel,
    pub sampler: RegimeSampler,
    pub origin: RegimeState,
    pub x0: DVector<f64>,
    pub horizon: f64,
    pub dt: f64,
}

impl Scenario {
    /// Noise of path `index` under `seed`.
    pub fn noise(&self, marks: &MarkMeasure, brownian_dim: usize, seed: u64, index: usize) -> Result<PathNoise> {
        PathNoise::generate(
            &self.regime,
            self.sampler,
            self.origin,
            marks,
            brownian_dim,
            self.horizon,
            self.dt,
            seed,
            index,
        )
    }

    /// Path `index` under `policy`.
    pub fn simulate(
        &self,
        dynamics: &dyn ControlledDynamics,
        policy: &dyn ControlPolicy,
        seed: u64,
        index: usize,
    ) -> Result<SamplePath> {
        let noise = self.noise(dynamics.marks(), dynamics.dim(), seed, index)?;
        Ok(simulate_with_noise(dynamics, policy, &noise, &self.x0)?)
    }

    /// Noises `0..n` under `seed`.
    pub fn noises(&self, marks: &MarkMeasure, brownian_dim: usize, seed: u64, n: usize) -> Result<Vec<PathNoise>> {
        PathNoise::ensemble(
            &self.regime,
            self.sampler,
            self.origin,
            marks,
            brownian_dim,
            self.horizon,
            self.dt,
            seed,
            n,
        )
    }
}

/// Coefficients `b`, `σ`, `g` and the jump measure `(λ, π)`.
///
/// `σ` is `r × r` and driven by an `r`-dimensional Brownian motion. The
/// optional derivative hooks let callers supply exact x-derivatives; when they
/// return `None` central differences are used instead.
pub trait ControlledDynamics: Send + Sync {
    fn dim(&self) -> usize;

    fn control_dim(&self) -> usize {
        self.dim()
    }

    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, regime: usize) -> DVector<f64>;

    fn vol(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, regime: usize) -> DMatrix<f64>;

    fn jump(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, regime: usize, mark: f64)
        -> DVector<f64>;

    fn marks(&self) -> &MarkMeasure;

    /// `∂b_k/∂x_l` as an `r × r` matrix indexed `(k, l)`.
    fn drift_jacobian(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _regime: usize,
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// `∂σ/∂x_l` for `l = 0..r`.
    fn vol_derivatives(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _regime: usize,
    ) -> Option<Vec<DMatrix<f64>>> {
        None
    }

    /// `∂g_k/∂x_l` at one mark.
    fn jump_jacobian(
        &self,
        _t: f64,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _regime: usize,
        _mark: f64,
    ) -> Option<DMatrix<f64>> {
        None
    }
}

type Coef = Arc<dyn Fn(f64, f64, f64, usize) -> f64 + Send + Sync>;
type JumpCoef = Arc<dyn Fn(f64, f64, f64, usize, f64) -> f64 + Send + Sync>;

/// One-dimensional state and control with coefficients given as closures
/// `(t, x, u, i) ↦ value`. Unset coefficients are zero.
#[derive(Clone)]
pub struct ScalarDynamics {
    drift: Coef,
    vol: Coef,
    jump: JumpCoef,
    marks: MarkMeasure,
    drift_dx: Option<Coef>,
    vol_dx: Option<Coef>,
    jump_dx: Option<JumpCoef>,
}

impl fmt::Debug for ScalarDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarDynamics")
            .field("marks", &self.marks)
            .field("analytic_dx", &self.drift_dx.is_some())
            .finish_non_exhaustive()
    }
}

impl ScalarDynamics {
    /// `b = σ = g = 0` with the given jump measure.
    pub fn frozen(marks: MarkMeasure) -> Self {
        Self {
            drift: Arc::new(|_, _, _, _| 0.0),
            vol: Arc::new(|_, _, _, _| 0.0),
            jump: Arc::new(|_, _, _, _, _| 0.0),
            marks,
            drift_dx: None,
            vol_dx: None,
            jump_dx: None,
        }
    }

    pub fn with_drift(mut self, f: impl Fn(f64, f64, f64, usize) -> f64 + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_vol(mut self, f: impl Fn(f64, f64, f64, usize) -> f64 + Send + Sync + 'static) -> Self {
        self.vol = Arc::new(f);
        self
    }

    pub fn with_jump(
        mut self,
        f: impl Fn(f64, f64, f64, usize, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.jump = Arc::new(f);
        self
    }

    /// Supply `∂b/∂x`, `∂σ/∂x` and `∂g/∂x` in closed form.
    pub fn with_x_derivatives(
        mut self,
        drift_dx: impl Fn(f64, f64, f64, usize) -> f64 + Send + Sync + 'static,
        vol_dx: impl Fn(f64, f64, f64, usize) -> f64 + Send + Sync + 'static,
        jump_dx: impl Fn(f64, f64, f64, usize, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.drift_dx = Some(Arc::new(drift_dx));
        self.vol_dx = Some(Arc::new(vol_dx));
        self.jump_dx = Some(Arc::new(jump_dx));
        self
    }
}

fn scalar(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

impl ControlledDynamics for ScalarDynamics {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize) -> DVector<f64> {
        scalar((self.drift)(t, x[0], u[0], i))
    }

    fn vol(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, (self.vol)(t, x[0], u[0], i))
    }

    fn jump(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize, mark: f64) -> DVector<f64> {
        scalar((self.jump)(t, x[0], u[0], i, mark))
    }

    fn marks(&self) -> &MarkMeasure {
        &self.marks
    }

    fn drift_jacobian(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize) -> Option<DMatrix<f64>> {
        self.drift_dx
            .as_ref()
            .map(|f| DMatrix::from_element(1, 1, f(t, x[0], u[0], i)))
    }

    fn vol_derivatives(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        i: usize,
    ) -> Option<Vec<DMatrix<f64>>> {
        self.vol_dx
            .as_ref()
            .map(|f| vec![DMatrix::from_element(1, 1, f(t, x[0], u[0], i))])
    }

    fn jump_jacobian(
        &self,
        t: f64,
        x: &DVector<f64>,
        u: &DVector<f64>,
        i: usize,
        mark: f64,
    ) -> Option<DMatrix<f64>> {
        self.jump_dx
            .as_ref()
            .map(|f| DMatrix::from_element(1, 1, f(t, x[0], u[0], i, mark)))
    }
}
