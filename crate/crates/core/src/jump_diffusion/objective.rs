use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;

use super::simulate::{run_steps, NodeState, StepSink};
use super::{ControlPolicy, ControlledDynamics, PathNoise, Scenario};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamRng};
use crate::stats::Estimate;

type Running = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>, usize, f64) -> f64 + Send + Sync>;
type Terminal = Arc<dyn Fn(&DVector<f64>, usize, f64) -> f64 + Send + Sync>;
type RunningGrad =
    Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>, usize, f64) -> DVector<f64> + Send + Sync>;
type TerminalGrad = Arc<dyn Fn(&DVector<f64>, usize, f64) -> DVector<f64> + Send + Sync>;

/// Relative step of the central differences used when no analytic gradient
/// is supplied: `h = FD_STEP · (1 + |x_l|)`.
pub(crate) const FD_STEP: f64 = 1e-5;

/// Performance criterion `J = E[∫ f₁(t, X, u, θ, Y) dt + f₂(X_T, θ_T, Y_T)]`.
#[derive(Clone)]
pub struct ObjectiveSpec {
    running: Option<Running>,
    terminal: Terminal,
    running_grad: Option<RunningGrad>,
    terminal_grad: Option<TerminalGrad>,
}

impl fmt::Debug for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectiveSpec")
            .field("has_running", &self.running.is_some())
            .field("analytic_terminal_grad", &self.terminal_grad.is_some())
            .finish()
    }
}

pub(crate) fn central_gradient(x: &DVector<f64>, f: impl Fn(&DVector<f64>) -> f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for l in 0..x.len() {
        let h = FD_STEP * (1.0 + x[l].abs());
        xp[l] = x[l] + h;
        let up = f(&xp);
        xp[l] = x[l] - h;
        let dn = f(&xp);
        xp[l] = x[l];
        g[l] = (up - dn) / (2.0 * h);
    }
    g
}

impl ObjectiveSpec {
    pub fn new(
        running: impl Fn(f64, &DVector<f64>, &DVector<f64>, usize, f64) -> f64 + Send + Sync + 'static,
        terminal: impl Fn(&DVector<f64>, usize, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            running: Some(Arc::new(running)),
            terminal: Arc::new(terminal),
            running_grad: None,
            terminal_grad: None,
        }
    }

    /// `f₁ ≡ 0`.
    pub fn terminal_only(terminal: impl Fn(&DVector<f64>, usize, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            running: None,
            terminal: Arc::new(terminal),
            running_grad: None,
            terminal_grad: None,
        }
    }

    pub fn with_terminal_gradient(
        mut self,
        grad: impl Fn(&DVector<f64>, usize, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.terminal_grad = Some(Arc::new(grad));
        self
    }

    pub fn with_running_gradient(
        mut self,
        grad: impl Fn(f64, &DVector<f64>, &DVector<f64>, usize, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.running_grad = Some(Arc::new(grad));
        self
    }

    pub fn has_running(&self) -> bool {
        self.running.is_some()
    }

    pub fn running(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize, y: f64) -> f64 {
        self.running.as_ref().map_or(0.0, |f| f(t, x, u, i, y))
    }

    pub fn terminal(&self, x: &DVector<f64>, i: usize, y: f64) -> f64 {
        (self.terminal)(x, i, y)
    }

    /// `∇ₓ f₁`, analytic if supplied.
    pub fn running_gradient(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize, y: f64) -> DVector<f64> {
        match (&self.running_grad, &self.running) {
            (Some(g), _) => g(t, x, u, i, y),
            (None, Some(f)) => central_gradient(x, |z| f(t, z, u, i, y)),
            (None, None) => DVector::zeros(x.len()),
        }
    }

    /// `∇ₓ f₂`, analytic if supplied.
    pub fn terminal_gradient(&self, x: &DVector<f64>, i: usize, y: f64) -> DVector<f64> {
        match &self.terminal_grad {
            Some(g) => g(x, i, y),
            None => central_gradient(x, |z| (self.terminal)(z, i, y)),
        }
    }

    /// Random midpoint test of concavity of `f₂(·, i, y)` on the box
    /// `[lo, hi]`: `f₂((a+b)/2) ≥ (f₂(a)+f₂(b))/2 − tol` for `n` pairs per
    /// regime and age.
    pub fn terminal_concavity_probe(
        &self,
        lo: &[f64],
        hi: &[f64],
        regimes: usize,
        ages: &[f64],
        n: usize,
        seed: u64,
    ) -> bool {
        let mut rng = StreamRng::new(seed, Purpose::Probe, 0);
        let draw = |rng: &mut StreamRng| {
            DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(l, h)| l + (h - l) * rng.uniform()))
        };
        for i in 0..regimes {
            for &y in ages {
                for _ in 0..n {
                    let a = draw(&mut rng);
                    let b = draw(&mut rng);
                    let mid = (&a + &b) * 0.5;
                    let fa = self.terminal(&a, i, y);
                    let fb = self.terminal(&b, i, y);
                    let fm = self.terminal(&mid, i, y);
                    let tol = 1e-10 * (1.0 + fa.abs().max(fb.abs()));
                    if !(fm >= 0.5 * (fa + fb) - tol) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Accumulates `∫ f₁ dt` by the trapezoidal rule (left limits at the right
/// end of each step) and `f₂` at the last node.
struct ObjectiveSink<'a> {
    objective: &'a ObjectiveSpec,
    prev: f64,
    integral: f64,
    last: (f64, usize, f64),
    x_last: Option<DVector<f64>>,
}

impl StepSink for ObjectiveSink<'_> {
    fn start(&mut self, n: &NodeState<'_>) {
        self.prev = self.objective.running(n.t, n.x, n.u, n.theta, n.age);
        self.last = (n.t, n.theta, n.age);
    }

    fn step(
        &mut self,
        _k: usize,
        left: &NodeState<'_>,
        next: &NodeState<'_>,
        regime: Option<(usize, usize)>,
        mark: Option<f64>,
    ) {
        let dt = left.t - self.last.0;
        if self.objective.has_running() {
            let f_left = self.objective.running(left.t, left.x, left.u, left.theta, left.age);
            self.integral += 0.5 * (self.prev + f_left) * dt;
            self.prev = if regime.is_some() || mark.is_some() {
                self.objective.running(next.t, next.x, next.u, next.theta, next.age)
            } else {
                f_left
            };
        }
        self.last = (next.t, next.theta, next.age);
        // only the final state is kept
        match &mut self.x_last {
            Some(x) => x.copy_from(next.x),
            None => self.x_last = Some(next.x.clone()),
        }
    }
}

/// Objective value of one path driven by `noise`.
pub fn path_objective(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    objective: &ObjectiveSpec,
    noise: &PathNoise,
    x0: &DVector<f64>,
) -> Result<f64> {
    let mut sink = ObjectiveSink {
        objective,
        prev: 0.0,
        integral: 0.0,
        last: (0.0, 0, 0.0),
        x_last: None,
    };
    run_steps(dynamics, policy, noise, x0, &mut sink)?;
    let x_t = sink.x_last.unwrap_or_else(|| x0.clone());
    let (_, theta, age) = sink.last;
    let value = sink.integral + objective.terminal(&x_t, theta, age);
    if !value.is_finite() {
        return Err(Error::NonFinitePath {
            path: Some(noise.index()),
            time: noise.horizon(),
            detail: format!("objective value {value}"),
        });
    }
    Ok(value)
}

/// Per-path objective values over pre-generated noises, in noise order.
pub fn objective_samples(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    objective: &ObjectiveSpec,
    noises: &[PathNoise],
    x0: &DVector<f64>,
) -> Result<Vec<f64>> {
    noises
        .par_iter()
        .map(|n| path_objective(dynamics, policy, objective, n, x0))
        .collect()
}

/// Monte Carlo estimate of `J` with its standard error. Path `k` uses the
/// noise of index `k` under `seed`.
pub fn estimate_objective(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    objective: &ObjectiveSpec,
    scenario: &Scenario,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 paths, got {n_paths}")));
    }
    let values: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let noise = scenario.noise(dynamics.marks(), dynamics.dim(), seed, k)?;
            path_objective(dynamics, policy, objective, &noise, &scenario.x0)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump_diffusion::{FnPolicy, MarkMeasure, ScalarDynamics};
    use crate::semi_markov::{RegimeModel, RegimeSampler, RegimeState};

    fn scenario(dt: f64) -> Scenario {
        Scenario {
            regime: RegimeModel::single_state(),
            sampler: RegimeSampler::Direct,
            origin: RegimeState::new(0, 0.0),
            x0: DVector::from_element(1, 1.0),
            horizon: 1.0,
            dt,
        }
    }

    fn zero() -> FnPolicy<impl Fn(f64, &DVector<f64>, usize, f64) -> DVector<f64>> {
        FnPolicy::new(|_, _: &DVector<f64>, _, _| DVector::zeros(1))
    }

    #[test]
    fn unit_running_cost_integrates_to_horizon() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::none()).with_vol(|_, x, _, _| 0.2 * x);
        let obj = ObjectiveSpec::new(|_, _, _, _, _| 1.0, |_, _, _| 0.0);
        let e = estimate_objective(&dynamics, &zero(), &obj, &scenario(1e-2), 50, 1).unwrap();
        assert!((e.mean - 1.0).abs() < 1e-14);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn deterministic_quadratic_terminal() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(|_, x, _, _| 0.05 * x);
        let obj = ObjectiveSpec::terminal_only(|x, _, _| -(x[0] - 1.0).powi(2));
        let e = estimate_objective(&dynamics, &zero(), &obj, &scenario(1e-3), 4, 1).unwrap();
        let exact = -(0.05f64.exp() - 1.0).powi(2);
        assert!((e.mean - exact).abs() < 1e-6, "{} vs {exact}", e.mean);
        assert!((exact + 2.6287e-3).abs() < 1e-7);
    }

    #[test]
    fn martingale_terminal_mean() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::none()).with_vol(|_, x, _, _| 0.2 * x);
        let obj = ObjectiveSpec::terminal_only(|x, _, _| x[0]);
        let e = estimate_objective(&dynamics, &zero(), &obj, &scenario(1e-2), 20_000, 3).unwrap();
        assert!((e.mean - 1.0).abs() < 3.0 * e.se, "{e:?}");
    }

    #[test]
    fn concavity_probe_separates_examples() {
        let concave = ObjectiveSpec::terminal_only(|x, _, _| -(x[0] - 1.0).powi(2));
        let convex = ObjectiveSpec::terminal_only(|x, _, _| x[0] * x[0]);
        assert!(concave.terminal_concavity_probe(&[-2.0], &[2.0], 2, &[0.0], 200, 1));
        assert!(!convex.terminal_concavity_probe(&[-2.0], &[2.0], 2, &[0.0], 200, 1));
    }

    #[test]
    fn fd_gradient_matches_analytic() {
        let obj = ObjectiveSpec::terminal_only(|x, _, _| x[0].powf(0.5) / 0.5);
        let x = DVector::from_element(1, 1.7);
        let g = obj.terminal_gradient(&x, 0, 0.0)[0];
        assert!((g - 1.7f64.powf(-0.5)).abs() < 1e-9);
    }
}
