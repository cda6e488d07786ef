use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::functional::{estimate_functional, FunctionalGrid, Rate, Representation, RegimeFunctional};
use crate::error::{Error, Result};
use crate::jump_diffusion::{ControlPolicy, MarkDist, MarkMeasure, ObjectiveSpec, SamplePath, ScalarDynamics};
use crate::maximum_principle::{AdjointField, AdjointState};
use crate::quadrature::gl64;
use crate::semi_markov::{RegimeModel, RegimeSampler};

type JumpFn = Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>;

/// Which jump term enters the denominator `Λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaForm {
    /// `Λ = σ² + λ∫g² dπ`: the variance rate of wealth per unit of `u²`.
    /// With this form `û` zeroes the u-coefficient of the Hamiltonian.
    #[default]
    Consistent,
    /// `Λ = σ² + φ∫g² dπ`.
    AsPrinted,
}

/// Mean-variance hedger: wealth
/// `dX = (rX + u σ m̄ − u∫g dπ) dt + u σ dW + u ∫g Ñ(dt, dγ)`, payoff
/// `−(X(T) − d)²`. The jump coefficient `g(i, γ)` does not depend on wealth.
#[derive(Clone)]
pub struct QuadraticLossModel {
    r: Vec<f64>,
    mbar: Vec<f64>,
    sigma: Vec<f64>,
    jump: JumpFn,
    marks: MarkMeasure,
    target: f64,
    horizon: f64,
    lambda_form: LambdaForm,
    moments: Vec<(f64, f64)>,
}

impl fmt::Debug for QuadraticLossModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuadraticLossModel")
            .field("r", &self.r)
            .field("mbar", &self.mbar)
            .field("sigma", &self.sigma)
            .field("marks", &self.marks)
            .field("target", &self.target)
            .field("horizon", &self.horizon)
            .field("lambda_form", &self.lambda_form)
            .finish_non_exhaustive()
    }
}

/// Points of the mark support used for the construction checks.
fn support_points(marks: &MarkMeasure) -> Vec<f64> {
    match marks.dist() {
        MarkDist::Discrete { atoms, weights } => atoms
            .iter()
            .zip(weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(a, _)| *a)
            .collect(),
        MarkDist::Uniform { lo, hi } | MarkDist::Density { lo, hi, .. } => {
            let mut v: Vec<f64> = gl64().mapped(*lo, *hi).map(|(g, _)| g).collect();
            v.push(*lo);
            v.push(*hi);
            v
        }
    }
}

impl QuadraticLossModel {
    /// `jump(x, i, γ)` is the coefficient `g`; it is probed at several
    /// wealth levels and rejected if it varies with `x`, because the adjoint
    /// `p = φX + ψ` is only consistent for wealth-independent `g`.
    pub fn new(
        r: Vec<f64>,
        mbar: Vec<f64>,
        sigma: Vec<f64>,
        marks: MarkMeasure,
        jump: impl Fn(f64, usize, f64) -> f64 + Send + Sync + 'static,
        target: f64,
        horizon: f64,
    ) -> Result<Self> {
        let m = r.len();
        if m == 0 || mbar.len() != m || sigma.len() != m {
            return Err(Error::InvalidModel(format!(
                "r, mbar and sigma need one entry per regime, got {}, {}, {}",
                m,
                mbar.len(),
                sigma.len()
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) || !target.is_finite() {
            return Err(Error::InvalidModel(format!("need a finite target and T > 0, got d={target}, T={horizon}")));
        }
        for i in 0..m {
            if !(r[i].is_finite() && mbar[i].is_finite() && sigma[i].is_finite()) {
                return Err(Error::InvalidModel(format!("non-finite coefficient in regime {i}")));
            }
            if mbar[i] < 0.0 {
                return Err(Error::InvalidModel(format!("market price of risk must be >= 0 in regime {i}")));
            }
            if sigma[i] < 0.0 {
                return Err(Error::InvalidModel(format!("sigma must be >= 0 in regime {i}")));
            }
        }
        let points = support_points(&marks);
        for i in 0..m {
            for &gamma in &points {
                let base = jump(1.0, i, gamma);
                if !base.is_finite() {
                    return Err(Error::InvalidModel(format!("jump coefficient not finite at regime {i}, mark {gamma}")));
                }
                for &x in &[-3.0, -0.5, 0.0, 0.5, 2.0, 10.0] {
                    let v = jump(x, i, gamma);
                    if (v - base).abs() > 1e-12 * (1.0 + base.abs()) {
                        return Err(Error::InvalidModel(format!(
                            "jump coefficient depends on wealth (regime {i}, mark {gamma}: g(1)={base}, g({x})={v}); \
                             the linear adjoint p = phi X + psi only closes for wealth-independent g"
                        )));
                    }
                }
                if marks.has_jumps() && !(1.0 + base > 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "need 1 + g > 0 for positive wealth, regime {i} mark {gamma} gives g = {base}"
                    )));
                }
            }
        }
        let jump: JumpFn = Arc::new(move |i, gamma| jump(1.0, i, gamma));
        let moments = (0..m)
            .map(|i| {
                if marks.has_jumps() {
                    (marks.integrate(|g| jump(i, g)), marks.integrate(|g| jump(i, g).powi(2)))
                } else {
                    (0.0, 0.0)
                }
            })
            .collect();
        Ok(Self {
            r,
            mbar,
            sigma,
            jump,
            marks,
            target,
            horizon,
            lambda_form: LambdaForm::default(),
            moments,
        })
    }

    /// No asset jumps.
    pub fn diffusive(r: Vec<f64>, mbar: Vec<f64>, sigma: Vec<f64>, target: f64, horizon: f64) -> Result<Self> {
        Self::new(r, mbar, sigma, MarkMeasure::none(), |_, _, _| 0.0, target, horizon)
    }

    /// `g(i, γ) = scale_i · γ`.
    pub fn with_scaled_marks(
        r: Vec<f64>,
        mbar: Vec<f64>,
        sigma: Vec<f64>,
        marks: MarkMeasure,
        scale: Vec<f64>,
        target: f64,
        horizon: f64,
    ) -> Result<Self> {
        if scale.len() != r.len() {
            return Err(Error::InvalidModel(format!("{} jump scales for {} regimes", scale.len(), r.len())));
        }
        Self::new(r, mbar, sigma, marks, move |_, i, g| scale[i] * g, target, horizon)
    }

    pub fn with_lambda_form(mut self, form: LambdaForm) -> Self {
        self.lambda_form = form;
        self
    }

    pub fn lambda_form(&self) -> LambdaForm {
        self.lambda_form
    }

    pub fn regimes(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self, i: usize) -> f64 {
        self.r[i]
    }

    pub fn market_price(&self, i: usize) -> f64 {
        self.mbar[i]
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigma[i]
    }

    pub fn target(&self) -> f64 {
        self.target
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn marks(&self) -> &MarkMeasure {
        &self.marks
    }

    pub fn jump(&self, i: usize, gamma: f64) -> f64 {
        (self.jump)(i, gamma)
    }

    /// `(∫g dπ, ∫g² dπ)` in regime `i`.
    pub fn jump_moments(&self, i: usize) -> (f64, f64) {
        self.moments[i]
    }

    /// True when `Λ̃/Λ` does not involve `φ`, so `φ` and `ψ` decouple.
    pub fn phi_free(&self) -> bool {
        self.lambda_form == LambdaForm::Consistent || !self.marks.has_jumps()
    }

    /// Simulator coefficients for the uncompensated jump measure of rate
    /// `λ`: the drift absorbs the compensator `λ u ∫g dπ` on top of the
    /// model's own `−u∫g dπ`.
    pub fn dynamics(&self) -> ScalarDynamics {
        let lambda = self.marks.rate();
        let r = self.r.clone();
        let r2 = self.r.clone();
        let sigma = self.sigma.clone();
        let slope: Vec<f64> = (0..self.regimes())
            .map(|i| self.sigma[i] * self.mbar[i] - (1.0 + lambda) * self.moments[i].0)
            .collect();
        let jump = self.jump.clone();
        ScalarDynamics::frozen(self.marks.clone())
            .with_drift(move |_, x, u, i| r[i] * x + u * slope[i])
            .with_vol(move |_, _, u, i| u * sigma[i])
            .with_jump(move |_, _, u, i, g| u * jump(i, g))
            .with_x_derivatives(move |_, _, _, i| r2[i], |_, _, _, _| 0.0, |_, _, _, _, _| 0.0)
    }

    /// Terminal payoff `−(x − d)²`.
    pub fn objective(&self) -> ObjectiveSpec {
        let d = self.target;
        ObjectiveSpec::terminal_only(move |x, _, _| -(x[0] - d).powi(2))
            .with_terminal_gradient(move |x, _, _| DVector::from_element(1, -2.0 * (x[0] - d)))
    }
}

/// `(Λ̃, Λ)` in regime `i` given the value of `φ` there.
pub fn ql_lambda_factors(model: &QuadraticLossModel, t: f64, i: usize, _y: f64, phi: f64) -> Result<(f64, f64)> {
    let (g1, g2) = model.moments[i];
    let s = model.sigma[i];
    let tilde = -model.mbar[i] * s + g1;
    let lambda = match model.lambda_form {
        LambdaForm::Consistent => s * s + model.marks.rate() * g2,
        LambdaForm::AsPrinted => s * s + phi * g2,
    };
    if !(lambda.abs() >= 1e-12) {
        return Err(Error::SingularDenominator { value: lambda, time: t, regime: i });
    }
    Ok((tilde, lambda))
}

/// Stopping rule of the `(φ, ψ)` fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub damping: f64,
    /// Gauss–Legendre panel width for rates that vary along a sojourn.
    pub panel: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_iterations: 50,
            damping: 0.5,
            panel: 0.05,
        }
    }
}

/// Converged `φ`, `ψ` with the iteration history.
#[derive(Debug, Clone, PartialEq)]
pub struct QlFunctionals {
    pub phi: RegimeFunctional,
    pub psi: RegimeFunctional,
    pub iterations: usize,
    /// Sup-norm change of `(φ, ψ)` per iteration.
    pub trace: Vec<f64>,
}

/// Solve for `φ`, `ψ` on a grid by fixed-point iteration, each step a Monte
/// Carlo evaluation of
///
/// ```text
/// φ(t,i,y) = −2 E[exp ∫_t^T (2r − Λ̃²/Λ) ds],   ψ(t,i,y) = 2d E[exp ∫_t^T (r − Λ̃²/Λ) ds]
/// ```
///
/// over regime paths from `(i, y)`, with `Λ` computed from the previous `φ`.
/// The first step is undamped; later steps blend with `damping`.
#[allow(clippy::too_many_arguments)]
pub fn ql_phi_psi(
    model: &QuadraticLossModel,
    regime: &RegimeModel,
    sampler: RegimeSampler,
    grid: &FunctionalGrid,
    n_paths: usize,
    seed: u64,
    options: &FixedPointOptions,
) -> Result<QlFunctionals> {
    if regime.num_states() != model.regimes() {
        return Err(Error::InvalidModel(format!(
            "portfolio model has {} regimes, regime model has {}",
            model.regimes(),
            regime.num_states()
        )));
    }
    let (times, ages) = grid.resolve(regime, model.horizon)?;
    let m = model.regimes();
    let d = model.target;
    let mut phi = RegimeFunctional::constant(times.clone(), ages.clone(), m, -2.0);
    let mut psi = RegimeFunctional::constant(times.clone(), ages.clone(), m, 2.0 * d);
    let mut trace = Vec::new();

    if model.phi_free() {
        let ratio: Vec<f64> = (0..m)
            .map(|i| ql_lambda_factors(model, 0.0, i, 0.0, 0.0).map(|(a, b)| a * a / b))
            .collect::<Result<_>>()?;
        let phi_rate: Vec<f64> = (0..m).map(|i| 2.0 * model.r[i] - ratio[i]).collect();
        let psi_rate: Vec<f64> = (0..m).map(|i| model.r[i] - ratio[i]).collect();
        let new_phi = estimate_functional(regime, sampler, &times, &ages, n_paths, seed, &Rate::PerRegime(&phi_rate), Representation::Exponential, -2.0)?;
        let new_psi = estimate_functional(regime, sampler, &times, &ages, n_paths, seed, &Rate::PerRegime(&psi_rate), Representation::Exponential, 2.0 * d)?;
        trace.push(new_phi.sup_distance(&phi).max(new_psi.sup_distance(&psi)));
        return Ok(QlFunctionals {
            phi: new_phi,
            psi: new_psi,
            iterations: 1,
            trace,
        });
    }

    for iteration in 1..=options.max_iterations {
        let current = &phi;
        let failure: std::sync::Mutex<Option<Error>> = std::sync::Mutex::new(None);
        let ratio = |s: f64, i: usize, y: f64| -> f64 {
            match ql_lambda_factors(model, s, i, y, current.value(s, i, y)) {
                Ok((a, b)) => a * a / b,
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let phi_rate = |s: f64, i: usize, y: f64| 2.0 * model.r[i] - ratio(s, i, y);
        let psi_rate = |s: f64, i: usize, y: f64| model.r[i] - ratio(s, i, y);
        let new_phi = estimate_functional(
            regime,
            sampler,
            &times,
            &ages,
            n_paths,
            seed,
            &Rate::General { rate: &phi_rate, panel: options.panel },
            Representation::Exponential,
            -2.0,
        )?;
        let new_psi = estimate_functional(
            regime,
            sampler,
            &times,
            &ages,
            n_paths,
            seed,
            &Rate::General { rate: &psi_rate, panel: options.panel },
            Representation::Exponential,
            2.0 * d,
        )?;
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        let change = new_phi.sup_distance(&phi).max(new_psi.sup_distance(&psi));
        let weight = if iteration == 1 { 1.0 } else { options.damping };
        phi.blend(&new_phi, weight);
        psi.blend(&new_psi, weight);
        trace.push(weight * change);
        if !(phi.is_finite() && psi.is_finite() && change.is_finite()) {
            return Err(Error::FixedPointDiverged { iterations: iteration, trace });
        }
        if weight * change < options.tolerance {
            return Ok(QlFunctionals {
                phi,
                psi,
                iterations: iteration,
                trace,
            });
        }
    }
    Err(Error::FixedPointDiverged {
        iterations: options.max_iterations,
        trace,
    })
}

/// `û = (Λ̃/Λ)(x + ψ/φ)` at the current age `y`.
pub fn ql_optimal_control(model: &QuadraticLossModel, t: f64, x: f64, i: usize, y: f64, f: &QlFunctionals) -> Result<f64> {
    let phi = f.phi.value(t, i, y);
    if !(phi.abs() >= 1e-12) {
        return Err(Error::SingularPhi { value: phi, time: t, regime: i });
    }
    let (tilde, lambda) = ql_lambda_factors(model, t, i, y, phi)?;
    Ok(tilde / lambda * (x + f.psi.value(t, i, y) / phi))
}

/// Feedback form of [`ql_optimal_control`], optionally scaled.
#[derive(Debug, Clone)]
pub struct QlPolicy {
    model: QuadraticLossModel,
    functionals: Arc<QlFunctionals>,
    factor: f64,
}

impl QlPolicy {
    pub fn new(model: QuadraticLossModel, functionals: Arc<QlFunctionals>, factor: f64) -> Self {
        Self {
            model,
            functionals,
            factor,
        }
    }
}

impl ControlPolicy for QlPolicy {
    fn control(&self, t: f64, x: &DVector<f64>, regime: usize, age: f64) -> DVector<f64> {
        let u = ql_optimal_control(&self.model, t, x[0], regime, age, &self.functionals).unwrap_or(f64::NAN);
        DVector::from_element(1, self.factor * u)
    }
}

/// Adjoint `p = φX + ψ`, `q = uφσ`, `η(γ) = uφg(γ)` and
/// `η̃_j = X(φ(t,j,0) − φ(t,i,y)) + ψ(t,j,0) − ψ(t,i,y)`.
#[derive(Debug, Clone)]
pub struct QlAdjoint {
    pub model: QuadraticLossModel,
    pub functionals: Arc<QlFunctionals>,
}

impl AdjointField for QlAdjoint {
    fn adjoint(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize, y: f64) -> Result<AdjointState> {
        let f = &self.functionals;
        let phi = f.phi.value(t, i, y);
        let psi = f.psi.value(t, i, y);
        let x = x[0];
        let u = u[0];
        let eta_tilde = (0..self.model.regimes())
            .map(|j| {
                let v = if j == i {
                    0.0
                } else {
                    x * (f.phi.value(t, j, 0.0) - phi) + (f.psi.value(t, j, 0.0) - psi)
                };
                DVector::from_element(1, v)
            })
            .collect();
        let eta = if self.model.marks.has_jumps() && u != 0.0 {
            let jump = self.model.jump.clone();
            let scale = u * phi;
            Some(Arc::new(move |g: f64| DVector::from_element(1, scale * jump(i, g))) as crate::maximum_principle::EtaFn)
        } else {
            None
        };
        Ok(AdjointState {
            p: DVector::from_element(1, phi * x + psi),
            q: DMatrix::from_element(1, 1, u * phi * self.model.sigma[i]),
            eta,
            eta_tilde,
        })
    }
}

/// Adjoint at every node of `path` (right limits).
pub fn ql_adjoint(model: &QuadraticLossModel, path: &SamplePath, functionals: Arc<QlFunctionals>) -> Result<Vec<AdjointState>> {
    let field = QlAdjoint {
        model: model.clone(),
        functionals,
    };
    (0..path.len())
        .map(|k| field.adjoint(path.times[k], &path.x[k], &path.u[k], path.theta[k], path.age[k]))
        .collect()
}
