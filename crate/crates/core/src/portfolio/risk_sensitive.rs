use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::functional::{estimate_functional, FunctionalGrid, Rate, Representation, RegimeFunctional};
use crate::error::{Error, Result};
use crate::jump_diffusion::{ControlPolicy, MarkMeasure, ObjectiveSpec, SamplePath, ScalarDynamics};
use crate::maximum_principle::{AdjointField, AdjointState};
use crate::semi_markov::{RegimeModel, RegimeSampler};
use crate::stats::Estimate;

/// Power-utility investor with one stock and one bond whose coefficients
/// switch with the regime. Wealth follows
/// `dX = (rX + u σ m̄) dt + u σ dW` where `u` is the amount held in the stock
/// and `m̄ = (μ − r)/σ`; the payoff is `X(T)^γ / γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSensitiveModel {
    r: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    gamma: f64,
    horizon: f64,
}

/// Which representation of the exponent `φ` to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum PhiVariant {
    /// `φ = E[∫_t^T a ds]`.
    #[default]
    Integral,
    /// `φ = E[exp ∫_t^T a ds]`.
    Literal,
}

/// Form of the regime-jump adjoint `η̃_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeJumpForm {
    /// `(φ(t, j, 0) − φ(t, i, y)) · p`, the first-order difference.
    #[default]
    Linearized,
    /// `(exp(φ(t, j, 0) − φ(t, i, y)) − 1) · p`, the actual jump of `p`.
    Exact,
}

impl RiskSensitiveModel {
    pub fn new(r: Vec<f64>, mu: Vec<f64>, sigma: Vec<f64>, gamma: f64, horizon: f64) -> Result<Self> {
        let m = r.len();
        if m == 0 || mu.len() != m || sigma.len() != m {
            return Err(Error::InvalidModel(format!(
                "r, mu and sigma need one entry per regime, got {}, {}, {}",
                m,
                mu.len(),
                sigma.len()
            )));
        }
        if !(gamma > 0.0 && gamma != 1.0 && gamma.is_finite()) {
            return Err(Error::InvalidModel(format!("gamma must lie in (0,1) or (1,inf), got {gamma}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidModel(format!("horizon must be positive, got {horizon}")));
        }
        for i in 0..m {
            if !(r[i].is_finite() && mu[i].is_finite() && sigma[i].is_finite()) {
                return Err(Error::InvalidModel(format!("non-finite coefficient in regime {i}")));
            }
            if sigma[i] == 0.0 {
                return Err(Error::DegenerateVol { regime: i, time: 0.0 });
            }
            if sigma[i] < 0.0 {
                return Err(Error::InvalidModel(format!("sigma must be positive in regime {i}")));
            }
            if mu[i] < r[i] {
                return Err(Error::InvalidModel(format!(
                    "market price of risk must be >= 0, regime {i} has mu={} < r={}",
                    mu[i], r[i]
                )));
            }
        }
        Ok(Self {
            r,
            mu,
            sigma,
            gamma,
            horizon,
        })
    }

    pub fn regimes(&self) -> usize {
        self.r.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn r(&self, i: usize) -> f64 {
        self.r[i]
    }

    pub fn mu(&self, i: usize) -> f64 {
        self.mu[i]
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigma[i]
    }

    /// `m̄ = (μ − r)/σ`.
    pub fn market_price(&self, i: usize) -> f64 {
        (self.mu[i] - self.r[i]) / self.sigma[i]
    }

    /// The payoff `x^γ/γ` is concave only for `γ < 1`.
    pub fn within_sufficiency_hypotheses(&self) -> bool {
        self.gamma < 1.0
    }

    /// `a_i = γr − m̄² + (2−γ)/(1−γ) · m̄²/(2σ²)`.
    pub fn phi_rate(&self, i: usize) -> f64 {
        let g = self.gamma;
        let m = self.market_price(i);
        let s = self.sigma[i];
        g * self.r[i] - m * m + (2.0 - g) / (1.0 - g) * m * m / (2.0 * s * s)
    }

    pub fn dynamics(&self) -> ScalarDynamics {
        let (r, s, mbar): (Vec<f64>, Vec<f64>, Vec<f64>) = (
            self.r.clone(),
            self.sigma.clone(),
            (0..self.regimes()).map(|i| self.market_price(i)).collect(),
        );
        let r2 = r.clone();
        let s2 = s.clone();
        ScalarDynamics::frozen(MarkMeasure::none())
            .with_drift(move |_, x, u, i| r[i] * x + u * s[i] * mbar[i])
            .with_vol(move |_, _, u, i| u * s2[i])
            .with_x_derivatives(move |_, _, _, i| r2[i], |_, _, _, _| 0.0, |_, _, _, _, _| 0.0)
    }

    /// Terminal payoff `x^γ/γ` with its exact gradient.
    pub fn objective(&self) -> ObjectiveSpec {
        let g = self.gamma;
        ObjectiveSpec::terminal_only(move |x, _, _| x[0].powf(g) / g)
            .with_terminal_gradient(move |x, _, _| DVector::from_element(1, x[0].powf(g - 1.0)))
    }

    /// The closed-form rule scaled by `factor` (1 for the candidate itself).
    pub fn policy(&self, factor: f64) -> RsPolicy {
        RsPolicy {
            model: self.clone(),
            factor,
        }
    }
}

/// `û = m̄ x / ((1 − γ) σ)`.
pub fn rs_optimal_control(model: &RiskSensitiveModel, t: f64, x: f64, i: usize) -> Result<f64> {
    let s = model.sigma(i);
    if s == 0.0 {
        return Err(Error::DegenerateVol { regime: i, time: t });
    }
    Ok(model.market_price(i) / ((1.0 - model.gamma) * s) * x)
}

/// Feedback form of [`rs_optimal_control`], optionally scaled.
#[derive(Debug, Clone)]
pub struct RsPolicy {
    model: RiskSensitiveModel,
    factor: f64,
}

impl ControlPolicy for RsPolicy {
    fn control(&self, t: f64, x: &DVector<f64>, regime: usize, _age: f64) -> DVector<f64> {
        let u = rs_optimal_control(&self.model, t, x[0], regime).unwrap_or(f64::NAN);
        DVector::from_element(1, self.factor * u)
    }
}

/// `φ(t, i, y)` at one point by Monte Carlo over regime paths from `(i, y)`.
#[allow(clippy::too_many_arguments)]
pub fn rs_phi(
    model: &RiskSensitiveModel,
    regime: &RegimeModel,
    sampler: RegimeSampler,
    t: f64,
    i: usize,
    y: f64,
    n_paths: usize,
    seed: u64,
    variant: PhiVariant,
) -> Result<Estimate> {
    check_regimes(model, regime)?;
    if !(0.0..=model.horizon).contains(&t) {
        return Err(Error::InvalidArgument(format!("t={t} outside [0, {}]", model.horizon)));
    }
    let tau = model.horizon - t;
    if tau == 0.0 {
        return Ok(Estimate::exact(match variant {
            PhiVariant::Integral => 0.0,
            PhiVariant::Literal => 1.0,
        }));
    }
    let rates: Vec<f64> = (0..model.regimes()).map(|i| model.phi_rate(i)).collect();
    let times = [t, model.horizon];
    let f = estimate_functional(regime, sampler, &times, &[y], n_paths, seed, &Rate::PerRegime(&rates), repr(variant), 1.0)?;
    Ok(f.node(0, i, 0))
}

fn repr(variant: PhiVariant) -> Representation {
    match variant {
        PhiVariant::Integral => Representation::Integral,
        PhiVariant::Literal => Representation::Exponential,
    }
}

fn check_regimes(model: &RiskSensitiveModel, regime: &RegimeModel) -> Result<()> {
    if regime.num_states() != model.regimes() {
        return Err(Error::InvalidModel(format!(
            "portfolio model has {} regimes, regime model has {}",
            model.regimes(),
            regime.num_states()
        )));
    }
    Ok(())
}

/// `φ` on a `(t, i, y)` grid.
pub fn rs_phi_functional(
    model: &RiskSensitiveModel,
    regime: &RegimeModel,
    sampler: RegimeSampler,
    grid: &FunctionalGrid,
    n_paths: usize,
    seed: u64,
    variant: PhiVariant,
) -> Result<RegimeFunctional> {
    check_regimes(model, regime)?;
    let (times, ages) = grid.resolve(regime, model.horizon)?;
    let rates: Vec<f64> = (0..model.regimes()).map(|i| model.phi_rate(i)).collect();
    estimate_functional(regime, sampler, &times, &ages, n_paths, seed, &Rate::PerRegime(&rates), repr(variant), 1.0)
}

/// Adjoint `p = X^{γ−1} e^φ`, `q = (γ−1)(u/X) σ p`, `η = 0` and
/// `η̃_j` from the jump of `φ` across a switch into `j`.
#[derive(Debug, Clone)]
pub struct RsAdjoint {
    pub model: RiskSensitiveModel,
    pub phi: Arc<RegimeFunctional>,
    pub regime_jump: RegimeJumpForm,
}

impl RsAdjoint {
    pub fn new(model: RiskSensitiveModel, phi: Arc<RegimeFunctional>) -> Self {
        Self {
            model,
            phi,
            regime_jump: RegimeJumpForm::default(),
        }
    }

    pub fn with_regime_jump(mut self, form: RegimeJumpForm) -> Self {
        self.regime_jump = form;
        self
    }
}

impl AdjointField for RsAdjoint {
    fn adjoint(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, i: usize, y: f64) -> Result<AdjointState> {
        let g = self.model.gamma;
        let phi = self.phi.value(t, i, y);
        let p = x[0].powf(g - 1.0) * phi.exp();
        let q = (g - 1.0) * (u[0] / x[0]) * self.model.sigma(i) * p;
        let eta_tilde = (0..self.model.regimes())
            .map(|j| {
                let d = self.phi.value(t, j, 0.0) - phi;
                let v = match self.regime_jump {
                    RegimeJumpForm::Linearized => d * p,
                    RegimeJumpForm::Exact => d.exp_m1() * p,
                };
                DVector::from_element(1, if j == i { 0.0 } else { v })
            })
            .collect();
        Ok(AdjointState {
            p: DVector::from_element(1, p),
            q: DMatrix::from_element(1, 1, q),
            eta: None,
            eta_tilde,
        })
    }
}

/// Adjoint at every node of `path` (right limits).
pub fn rs_adjoint(model: &RiskSensitiveModel, path: &SamplePath, phi: Arc<RegimeFunctional>) -> Result<Vec<AdjointState>> {
    let field = RsAdjoint::new(model.clone(), phi);
    (0..path.len())
        .map(|k| field.adjoint(path.times[k], &path.x[k], &path.u[k], path.theta[k], path.age[k]))
        .collect()
}
