use std::fmt;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::jump_diffusion::{MarkDist, MarkMeasure};
use crate::portfolio::{
    FixedPointOptions, FunctionalGrid, LambdaForm, PhiVariant, QuadraticLossModel, RegimeJumpForm, RiskSensitiveModel,
};
use crate::semi_markov::{HoldingDist, RegimeModel, RegimeSampler, RegimeState};
use crate::verification::{PerturbationFamily, SufficiencyOptions};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "SMJD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    RsVerify,
    QlVerify,
    Dynkin,
    Hjb,
    ReduceMarkov,
    PolicyEval,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::Simulate,
        Self::RsVerify,
        Self::QlVerify,
        Self::Dynkin,
        Self::Hjb,
        Self::ReduceMarkov,
        Self::PolicyEval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::RsVerify => "rs-verify",
            Self::QlVerify => "ql-verify",
            Self::Dynkin => "dynkin",
            Self::Hjb => "hjb",
            Self::ReduceMarkov => "reduce-markov",
            Self::PolicyEval => "policy-eval",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleKind {
    #[default]
    RiskSensitive,
    QuadraticLoss,
}

/// One experiment: which command, the model, numerical settings and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must match the command when present.
    #[serde(default)]
    pub experiment: Option<ExperimentKind>,
    pub seed: u64,
    /// Where result files go unless `--out` is given. Not part of the
    /// resolved snapshot, so runs in different directories compare equal.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub numeric: NumericConfig,
    /// Competitors for the verify commands; the example's default family
    /// when absent.
    #[serde(default)]
    pub perturbations: Option<PerturbationFamily>,
    #[serde(default)]
    pub hjb: HjbConfig,
    #[serde(default)]
    pub policy_eval: PolicyEvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub horizon: f64,
    /// Example used by `simulate`, `dynkin`, `reduce-markov` and `policy-eval`.
    pub example: ExampleKind,
    pub regime: RegimeConfig,
    pub risk_sensitive: RiskSensitiveConfig,
    pub quadratic_loss: QuadraticLossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            example: ExampleKind::default(),
            regime: RegimeConfig::default(),
            risk_sensitive: RiskSensitiveConfig::default(),
            quadratic_loss: QuadraticLossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HoldingConfig {
    Exponential { rate: f64 },
    Weibull { shape: f64, scale: f64 },
}

impl From<HoldingConfig> for HoldingDist {
    fn from(h: HoldingConfig) -> Self {
        match h {
            HoldingConfig::Exponential { rate } => HoldingDist::Exponential { rate },
            HoldingConfig::Weibull { shape, scale } => HoldingDist::Weibull { shape, scale },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeConfig {
    /// Embedded jump chain `p_ij`, zero diagonal.
    pub kernel: Vec<Vec<f64>>,
    pub holding: Vec<HoldingConfig>,
    pub initial_state: usize,
    pub initial_age: f64,
    pub sampler: RegimeSampler,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            kernel: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            holding: vec![
                HoldingConfig::Weibull { shape: 1.5, scale: 0.8 },
                HoldingConfig::Weibull { shape: 2.0, scale: 1.2 },
            ],
            initial_state: 0,
            initial_age: 0.0,
            sampler: RegimeSampler::Direct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RiskSensitiveConfig {
    pub r: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: f64,
    pub x0: f64,
    pub phi_variant: PhiVariant,
    pub regime_jump: RegimeJumpForm,
}

impl Default for RiskSensitiveConfig {
    fn default() -> Self {
        Self {
            r: vec![0.05, 0.02],
            mu: vec![0.13, 0.08],
            sigma: vec![0.2, 0.3],
            gamma: 0.5,
            x0: 1.0,
            phi_variant: PhiVariant::default(),
            regime_jump: RegimeJumpForm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MarkDistConfig {
    Point { mark: f64 },
    Uniform { lo: f64, hi: f64 },
    Discrete { atoms: Vec<f64>, weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct MarksConfig {
    /// Poisson rate `λ`; zero switches jumps off.
    pub rate: f64,
    pub dist: MarkDistConfig,
}

impl MarksConfig {
    pub fn build(&self) -> crate::Result<MarkMeasure> {
        match &self.dist {
            MarkDistConfig::Point { mark } => MarkMeasure::point(self.rate, *mark),
            MarkDistConfig::Uniform { lo, hi } => MarkMeasure::new(self.rate, MarkDist::Uniform { lo: *lo, hi: *hi }),
            MarkDistConfig::Discrete { atoms, weights } => MarkMeasure::new(
                self.rate,
                MarkDist::Discrete {
                    atoms: atoms.clone(),
                    weights: weights.clone(),
                },
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticLossConfig {
    pub r: Vec<f64>,
    /// Market price of risk per regime.
    pub mbar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub marks: MarksConfig,
    /// Jump size in regime `i` is `mark_scale[i] · γ`.
    pub mark_scale: Vec<f64>,
    /// Target wealth `d`.
    pub target: f64,
    pub x0: f64,
    pub lambda_form: LambdaForm,
}

impl Default for QuadraticLossConfig {
    fn default() -> Self {
        Self {
            r: vec![0.05, 0.02],
            mbar: vec![0.4, 0.25],
            sigma: vec![0.2, 0.3],
            marks: MarksConfig {
                rate: 1.0,
                dist: MarkDistConfig::Uniform { lo: -0.2, hi: 0.3 },
            },
            mark_scale: vec![1.0, 0.5],
            target: 1.2,
            x0: 1.0,
            lambda_form: LambdaForm::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SufficiencyConfig {
    pub candidate_factor: f64,
    pub first_order_nodes: usize,
    pub first_order_tolerance: f64,
    pub pass_sigmas: f64,
}

impl Default for SufficiencyConfig {
    fn default() -> Self {
        let o = SufficiencyOptions::default();
        Self {
            candidate_factor: o.candidate_factor,
            first_order_nodes: o.first_order_nodes,
            first_order_tolerance: o.first_order_tolerance,
            pass_sigmas: o.pass_sigmas,
        }
    }
}

/// Step-halving study of the adjoint residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualConfig {
    pub enabled: bool,
    pub coarsest: f64,
    pub levels: usize,
    pub n_paths: usize,
    pub ratio_band: (f64, f64),
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            coarsest: 4e-3,
            levels: 3,
            n_paths: 1000,
            ratio_band: (0.35, 0.65),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DynkinConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub sigmas: f64,
}

impl Default for DynkinConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            n_paths: 10_000,
            sigmas: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct NumericConfig {
    pub dt: f64,
    pub n_paths: usize,
    pub functional_grid: FunctionalGrid,
    /// Regime paths per grid node for `φ`, `ψ`.
    pub functional_paths: usize,
    pub fixed_point: FixedPointOptions,
    pub sufficiency: SufficiencyConfig,
    pub residual: ResidualConfig,
    pub dynkin: DynkinConfig,
}

impl Default for NumericConfig {
    fn default() -> Self {
        Self {
            dt: 5e-3,
            n_paths: 10_000,
            functional_grid: FunctionalGrid::default(),
            functional_paths: 1000,
            fixed_point: FixedPointOptions::default(),
            sufficiency: SufficiencyConfig::default(),
            residual: ResidualConfig::default(),
            dynkin: DynkinConfig::default(),
        }
    }
}

/// Deterministic test problem `dX = rX dt`, payoff `−(X(T) − d)²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct HjbConfig {
    pub r: f64,
    pub d: f64,
    pub horizon: f64,
    /// Shift of `d` in the negative-control value function.
    pub shift: f64,
    pub t_nodes: usize,
    pub x_nodes: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub tolerance: f64,
    /// The shifted value must exceed this.
    pub detection_threshold: f64,
}

impl Default for HjbConfig {
    fn default() -> Self {
        Self {
            r: 0.05,
            d: 1.0,
            horizon: 1.0,
            shift: 0.1,
            t_nodes: 10,
            x_nodes: 10,
            x_min: 0.5,
            x_max: 2.0,
            tolerance: 1e-8,
            detection_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyEvalConfig {
    pub times: Vec<f64>,
    pub wealth: Vec<f64>,
    pub ages: Vec<f64>,
    /// Also write the functionals on the full grid to `functionals.csv`.
    pub write_functionals: bool,
}

impl Default for PolicyEvalConfig {
    fn default() -> Self {
        Self {
            times: vec![0.0, 0.25, 0.5, 0.75],
            wealth: vec![0.5, 1.0, 1.5],
            ages: vec![0.0, 0.5],
            write_functionals: true,
        }
    }
}

/// Invalid configuration, with the path of the offending field.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config error at `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for `kind` with the given seed.
    pub fn example(kind: ExperimentKind, seed: u64) -> Self {
        let mut c = Self {
            experiment: Some(kind),
            seed,
            output_dir: None,
            model: ModelConfig::default(),
            numeric: NumericConfig::default(),
            perturbations: None,
            hjb: HjbConfig::default(),
            policy_eval: PolicyEvalConfig::default(),
        };
        if kind == ExperimentKind::ReduceMarkov {
            c.model.regime.holding = vec![
                HoldingConfig::Exponential { rate: 1.0 },
                HoldingConfig::Exponential { rate: 1.5 },
            ];
        }
        c
    }

    /// Parse JSON; unknown keys and missing required fields are reported
    /// with their path.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            // a missing top-level field is reported against the root
            let field = match (path.as_str(), missing_field(&msg)) {
                (".", Some(f)) => f.to_string(),
                (p, Some(f)) => format!("{p}.{f}"),
                (p, None) => p.to_string(),
            };
            ConfigError::new(field, msg)
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Check the command and every numeric setting before any computation.
    pub fn validate(&self, command: ExperimentKind) -> Result<(), ConfigError> {
        if let Some(k) = self.experiment {
            if k != command {
                return Err(ConfigError::new("experiment", format!("config is for `{k}` but the command is `{command}`")));
            }
        }
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::new(field, format!("must be positive and finite, got {v}")))
            }
        };
        let at_least = |field: &str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err(ConfigError::new(field, format!("must be at least {min}, got {v}")))
            }
        };
        let m = &self.model;
        positive("model.horizon", m.horizon)?;
        let n = &self.numeric;
        positive("numeric.dt", n.dt)?;
        if n.dt > m.horizon {
            return Err(ConfigError::new("numeric.dt", "larger than the horizon"));
        }
        at_least("numeric.n_paths", n.n_paths, 2)?;
        at_least("numeric.functional_paths", n.functional_paths, 2)?;
        at_least("numeric.functional_grid.time_nodes", n.functional_grid.time_nodes, 2)?;
        at_least("numeric.functional_grid.age_nodes", n.functional_grid.age_nodes, 1)?;
        positive("numeric.fixed_point.tolerance", n.fixed_point.tolerance)?;
        at_least("numeric.fixed_point.max_iterations", n.fixed_point.max_iterations, 1)?;
        if !(n.fixed_point.damping > 0.0 && n.fixed_point.damping <= 1.0) {
            return Err(ConfigError::new("numeric.fixed_point.damping", "must lie in (0, 1]"));
        }
        positive("numeric.fixed_point.panel", n.fixed_point.panel)?;
        positive("numeric.sufficiency.first_order_tolerance", n.sufficiency.first_order_tolerance)?;
        positive("numeric.sufficiency.pass_sigmas", n.sufficiency.pass_sigmas)?;
        if !n.sufficiency.candidate_factor.is_finite() {
            return Err(ConfigError::new("numeric.sufficiency.candidate_factor", "must be finite"));
        }
        positive("numeric.residual.coarsest", n.residual.coarsest)?;
        at_least("numeric.residual.levels", n.residual.levels, 2)?;
        at_least("numeric.residual.n_paths", n.residual.n_paths, 2)?;
        positive("numeric.dynkin.dt", n.dynkin.dt)?;
        at_least("numeric.dynkin.n_paths", n.dynkin.n_paths, 2)?;
        positive("numeric.dynkin.sigmas", n.dynkin.sigmas)?;

        let r = &m.regime;
        if r.holding.len() != r.kernel.len() {
            return Err(ConfigError::new(
                "model.regime.holding",
                format!("{} holding laws for {} states", r.holding.len(), r.kernel.len()),
            ));
        }
        if r.initial_state >= r.kernel.len() {
            return Err(ConfigError::new("model.regime.initial_state", "out of range"));
        }
        if !(r.initial_age.is_finite() && r.initial_age >= 0.0) {
            return Err(ConfigError::new("model.regime.initial_age", "must be nonnegative"));
        }
        self.regime_model()?;
        if let Some(f) = &self.perturbations {
            if f.is_empty() {
                return Err(ConfigError::new("perturbations.entries", "empty family"));
            }
        }
        match command {
            ExperimentKind::Hjb => {
                let h = &self.hjb;
                positive("hjb.horizon", h.horizon)?;
                at_least("hjb.t_nodes", h.t_nodes, 2)?;
                at_least("hjb.x_nodes", h.x_nodes, 2)?;
                if !(h.x_min < h.x_max) {
                    return Err(ConfigError::new("hjb.x_max", "must exceed hjb.x_min"));
                }
                positive("hjb.tolerance", h.tolerance)?;
                positive("hjb.detection_threshold", h.detection_threshold)?;
            }
            ExperimentKind::PolicyEval => {
                let p = &self.policy_eval;
                if p.times.iter().any(|t| !(0.0..=m.horizon).contains(t)) {
                    return Err(ConfigError::new("policy_eval.times", "times must lie in [0, horizon]"));
                }
                if p.ages.iter().any(|y| !(y.is_finite() && *y >= 0.0)) {
                    return Err(ConfigError::new("policy_eval.ages", "ages must be nonnegative"));
                }
                self.example_model(self.example_for(command))?;
            }
            ExperimentKind::Dynkin => {}
            _ => {
                self.example_model(self.example_for(command))?;
            }
        }
        Ok(())
    }

    /// The example a command works on.
    pub fn example_for(&self, command: ExperimentKind) -> ExampleKind {
        match command {
            ExperimentKind::RsVerify => ExampleKind::RiskSensitive,
            ExperimentKind::QlVerify => ExampleKind::QuadraticLoss,
            _ => self.model.example,
        }
    }

    pub fn regime_model(&self) -> Result<RegimeModel, ConfigError> {
        let r = &self.model.regime;
        RegimeModel::new(r.kernel.clone(), r.holding.iter().map(|&h| h.into()).collect())
            .map_err(|e| ConfigError::new("model.regime", e.to_string()))
    }

    pub fn origin(&self) -> RegimeState {
        RegimeState::new(self.model.regime.initial_state, self.model.regime.initial_age)
    }

    pub fn risk_sensitive_model(&self) -> Result<RiskSensitiveModel, ConfigError> {
        let c = &self.model.risk_sensitive;
        RiskSensitiveModel::new(c.r.clone(), c.mu.clone(), c.sigma.clone(), c.gamma, self.model.horizon)
            .map_err(|e| ConfigError::new("model.risk_sensitive", e.to_string()))
    }

    pub fn quadratic_loss_model(&self) -> Result<QuadraticLossModel, ConfigError> {
        let c = &self.model.quadratic_loss;
        let marks = c.marks.build().map_err(|e| ConfigError::new("model.quadratic_loss.marks", e.to_string()))?;
        QuadraticLossModel::with_scaled_marks(
            c.r.clone(),
            c.mbar.clone(),
            c.sigma.clone(),
            marks,
            c.mark_scale.clone(),
            c.target,
            self.model.horizon,
        )
        .map(|m| m.with_lambda_form(c.lambda_form))
        .map_err(|e| ConfigError::new("model.quadratic_loss", e.to_string()))
    }

    fn example_model(&self, kind: ExampleKind) -> Result<(), ConfigError> {
        let states = self.model.regime.kernel.len();
        let (field, regimes, x0) = match kind {
            ExampleKind::RiskSensitive => {
                let m = self.risk_sensitive_model()?;
                ("model.risk_sensitive", m.regimes(), self.model.risk_sensitive.x0)
            }
            ExampleKind::QuadraticLoss => {
                let m = self.quadratic_loss_model()?;
                ("model.quadratic_loss", m.regimes(), self.model.quadratic_loss.x0)
            }
        };
        if regimes != states {
            return Err(ConfigError::new(field, format!("{regimes} regimes but the regime model has {states} states")));
        }
        if !x0.is_finite() || (kind == ExampleKind::RiskSensitive && x0 <= 0.0) {
            return Err(ConfigError::new(format!("{field}.x0"), format!("invalid initial wealth {x0}")));
        }
        Ok(())
    }
}

/// Name of the field in serde's "missing field `x`" message.
fn missing_field(msg: &str) -> Option<&str> {
    let rest = msg.strip_prefix("missing field `")?;
    rest.split('`').next()
}
