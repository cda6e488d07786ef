use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::jump_diffusion::{estimate_objective, Scenario};
use crate::portfolio::{ExampleProblem, FunctionalGrid};
use crate::semi_markov::{apply_generator_l, RegimeModel, RegimeSampler, AGE_FD_STEP};
use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ReductionStatus {
    Applicable,
    NotApplicable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiComparison {
    pub regime: usize,
    pub semi_markov: Estimate,
    pub markov_chain: Estimate,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovReductionReport {
    pub example: String,
    pub status: ReductionStatus,
    pub objective_semi_markov: Option<Estimate>,
    pub objective_markov_chain: Option<Estimate>,
    pub objective_agree: Option<bool>,
    pub phi: Vec<PhiComparison>,
    /// Largest spread over ages of `Lf(i, ·)` for age-free test functions.
    pub generator_age_spread: Option<f64>,
    pub generator_tolerance: f64,
    /// `None` when the reduction does not apply.
    pub pass: Option<bool>,
}

/// Age-free test functions used for the generator check.
fn test_functions() -> [fn(usize, f64) -> f64; 3] {
    [
        |i, _| (i as f64 + 1.0).powi(2),
        |i, _| (0.7 * i as f64).cos(),
        |i, _| (-(i as f64)).exp() - 0.5 * i as f64,
    ]
}

/// Largest age spread of `Lf(i, y)` over `ages` for the test functions.
pub fn generator_age_spread(model: &RegimeModel, ages: &[f64]) -> Result<f64> {
    let mut spread: f64 = 0.0;
    for f in test_functions() {
        for i in 0..model.num_states() {
            let values = ages
                .iter()
                .map(|&y| apply_generator_l(model, &f, i, y, AGE_FD_STEP))
                .collect::<Result<Vec<_>>>()?;
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            spread = spread.max(hi - lo);
        }
    }
    Ok(spread)
}

/// With exponential holding laws the regime process is a Markov chain with
/// rates `λ_i p_ij`. Run the pipeline once with the semi-Markov sampler and
/// once with competing exponential clocks, and compare `Ĵ(û)` and `φ(0, i, 0)`
/// within `k = 3` combined standard errors. Models with a non-exponential
/// holding law are reported as not applicable.
pub fn markov_reduction_experiment(
    problem: &ExampleProblem,
    grid: &FunctionalGrid,
    n_paths: usize,
    functional_paths: usize,
    seed: u64,
) -> Result<MarkovReductionReport> {
    const K: f64 = 3.0;
    const GENERATOR_TOL: f64 = 1e-9;
    let regime = &problem.scenario.regime;
    if regime.exponential_rates().is_none() {
        return Ok(MarkovReductionReport {
            example: problem.name.clone(),
            status: ReductionStatus::NotApplicable {
                reason: "a holding law is not exponential".into(),
            },
            objective_semi_markov: None,
            objective_markov_chain: None,
            objective_agree: None,
            phi: vec![],
            generator_age_spread: None,
            generator_tolerance: GENERATOR_TOL,
            pass: None,
        });
    }
    let spread = generator_age_spread(regime, &[0.0, 0.1, 0.5, 1.0, 2.5, 7.0])?;
    let candidate = problem.candidate();
    let with = |sampler: RegimeSampler| Scenario {
        sampler,
        ..problem.scenario.clone()
    };
    let run = |sampler| {
        estimate_objective(
            problem.dynamics.as_ref(),
            candidate.as_ref(),
            &problem.objective,
            &with(sampler),
            n_paths,
            seed,
        )
    };
    let semi = run(RegimeSampler::Direct)?;
    let chain = run(RegimeSampler::MarkovChain)?;
    let objective_agree = semi.agrees_with(&chain, K);

    let phi_semi = problem.phi_functional(RegimeSampler::Direct, grid, functional_paths, seed)?;
    let phi_chain = problem.phi_functional(RegimeSampler::MarkovChain, grid, functional_paths, seed)?;
    let phi: Vec<PhiComparison> = (0..regime.num_states())
        .map(|i| {
            let a = phi_semi.node(0, i, 0);
            let b = phi_chain.node(0, i, 0);
            PhiComparison {
                regime: i,
                semi_markov: a,
                markov_chain: b,
                agree: a.agrees_with(&b, K),
            }
        })
        .collect();
    let pass = objective_agree && phi.iter().all(|c| c.agree) && spread < GENERATOR_TOL;
    Ok(MarkovReductionReport {
        example: problem.name.clone(),
        status: ReductionStatus::Applicable,
        objective_semi_markov: Some(semi),
        objective_markov_chain: Some(chain),
        objective_agree: Some(objective_agree),
        phi,
        generator_age_spread: Some(spread),
        generator_tolerance: GENERATOR_TOL,
        pass: Some(pass),
    })
}
