use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{RegimeEvent, RegimeModel, RegimePath, RegimeState};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Age window over which one hazard majorant is used by the thinning sampler.
const THINNING_WINDOW: f64 = 1.0;

/// Renewal sampling: draw a sojourn from `F(·|i)`, then the next state from
/// row `i` of the kernel, until the horizon is passed.
///
/// A positive initial age conditions the first sojourn on survival to that age.
pub fn simulate_regime_direct(
    model: &RegimeModel,
    origin: RegimeState,
    horizon: f64,
    rng: &mut StreamRng,
) -> RegimePath {
    let mut events = Vec::new();
    let mut state = origin.theta;
    if !model.can_jump(state) {
        return RegimePath::new(origin, horizon, events);
    }
    let mut t = 0.0;
    let mut age = origin.age;
    loop {
        let tau = model.holding(state).residual_quantile(age, rng.uniform());
        if !(t + tau <= horizon) {
            break;
        }
        t += tau;
        let next = model.next_state(state, rng.uniform());
        events.push(RegimeEvent {
            time: t,
            from: state,
            to: next,
            age_before: age + tau,
        });
        state = next;
        age = 0.0;
    }
    RegimePath::new(origin, horizon, events)
}

/// Proposal and acceptance counts from one thinning run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ThinningStats {
    pub proposals: u64,
    pub accepted: u64,
}

/// Thinning of a dominating Poisson clock.
///
/// Within an age window the exit hazard of the current state is bounded by
/// the declared majorant `h̄`; candidate times arrive at rate `Σ_j p_ij h̄ = h̄`
/// and are accepted with probability `h_i(y)/h̄`. An accepted candidate moves
/// to `j` with probability `λ_ij(y)/Σ_k λ_ik(y)` and resets the age to zero,
/// which is the interval-partition construction of the regime process driven
/// by a Poisson random measure.
pub fn simulate_regime_thinning(
    model: &RegimeModel,
    origin: RegimeState,
    horizon: f64,
    rng: &mut StreamRng,
) -> Result<RegimePath> {
    simulate_regime_thinning_with_stats(model, origin, horizon, rng).map(|(p, _)| p)
}

pub fn simulate_regime_thinning_with_stats(
    model: &RegimeModel,
    origin: RegimeState,
    horizon: f64,
    rng: &mut StreamRng,
) -> Result<(RegimePath, ThinningStats)> {
    let mut stats = ThinningStats::default();
    let mut events = Vec::new();
    let mut state = origin.theta;
    let mut t = 0.0;
    let mut age = origin.age;
    while t < horizon && model.can_jump(state) {
        let span = THINNING_WINDOW.min(horizon - t);
        let last_window = span == horizon - t;
        let window_end = age + span;
        let bound = model
            .holding(state)
            .hazard_bound(age, window_end)
            .ok_or(Error::BoundViolation {
                state,
                age,
                hazard: f64::INFINITY,
                bound: f64::NAN,
            })?;
        if !(bound > 0.0) {
            if last_window {
                break;
            }
            t += span;
            age = window_end;
            continue;
        }
        let gap = rng.exponential(bound);
        if age + gap > window_end {
            if last_window {
                break;
            }
            t += span;
            age = window_end;
            continue;
        }
        if t + gap >= horizon {
            break;
        }
        t += gap;
        age += gap;
        stats.proposals += 1;
        let hazard = model.hazard_rate(state, age)?;
        if hazard > bound * (1.0 + 1e-12) {
            return Err(Error::BoundViolation {
                state,
                age,
                hazard,
                bound,
            });
        }
        if rng.uniform() * bound < hazard {
            stats.accepted += 1;
            // λ_ij(y) ∝ p_ij at fixed (i, y).
            let next = model.next_state(state, rng.uniform());
            events.push(RegimeEvent {
                time: t,
                from: state,
                to: next,
                age_before: age,
            });
            state = next;
            age = 0.0;
        }
    }
    Ok((RegimePath::new(origin, horizon, events), stats))
}

/// Continuous-time Markov chain with jump rates `rates[i] · p_ij`, sampled with
/// competing exponential clocks. Used as the independent reference for
/// models whose holding laws are all exponential.
pub fn simulate_markov_chain(
    model: &RegimeModel,
    rates: &[f64],
    origin: RegimeState,
    horizon: f64,
    rng: &mut StreamRng,
) -> RegimePath {
    let m = model.num_states();
    let mut events = Vec::new();
    let mut state = origin.theta;
    let mut t = 0.0;
    let mut age = origin.age;
    if !model.can_jump(state) {
        return RegimePath::new(origin, horizon, events);
    }
    loop {
        let mut best = (f64::INFINITY, state);
        for j in 0..m {
            let q = rates[state] * model.kernel(state, j);
            if j == state || q <= 0.0 {
                continue;
            }
            let clock = rng.exponential(q);
            if clock < best.0 {
                best = (clock, j);
            }
        }
        let (tau, next) = best;
        if !(t + tau <= horizon) {
            break;
        }
        t += tau;
        events.push(RegimeEvent {
            time: t,
            from: state,
            to: next,
            age_before: age + tau,
        });
        state = next;
        age = 0.0;
    }
    RegimePath::new(origin, horizon, events)
}

/// Which regime sampler a pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeSampler {
    /// Renewal sampling of sojourns.
    #[default]
    Direct,
    /// Thinning of a dominating Poisson clock.
    Thinning,
    /// Competing exponential clocks; exponential holding laws only.
    MarkovChain,
}

impl RegimeSampler {
    pub fn sample(
        self,
        model: &RegimeModel,
        origin: RegimeState,
        horizon: f64,
        rng: &mut StreamRng,
    ) -> Result<RegimePath> {
        match self {
            Self::Direct => Ok(simulate_regime_direct(model, origin, horizon, rng)),
            Self::Thinning => simulate_regime_thinning(model, origin, horizon, rng),
            Self::MarkovChain => {
                let rates = model.exponential_rates().ok_or_else(|| {
                    Error::InvalidModel(
                        "the Markov-chain sampler needs exponential holding times".into(),
                    )
                })?;
                Ok(simulate_markov_chain(model, &rates, origin, horizon, rng))
            }
        }
    }
}
