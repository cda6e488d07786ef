use rayon::prelude::*;
use serde::Serialize;

use super::{simulate_regime_direct, RegimeModel, RegimePath, RegimeState};
use crate::error::Result;
use crate::rng::{Purpose, StreamRng};
use crate::stats::Estimate;

/// A function of `(state, age)` with an optional analytic age derivative.
pub trait RegimeFunction: Sync {
    fn value(&self, state: usize, age: f64) -> f64;

    /// `∂φ/∂y`, if known in closed form.
    fn age_derivative(&self, _state: usize, _age: f64) -> Option<f64> {
        None
    }
}

impl<F: Fn(usize, f64) -> f64 + Sync> RegimeFunction for F {
    fn value(&self, state: usize, age: f64) -> f64 {
        self(state, age)
    }
}

/// Default step for the central difference in age.
pub const AGE_FD_STEP: f64 = 1e-6;

fn age_derivative(phi: &dyn RegimeFunction, i: usize, y: f64, step: f64) -> f64 {
    if let Some(d) = phi.age_derivative(i, y) {
        return d;
    }
    if y >= step {
        (phi.value(i, y + step) - phi.value(i, y - step)) / (2.0 * step)
    } else {
        // second-order one-sided difference near the age origin
        (-3.0 * phi.value(i, y) + 4.0 * phi.value(i, y + step) - phi.value(i, y + 2.0 * step))
            / (2.0 * step)
    }
}

/// `Lφ(i, y) = ∂φ/∂y + h_i(y) Σ_{j≠i} p_ij [φ(j, 0) − φ(i, y)]`.
pub fn apply_generator_l(
    model: &RegimeModel,
    phi: &dyn RegimeFunction,
    i: usize,
    y: f64,
    fd_step: f64,
) -> Result<f64> {
    let drift = age_derivative(phi, i, y, fd_step);
    if !model.can_jump(i) {
        return Ok(drift);
    }
    let h = model.hazard_rate(i, y)?;
    let here = phi.value(i, y);
    let jump: f64 = (0..model.num_states())
        .filter(|&j| j != i)
        .map(|j| model.kernel(i, j) * (phi.value(j, 0.0) - here))
        .sum();
    Ok(drift + h * jump)
}

/// Result of a Dynkin-formula check.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RegimeDynkin {
    /// `E[φ(θ_T, Y_T)] − φ(θ_0, Y_0)`.
    pub lhs: Estimate,
    /// `E ∫_0^T Lφ(θ_s, Y_s) ds`.
    pub rhs: Estimate,
    /// Per-path difference `lhs − rhs`.
    pub gap: Estimate,
}

impl RegimeDynkin {
    pub fn passes(&self, k: f64) -> bool {
        self.gap.mean.abs() < k * self.gap.se.max(f64::MIN_POSITIVE)
    }
}

/// Trapezoidal `∫_0^T Lφ` along one path on a uniform grid with regime events
/// inserted; the right end of each step uses the pre-event left limit.
pub(crate) fn integrate_generator_along(
    model: &RegimeModel,
    phi: &dyn RegimeFunction,
    path: &RegimePath,
    dt: f64,
    fd_step: f64,
) -> Result<f64> {
    let horizon = path.horizon();
    let mut nodes: Vec<f64> = Vec::new();
    let n = (horizon / dt).round().max(1.0) as usize;
    let base: Vec<f64> = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
    let ev: Vec<f64> = path.events().iter().map(|e| e.time).collect();
    let (mut a, mut b) = (0, 0);
    while a < base.len() || b < ev.len() {
        let next = match (base.get(a), ev.get(b)) {
            (Some(&x), Some(&y)) if y < x => {
                b += 1;
                y
            }
            (Some(&x), Some(&y)) if y == x => {
                a += 1;
                b += 1;
                x
            }
            (Some(&x), _) => {
                a += 1;
                x
            }
            (None, Some(&y)) => {
                b += 1;
                y
            }
            (None, None) => unreachable!(),
        };
        nodes.push(next);
    }
    let mut total = 0.0;
    for w in nodes.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let s0 = path.state_at(t0);
        let s1 = path.state_before(t1);
        let f0 = apply_generator_l(model, phi, s0.theta, s0.age, fd_step)?;
        let f1 = apply_generator_l(model, phi, s1.theta, s1.age, fd_step)?;
        total += 0.5 * (f0 + f1) * (t1 - t0);
    }
    Ok(total)
}

/// Monte Carlo check of `E[φ(θ_T,Y_T)] − φ(θ_0,Y_0) = E ∫_0^T Lφ ds` with
/// renewal-sampled regime paths; path `k` uses stream `(seed, Regime, k)`.
pub fn regime_dynkin_check(
    model: &RegimeModel,
    phi: &dyn RegimeFunction,
    origin: RegimeState,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<RegimeDynkin> {
    let start = phi.value(origin.theta, origin.age);
    let per_path: Vec<(f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut rng = StreamRng::new(seed, Purpose::Regime, k as u64);
            let path = simulate_regime_direct(model, origin, horizon, &mut rng);
            let end = path.terminal();
            let integral = integrate_generator_along(model, phi, &path, dt, AGE_FD_STEP)?;
            Ok((phi.value(end.theta, end.age) - start, integral))
        })
        .collect::<Result<Vec<_>>>()?;
    let lhs: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    let rhs: Vec<f64> = per_path.iter().map(|p| p.1).collect();
    let gap: Vec<f64> = per_path.iter().map(|p| p.0 - p.1).collect();
    Ok(RegimeDynkin {
        lhs: Estimate::from_samples(&lhs),
        rhs: Estimate::from_samples(&rhs),
        gap: Estimate::from_samples(&gap),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semi_markov::HoldingDist;

    fn weibull2() -> RegimeModel {
        RegimeModel::two_state(
            HoldingDist::Weibull { shape: 2.0, scale: 1.0 },
            HoldingDist::Weibull { shape: 1.5, scale: 0.8 },
        )
        .unwrap()
    }

    #[test]
    fn constant_function_has_zero_generator() {
        let m = weibull2();
        let c = |_: usize, _: f64| 3.5;
        for (i, y) in [(0, 0.0), (1, 0.4), (0, 2.0)] {
            assert_eq!(apply_generator_l(&m, &c, i, y, AGE_FD_STEP).unwrap(), 0.0);
        }
    }

    #[test]
    fn identity_in_age() {
        // φ(i,y) = y, p_12 = 1: Lφ(1,y) = 1 − h(y)·y
        let m = weibull2();
        let phi = |_: usize, y: f64| y;
        for y in [0.0, 0.3, 1.1] {
            let want = 1.0 - m.hazard_rate(0, y).unwrap() * y;
            let got = apply_generator_l(&m, &phi, 0, y, AGE_FD_STEP).unwrap();
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn exponential_two_level_function() {
        let m = RegimeModel::two_state(
            HoldingDist::Exponential { rate: 2.0 },
            HoldingDist::Exponential { rate: 2.0 },
        )
        .unwrap();
        let phi = |i: usize, _: f64| if i == 0 { 1.0 } else { 3.0 };
        assert_eq!(apply_generator_l(&m, &phi, 0, 0.9, AGE_FD_STEP).unwrap(), 4.0);
    }

    #[test]
    fn exponential_generator_independent_of_age() {
        let m = RegimeModel::two_state(
            HoldingDist::Exponential { rate: 1.3 },
            HoldingDist::Exponential { rate: 0.4 },
        )
        .unwrap();
        let phi = |i: usize, _y: f64| (i as f64 + 1.0).ln() + 0.2;
        for i in 0..2 {
            let base = apply_generator_l(&m, &phi, i, 0.0, AGE_FD_STEP).unwrap();
            for k in 1..50 {
                let y = k as f64 * 0.1;
                let v = apply_generator_l(&m, &phi, i, y, AGE_FD_STEP).unwrap();
                assert!((v - base).abs() < 1e-9);
            }
        }
    }

    struct Analytic;
    impl RegimeFunction for Analytic {
        fn value(&self, i: usize, y: f64) -> f64 {
            (i as f64 + 1.0) * y.sin()
        }
        fn age_derivative(&self, i: usize, y: f64) -> Option<f64> {
            Some((i as f64 + 1.0) * y.cos())
        }
    }

    #[test]
    fn analytic_and_fd_derivatives_agree() {
        let m = weibull2();
        let fd = |i: usize, y: f64| (i as f64 + 1.0) * y.sin();
        for y in [0.0, 1e-7, 0.5, 1.5] {
            let a = apply_generator_l(&m, &Analytic, 1, y, AGE_FD_STEP).unwrap();
            let b = apply_generator_l(&m, &fd, 1, y, AGE_FD_STEP).unwrap();
            assert!((a - b).abs() < 1e-7, "{a} {b}");
        }
    }

    #[test]
    fn dynkin_small_sample() {
        let m = weibull2();
        let phi = |i: usize, y: f64| (-y).exp() * (1.0 + i as f64);
        let r = regime_dynkin_check(&m, &phi, RegimeState::new(0, 0.0), 1.0, 1e-2, 2000, 3)
            .unwrap();
        assert!(r.passes(3.0), "{r:?}");
    }
}
