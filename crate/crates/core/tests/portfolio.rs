use std::sync::Arc;

use smjd::jump_diffusion::{MarkDist, MarkMeasure};
use smjd::maximum_principle::adjoint_residual_order;
use smjd::portfolio::{
    ql_phi_psi, rs_phi, rs_phi_functional, ExampleProblem, FixedPointOptions, FunctionalGrid, LambdaForm,
    PhiVariant, QuadraticLossModel, RiskSensitiveModel,
};
use smjd::semi_markov::{HoldingDist, RegimeModel, RegimeSampler};

fn two_exponential(a: f64, b: f64) -> RegimeModel {
    RegimeModel::two_state(HoldingDist::Exponential { rate: a }, HoldingDist::Exponential { rate: b }).unwrap()
}

/// Backward RK4 for `v' = f(t, v)` on `[t0, T]` from `v(T) = v_T`.
fn backward_rk4(f: impl Fn(f64, &[f64]) -> Vec<f64>, v_t: Vec<f64>, t0: f64, horizon: f64, steps: usize) -> Vec<f64> {
    let h = (horizon - t0) / steps as f64;
    let mut v = v_t;
    let axpy = |v: &[f64], k: &[f64], s: f64| v.iter().zip(k).map(|(a, b)| a + s * b).collect::<Vec<_>>();
    for n in 0..steps {
        let t = horizon - n as f64 * h;
        let k1 = f(t, &v);
        let k2 = f(t - h / 2.0, &axpy(&v, &k1, -h / 2.0));
        let k3 = f(t - h / 2.0, &axpy(&v, &k2, -h / 2.0));
        let k4 = f(t - h, &axpy(&v, &k3, -h));
        v = v
            .iter()
            .enumerate()
            .map(|(i, x)| x - h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
    }
    v
}

#[test]
fn rs_phi_matches_method_of_lines() {
    let m = RiskSensitiveModel::new(vec![0.05, 0.02], vec![0.13, 0.08], vec![0.2, 0.3], 0.5, 1.0).unwrap();
    let (h0, h1) = (1.5, 0.7);
    let regime = two_exponential(h0, h1);
    let a = [m.phi_rate(0), m.phi_rate(1)];
    let h = [h0, h1];
    // φ_t + a_i + h_i (φ_j − φ_i) = 0
    let ode = backward_rk4(|_, v| (0..2).map(|i| -a[i] - h[i] * (v[1 - i] - v[i])).collect(), vec![0.0, 0.0], 0.0, 1.0, 2000);
    for i in 0..2 {
        let e = rs_phi(&m, &regime, RegimeSampler::Direct, 0.0, i, 0.0, 20_000, 5, PhiVariant::Integral).unwrap();
        assert!((e.mean - ode[i]).abs() < 3.0 * e.se, "regime {i}: {e:?} vs {}", ode[i]);
    }
}

#[test]
fn ql_fixed_point_matches_method_of_lines() {
    let marks = MarkMeasure::new(1.0, MarkDist::Uniform { lo: -0.2, hi: 0.3 }).unwrap();
    let m = QuadraticLossModel::with_scaled_marks(
        vec![0.05, 0.02],
        vec![0.4, 0.25],
        vec![0.2, 0.3],
        marks,
        vec![1.0, 0.5],
        1.0,
        1.0,
    )
    .unwrap()
    .with_lambda_form(LambdaForm::AsPrinted);
    let (h0, h1) = (1.2, 0.8);
    let regime = two_exponential(h0, h1);
    let f = ql_phi_psi(&m, &regime, RegimeSampler::Direct, &FunctionalGrid::new(51, 1), 4_000, 11, &FixedPointOptions::default())
        .unwrap();
    assert!(f.iterations > 1, "{:?}", f.trace);

    let h = [h0, h1];
    let ratio = |i: usize, phi: f64| {
        let (g1, g2) = m.jump_moments(i);
        let tilde = -m.market_price(i) * m.sigma(i) + g1;
        tilde * tilde / (m.sigma(i).powi(2) + phi * g2)
    };
    // state (φ_0, φ_1, ψ_0, ψ_1)
    let ode = backward_rk4(
        |_, v| {
            let mut out = vec![0.0; 4];
            for i in 0..2 {
                let rho = ratio(i, v[i]);
                out[i] = -(2.0 * m.r(i) - rho) * v[i] - h[i] * (v[1 - i] - v[i]);
                out[2 + i] = -(m.r(i) - rho) * v[2 + i] - h[i] * (v[3 - i] - v[2 + i]);
            }
            out
        },
        vec![-2.0, -2.0, 2.0, 2.0],
        0.0,
        1.0,
        2000,
    );
    for i in 0..2 {
        let phi = f.phi.node(0, i, 0);
        let psi = f.psi.node(0, i, 0);
        // statistical error plus the bias of the gridded iterate
        assert!((phi.mean - ode[i]).abs() < 3.0 * phi.se + 2e-4, "φ_{i}: {phi:?} vs {}", ode[i]);
        assert!((psi.mean - ode[2 + i]).abs() < 3.0 * psi.se + 2e-4, "ψ_{i}: {psi:?} vs {}", ode[2 + i]);
    }
}

#[test]
fn exponential_holding_makes_functionals_age_free() {
    let m = RiskSensitiveModel::new(vec![0.05, 0.02], vec![0.13, 0.08], vec![0.2, 0.3], 0.5, 1.0).unwrap();
    let phi = rs_phi_functional(
        &m,
        &two_exponential(1.0, 2.0),
        RegimeSampler::Direct,
        &FunctionalGrid::new(11, 6).full_ages(),
        2_000,
        3,
        PhiVariant::Integral,
    )
    .unwrap();
    assert_eq!(phi.ages().len(), 6);
    let (spread, se) = phi.age_variation();
    assert!(spread <= 3.0 * se, "{spread} vs {se}");
}

fn rs_problem(dt: f64) -> ExampleProblem {
    let m = RiskSensitiveModel::new(vec![0.05, 0.02], vec![0.13, 0.08], vec![0.2, 0.3], 0.5, 1.0).unwrap();
    let regime = RegimeModel::two_state(
        HoldingDist::Weibull { shape: 1.5, scale: 0.8 },
        HoldingDist::Weibull { shape: 2.0, scale: 1.2 },
    )
    .unwrap();
    let phi = rs_phi_functional(&m, &regime, RegimeSampler::Direct, &FunctionalGrid::new(21, 11), 500, 1, PhiVariant::Integral)
        .unwrap();
    ExampleProblem::risk_sensitive(m, regime, RegimeSampler::Direct, 1.0, dt, Arc::new(phi))
}

#[test]
fn rs_adjoint_residual_halves() {
    let p = rs_problem(1e-3);
    let order = adjoint_residual_order(
        p.dynamics.as_ref(),
        p.candidate().as_ref(),
        &p.objective,
        p.adjoint.as_ref(),
        &p.scenario,
        4e-3,
        3,
        300,
        2,
    )
    .unwrap();
    assert!(order.ratios_within(0.35, 0.65), "{:?}", order.ratios);
    assert_eq!(order.terminal_mismatch_max(), 0.0);
}

#[test]
fn ql_wealth_stays_positive_under_candidate() {
    let marks = MarkMeasure::new(1.0, MarkDist::Uniform { lo: -0.2, hi: 0.3 }).unwrap();
    let m = QuadraticLossModel::with_scaled_marks(vec![0.05, 0.02], vec![0.4, 0.25], vec![0.2, 0.3], marks, vec![1.0, 0.5], 1.2, 1.0)
        .unwrap();
    let regime = two_exponential(1.0, 1.0);
    let f = ql_phi_psi(&m, &regime, RegimeSampler::Direct, &FunctionalGrid::new(21, 1), 500, 0, &FixedPointOptions::default())
        .unwrap();
    let p = ExampleProblem::quadratic_loss(m, regime, RegimeSampler::Direct, 1.0, 5e-3, Arc::new(f));
    let policy = p.candidate();
    for k in 0..300 {
        let path = p.scenario.simulate(p.dynamics.as_ref(), policy.as_ref(), 9, k).unwrap();
        assert!(path.x.iter().all(|x| x[0] > 0.0), "path {k}");
        let adj = p.adjoint.adjoint(1.0, path.terminal_state(), path.u.last().unwrap(), 0, 0.0).unwrap();
        let x = path.terminal_state()[0];
        assert_eq!(adj.p[0], -2.0 * x + 2.0 * 1.2);
    }
}

#[test]
fn ql_adjoint_residual_halves() {
    let marks = MarkMeasure::new(1.0, MarkDist::Uniform { lo: -0.2, hi: 0.3 }).unwrap();
    let m = QuadraticLossModel::with_scaled_marks(vec![0.05, 0.02], vec![0.4, 0.25], vec![0.2, 0.3], marks, vec![1.0, 0.5], 1.2, 1.0)
        .unwrap();
    let regime = RegimeModel::two_state(
        HoldingDist::Weibull { shape: 1.5, scale: 0.8 },
        HoldingDist::Weibull { shape: 2.0, scale: 1.2 },
    )
    .unwrap();
    let f = ql_phi_psi(&m, &regime, RegimeSampler::Direct, &FunctionalGrid::new(21, 11), 500, 0, &FixedPointOptions::default())
        .unwrap();
    let p = ExampleProblem::quadratic_loss(m, regime, RegimeSampler::Direct, 1.0, 1e-3, Arc::new(f));
    let order = adjoint_residual_order(
        p.dynamics.as_ref(),
        p.candidate().as_ref(),
        &p.objective,
        p.adjoint.as_ref(),
        &p.scenario,
        4e-3,
        3,
        300,
        2,
    )
    .unwrap();
    assert!(order.ratios_within(0.35, 0.65), "{:?}", order.ratios);
    assert!(order.terminal_mismatch_max() < 1e-12);
}
