use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use smjd::jump_diffusion::{ConstantPolicy, ControlSet, FnPolicy, MarkDist, MarkMeasure, ObjectiveSpec, ScalarDynamics, Scenario};
use smjd::maximum_principle::{
    adjoint_from_value, adjoint_residual_order, argmax_hamiltonian, dynkin_check, grad_x_hamiltonian, hjb_residual,
    AdjointState, ArgmaxMode, FnValue, ValueAdjoint, ValueFunction,
};
use smjd::semi_markov::{RegimeModel, RegimeSampler, RegimeState};

fn scalar(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn single(x0: f64, dt: f64) -> Scenario {
    Scenario {
        regime: RegimeModel::single_state(),
        sampler: RegimeSampler::Direct,
        origin: RegimeState::new(0, 0.0),
        x0: scalar(x0),
        horizon: 1.0,
        dt,
    }
}

/// b = a₀x + a₁ sin x + u, σ = c₀ + c₁ x u, g = e₀ γ x + e₁ cos x.
fn smooth_model(a: [f64; 2], c: [f64; 2], e: [f64; 2], analytic: bool) -> ScalarDynamics {
    let marks = MarkMeasure::new(1.5, MarkDist::Uniform { lo: -0.2, hi: 0.4 }).unwrap();
    let d = ScalarDynamics::frozen(marks)
        .with_drift(move |_, x, u, _| a[0] * x + a[1] * x.sin() + u)
        .with_vol(move |_, x, u, _| c[0] + c[1] * x * u)
        .with_jump(move |_, x, _, _, g| e[0] * g * x + e[1] * x.cos());
    if analytic {
        d.with_x_derivatives(
            move |_, x, _, _| a[0] + a[1] * x.cos(),
            move |_, _, u, _| c[1] * u,
            move |_, x, _, _, g| e[0] * g - e[1] * x.sin(),
        )
    } else {
        d
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn analytic_gradient_matches_central_differences(
        a0 in -1.0f64..1.0, a1 in -1.0f64..1.0, c0 in 0.1f64..0.5, c1 in -0.5f64..0.5,
        e0 in -0.5f64..0.5, e1 in -0.5f64..0.5,
        x in 0.2f64..2.0, u in -1.0f64..1.0, p in -2.0f64..2.0, q in -1.0f64..1.0,
    ) {
        let exact = smooth_model([a0, a1], [c0, c1], [e0, e1], true);
        let fd = smooth_model([a0, a1], [c0, c1], [e0, e1], false);
        let obj = ObjectiveSpec::new(|_, x, u, _, _| -x[0] * x[0] * u[0], |_, _, _| 0.0)
            .with_running_gradient(|_, x, u, _, _| DVector::from_element(1, -2.0 * x[0] * u[0]));
        let mut adj = AdjointState::diffusive(scalar(p), DMatrix::from_element(1, 1, q), 1);
        adj.eta = Some(Arc::new(move |g| DVector::from_element(1, 0.3 * g * p)));
        let ga = grad_x_hamiltonian(&exact, &obj, 0.2, &scalar(x), &scalar(u), 0, 0.0, &adj)[0];
        let gf = grad_x_hamiltonian(&fd, &obj, 0.2, &scalar(x), &scalar(u), 0, 0.0, &adj)[0];
        prop_assert!((ga - gf).abs() <= 1e-6 * (1.0 + ga.abs()), "{} vs {}", ga, gf);
    }

    #[test]
    fn concave_quadratic_argmax_is_vertex(k in 0.1f64..5.0, s in -3.0f64..3.0, x in 0.5f64..2.0) {
        // H = −k u² + s x u: vertex s x / (2k)
        let d = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(move |_, x, u, _| s * x * u);
        let obj = ObjectiveSpec::new(move |_, _, u, _, _| -k * u[0] * u[0], |_, _, _| 0.0);
        let adj = AdjointState::diffusive(scalar(1.0), DMatrix::zeros(1, 1), 1);
        let vertex = s * x / (2.0 * k);
        let a = argmax_hamiltonian(&d, &obj, 0.0, &scalar(x), 0, 0.0, &adj, &ControlSet::Unbounded, ArgmaxMode::Strict).unwrap();
        prop_assert!((a.u[0] - vertex).abs() < 1e-8);
        let b = argmax_hamiltonian(&d, &obj, 0.0, &scalar(x), 0, 0.0, &adj, &ControlSet::interval(-10.0, 10.0), ArgmaxMode::Strict).unwrap();
        prop_assert!((b.u[0] - vertex).abs() < 1e-8, "{:?} vs {}", b, vertex);
    }
}

fn deterministic_value(r: f64, d: f64, horizon: f64) -> FnValue {
    let e = move |t: f64| (r * (horizon - t)).exp();
    FnValue::new(move |t, x, _, _| -(x[0] * e(t) - d).powi(2))
        .with_gradient(move |t, x, _, _| scalar(-2.0 * (x[0] * e(t) - d) * e(t)))
        .with_hessian(move |t, _, _, _| DMatrix::from_element(1, 1, -2.0 * e(t) * e(t)))
        .with_time_derivative(move |t, x, _, _| 2.0 * (x[0] * e(t) - d) * x[0] * r * e(t))
        .with_age_derivative(|_, _, _, _| 0.0)
}

#[test]
fn value_induced_adjoint_solves_adjoint_equation() {
    let (r, d) = (0.05, 1.0);
    let dynamics = Arc::new(ScalarDynamics::frozen(MarkMeasure::none()).with_drift(move |_, x, _, _| r * x));
    let obj = ObjectiveSpec::terminal_only(move |x, _, _| -(x[0] - d).powi(2))
        .with_terminal_gradient(move |x, _, _| scalar(-2.0 * (x[0] - d)));
    let v = Arc::new(deterministic_value(r, d, 1.0));
    let adj = ValueAdjoint::new(v, dynamics.clone(), RegimeModel::single_state());
    let policy = ConstantPolicy(scalar(0.0));
    let order = adjoint_residual_order(dynamics.as_ref(), &policy, &obj, &adj, &single(0.7, 1.0), 4e-3, 3, 2, 1).unwrap();
    assert!(order.terminal_mismatch_max() < 1e-12, "{order:?}");
    assert!(order.ratios_within(0.0, 0.65), "{order:?}");

    let path = single(0.7, 1e-2).simulate(dynamics.as_ref(), &policy, 0, 0).unwrap();
    let along = adjoint_from_value(&adj, &path).unwrap();
    assert_eq!(along.len(), path.len());
    assert!(along.iter().all(|a| a.eta.is_none() && a.q[(0, 0)] == 0.0));
}

#[test]
fn hjb_solution_has_zero_dynkin_gap() {
    // power utility with a single regime: V = x^γ/γ · exp(κ(T − t))
    let (r, mu, sigma, gamma) = (0.05, 0.12, 0.25, 0.5);
    let m = (mu - r) / sigma;
    let kappa = gamma * (r + m * m / (2.0 * (1.0 - gamma)));
    let e = move |t: f64| (kappa * (1.0 - t)).exp();
    let v = FnValue::new(move |t, x, _, _| x[0].powf(gamma) / gamma * e(t))
        .with_gradient(move |t, x, _, _| scalar(x[0].powf(gamma - 1.0) * e(t)))
        .with_hessian(move |t, x, _, _| DMatrix::from_element(1, 1, (gamma - 1.0) * x[0].powf(gamma - 2.0) * e(t)))
        .with_time_derivative(move |t, x, _, _| -kappa * x[0].powf(gamma) / gamma * e(t))
        .with_age_derivative(|_, _, _, _| 0.0);
    let dynamics = ScalarDynamics::frozen(MarkMeasure::none())
        .with_drift(move |_, x, u, _| r * x + u * (mu - r))
        .with_vol(move |_, _, u, _| u * sigma);
    let obj = ObjectiveSpec::terminal_only(move |x, _, _| x[0].powf(gamma) / gamma);
    let model = RegimeModel::single_state();
    for &t in &[0.0, 0.5] {
        for &x in &[0.5, 1.0, 2.0] {
            let h = hjb_residual(&v, &obj, &dynamics, &model, 1.0, t, &scalar(x), 0, 0.0, &ControlSet::Unbounded, ArgmaxMode::Strict)
                .unwrap();
            assert!(h.residual.abs() < 1e-8, "{h:?}");
            assert!((h.u[0] - m * x / ((1.0 - gamma) * sigma)).abs() < 1e-6);
        }
    }
    let policy = FnPolicy::new(move |_, x: &DVector<f64>, _, _| x * (m / ((1.0 - gamma) * sigma)));
    let rep = dynkin_check(&v, &dynamics, &policy, &single(1.0, 1e-3), 10_000, 17).unwrap();
    assert!(rep.passes(3.0), "{rep:?}");
    assert!(v.value(1.0, &scalar(1.3), 0, 0.0) == obj.terminal(&scalar(1.3), 0, 0.0));
}

#[test]
fn linear_value_dynkin() {
    let v = FnValue::new(|_, x, _, _| x[0]);
    let dynamics = ScalarDynamics::frozen(MarkMeasure::point(2.0, 0.1).unwrap())
        .with_drift(|_, x, _, _| 0.3 * x)
        .with_vol(|_, x, _, _| 0.2 * x)
        .with_jump(|_, x, _, _, g| g * x);
    let rep = dynkin_check(&v, &dynamics, &ConstantPolicy(scalar(0.0)), &single(1.0, 1e-3), 10_000, 2).unwrap();
    assert!(rep.passes(3.0), "{rep:?}");
    let constant = FnValue::new(|_, _, _, _| 3.0);
    let rep = dynkin_check(&constant, &dynamics, &ConstantPolicy(scalar(0.0)), &single(1.0, 1e-2), 100, 2).unwrap();
    assert_eq!(rep.lhs.mean, 0.0);
    assert_eq!(rep.rhs.mean, 0.0);
}
