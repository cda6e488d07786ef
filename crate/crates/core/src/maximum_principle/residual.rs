use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{grad_x_hamiltonian, AdjointField, AdjointState};
use crate::error::{Error, Result};
use crate::jump_diffusion::{
    simulate_with_noise, ControlPolicy, ControlledDynamics, ObjectiveSpec, PathNoise, SamplePath, Scenario,
};
use crate::semi_markov::RegimeModel;
use crate::stats::{pairwise_sum, Estimate};

/// Residual statistics of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResidual {
    pub steps: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// `Σ_k R_k / T`, an estimate of the drift error of the candidate.
    pub drift_bias: Vec<f64>,
    pub terminal_mismatch: f64,
}

/// `Σ_j h_i(y) p_ij η̃_j`, the regime compensator density.
fn regime_compensator(model: &RegimeModel, i: usize, y: f64, adj: &AdjointState) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(adj.p.len());
    if !model.can_jump(i) {
        return Ok(out);
    }
    let h = model.hazard_rate(i, y)?;
    if h == 0.0 {
        return Ok(out);
    }
    for j in 0..model.num_states() {
        let pij = model.kernel(i, j);
        if pij > 0.0 {
            out.axpy(h * pij, &adj.eta_tilde_at(j), 1.0);
        }
    }
    Ok(out)
}

/// Discrete adjoint residuals along one path:
///
/// ```text
/// R_k = p_{k+1} − p_k + ∇ₓH_k Δt − q_k ΔW_k − λ∫η_k dπ Δt − Σ_j h_i p_ij η̃_{k,j} Δt
///       − η⁻_{k+1}(γ) 1{asset jump} − η̃⁻_{k+1,j} 1{switch to j}
/// ```
///
/// Node adjoints are taken at right limits; the jump terms use the adjoint
/// at the left limit of the event node.
pub fn adjoint_residual_path(
    path: &SamplePath,
    adj: &dyn AdjointField,
    dynamics: &dyn ControlledDynamics,
    objective: &ObjectiveSpec,
    model: &RegimeModel,
) -> Result<PathResidual> {
    let n = path.len();
    if n < 2 {
        return Err(Error::InvalidArgument("path has no steps".into()));
    }
    let r = dynamics.dim();
    let marks = dynamics.marks();
    let at = |k: usize| adj.adjoint(path.times[k], &path.x[k], &path.u[k], path.theta[k], path.age[k]);
    let check = |a: &AdjointState, k: usize| -> Result<()> {
        if a.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinitePath {
                path: Some(path.index),
                time: path.times[k],
                detail: "adjoint is not finite".into(),
            })
        }
    };

    let mut cur = at(0)?;
    check(&cur, 0)?;
    let mut sum_abs = Vec::with_capacity(n - 1);
    let mut max_abs: f64 = 0.0;
    let mut total = DVector::zeros(r);
    for k in 0..n - 1 {
        let (t, x, u, i, y) = (path.times[k], &path.x[k], &path.u[k], path.theta[k], path.age[k]);
        let dt = path.times[k + 1] - t;
        let next = at(k + 1)?;
        check(&next, k + 1)?;

        let mut res = &next.p - &cur.p;
        res.axpy(dt, &grad_x_hamiltonian(dynamics, objective, t, x, u, i, y, &cur), 1.0);
        res.gemv(-1.0, &cur.q, &path.dw[k], 1.0);
        if marks.has_jumps() && cur.eta.is_some() {
            let comp = marks.integrate_vec(r, |m| cur.eta_at(m));
            res.axpy(-marks.rate() * dt, &comp, 1.0);
        }
        res.axpy(-dt, &regime_compensator(model, i, y, &cur)?, 1.0);

        if let Some(e) = path.event_at(k + 1) {
            let left = adj.adjoint(e.time, &e.x_minus, &e.u_minus, e.theta_minus, e.age_minus)?;
            check(&left, k + 1)?;
            if let Some(m) = e.mark {
                res -= left.eta_at(m);
            }
            if let Some((_, to)) = e.regime {
                res -= left.eta_tilde_at(to);
            }
        }
        let a = res.norm();
        sum_abs.push(a);
        max_abs = max_abs.max(a);
        total += &res;
        cur = next;
    }
    let last = n - 1;
    let grad_f2 = objective.terminal_gradient(&path.x[last], path.theta[last], path.age[last]);
    let horizon = path.times[last] - path.times[0];
    Ok(PathResidual {
        steps: n - 1,
        mean_abs: pairwise_sum(&sum_abs) / (n - 1) as f64,
        max_abs,
        drift_bias: (total / horizon).as_slice().to_vec(),
        terminal_mismatch: (&cur.p - grad_f2).norm(),
    })
}

/// Ensemble residual statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub dt: f64,
    pub n_paths: usize,
    /// Per-step mean `‖R_k‖`, averaged over paths.
    pub mean_abs: Estimate,
    pub max_abs: f64,
    pub drift_bias: Vec<Estimate>,
    pub terminal_mismatch_max: f64,
}

fn summarize(dt: f64, rows: &[PathResidual]) -> ResidualReport {
    let r = rows.first().map_or(0, |p| p.drift_bias.len());
    let means: Vec<f64> = rows.iter().map(|p| p.mean_abs).collect();
    ResidualReport {
        dt,
        n_paths: rows.len(),
        mean_abs: Estimate::from_samples(&means),
        max_abs: rows.iter().fold(0.0, |m, p| m.max(p.max_abs)),
        drift_bias: (0..r)
            .map(|l| Estimate::from_samples(&rows.iter().map(|p| p.drift_bias[l]).collect::<Vec<_>>()))
            .collect(),
        terminal_mismatch_max: rows.iter().fold(0.0, |m, p| m.max(p.terminal_mismatch)),
    }
}

fn residual_on_noise(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    objective: &ObjectiveSpec,
    adj: &dyn AdjointField,
    model: &RegimeModel,
    noise: &PathNoise,
    x0: &DVector<f64>,
) -> Result<PathResidual> {
    let path = simulate_with_noise(dynamics, policy, noise, x0)?;
    adjoint_residual_path(&path, adj, dynamics, objective, model)
}

/// Residual statistics over `n_paths` simulated under `policy`.
pub fn adjoint_residual(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    objective: &ObjectiveSpec,
    adj: &dyn AdjointField,
    scenario: &Scenario,
    n_paths: usize,
    seed: u64,
) -> Result<ResidualReport> {
    let rows: Vec<PathResidual> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let noise = scenario.noise(dynamics.marks(), dynamics.dim(), seed, k)?;
            residual_on_noise(dynamics, policy, objective, adj, &scenario.regime, &noise, &scenario.x0)
        })
        .collect::<Result<_>>()?;
    Ok(summarize(scenario.dt, &rows))
}

/// Residuals on a ladder of steps, each twice the next, all driven by the
/// same noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualOrder {
    pub levels: Vec<ResidualReport>,
    /// `mean_abs(Δt/2) / mean_abs(Δt)` for consecutive levels.
    pub ratios: Vec<f64>,
}

impl ResidualOrder {
    pub fn ratios_within(&self, lo: f64, hi: f64) -> bool {
        !self.ratios.is_empty() && self.ratios.iter().all(|r| (lo..=hi).contains(r))
    }

    pub fn terminal_mismatch_max(&self) -> f64 {
        self.levels.iter().fold(0.0, |m, l| m.max(l.terminal_mismatch_max))
    }
}

/// Runs the residual at `coarsest`, `coarsest/2`, … (`levels` steps). The
/// finest noise is generated once per path and coarsened for the others.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_residual_order(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    objective: &ObjectiveSpec,
    adj: &dyn AdjointField,
    scenario: &Scenario,
    coarsest: f64,
    levels: usize,
    n_paths: usize,
    seed: u64,
) -> Result<ResidualOrder> {
    if levels < 2 {
        return Err(Error::InvalidArgument("need at least two levels".into()));
    }
    let finest = coarsest / f64::powi(2.0, levels as i32 - 1);
    let fine = Scenario {
        dt: finest,
        ..scenario.clone()
    };
    let per_path: Vec<Vec<PathResidual>> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut noise = fine.noise(dynamics.marks(), dynamics.dim(), seed, k)?;
            let mut rows = Vec::with_capacity(levels);
            for level in 0..levels {
                if level > 0 {
                    noise = noise.coarsen();
                }
                rows.push(residual_on_noise(dynamics, policy, objective, adj, &scenario.regime, &noise, &scenario.x0)?);
            }
            rows.reverse();
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let reports: Vec<ResidualReport> = (0..levels)
        .map(|l| {
            let rows: Vec<PathResidual> = per_path.iter().map(|p| p[l].clone()).collect();
            summarize(coarsest / f64::powi(2.0, l as i32), &rows)
        })
        .collect();
    let ratios = reports.windows(2).map(|w| w[1].mean_abs.mean / w[0].mean_abs.mean).collect();
    Ok(ResidualOrder {
        levels: reports,
        ratios,
    })
}

/// One of the four integrability conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    /// 1 to 4.
    pub condition: usize,
    pub estimate: Estimate,
    /// Means over the first quarter, half and all of the paths.
    pub nested_means: [f64; 3],
    pub finite: bool,
    pub diverging: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityReport {
    pub n_paths: usize,
    /// Paths on which either control stopped early.
    pub truncated_paths: usize,
    pub conditions: Vec<ConditionRecord>,
}

impl IntegrabilityReport {
    pub fn failed(&self) -> Vec<usize> {
        self.conditions.iter().filter(|c| !c.pass).map(|c| c.condition).collect()
    }

    pub fn all_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }
}

/// Integrand magnitude treated as a blow-up on a truncated path.
const BLOWUP: f64 = 1e100;

/// Time integrals of the four condition integrands for one coupled pair.
#[allow(clippy::too_many_arguments)]
fn condition_integrals(
    hat: &SamplePath,
    other: &SamplePath,
    truncated: bool,
    adj: &dyn AdjointField,
    dynamics: &dyn ControlledDynamics,
    model: &RegimeModel,
) -> Result<[f64; 4]> {
    let marks = dynamics.marks();
    let n = hat.len().min(other.len());
    let mut acc = [0.0; 4];
    let mut peak = [0.0f64; 4];
    for k in 0..n.saturating_sub(1) {
        let (t, i, y) = (hat.times[k], hat.theta[k], hat.age[k]);
        let dt = hat.times[k + 1] - t;
        let (xh, uh, x, u) = (&hat.x[k], &hat.u[k], &other.x[k], &other.u[k]);
        let a = adj.adjoint(t, xh, uh, i, y)?;
        let dx = xh - x;
        let ds = dynamics.vol(t, xh, uh, i) - dynamics.vol(t, x, u, i);
        let f = [
            (ds.transpose() * &a.p).norm_squared(),
            (a.q.transpose() * &dx).norm_squared(),
            if marks.has_jumps() {
                marks.rate() * marks.integrate(|m| dx.dot(&a.eta_at(m)).powi(2))
            } else {
                0.0
            },
            if model.can_jump(i) {
                let h = model.hazard_rate(i, y)?;
                (0..model.num_states())
                    .map(|j| h * model.kernel(i, j) * dx.dot(&a.eta_tilde_at(j)).powi(2))
                    .sum()
            } else {
                0.0
            },
        ];
        for c in 0..4 {
            let v = if f[c].is_finite() { f[c] } else { f64::INFINITY };
            acc[c] += v * dt;
            peak[c] = peak[c].max(v);
        }
    }
    if truncated {
        for c in 0..4 {
            if peak[c] > BLOWUP {
                acc[c] = f64::INFINITY;
            }
        }
    }
    Ok(acc)
}

fn nested(values: &[f64]) -> [f64; 3] {
    let n = values.len();
    let m = |k: usize| {
        let k = k.max(1).min(n);
        pairwise_sum(&values[..k]) / k as f64
    };
    [m(n / 4), m(n / 2), m(n)]
}

/// Monte Carlo estimates of
///
/// ```text
/// (1) E∫‖(σ̂ − σ)'p̂‖² dt          (2) E∫‖q̂'(X̂ − X)‖² dt
/// (3) E∫λ∫((X̂ − X)'η̂)² dπ dt     (4) E∫Σ_j h_i p_ij ((X̂ − X)'η̃_j)² dt
/// ```
///
/// with `X̂` under `candidate` and `X` under `comparison`, both on the same
/// noise. A condition fails when an estimate is not finite or its running
/// mean keeps growing with the path count.
#[allow(clippy::too_many_arguments)]
pub fn integrability_report(
    dynamics: &dyn ControlledDynamics,
    candidate: &dyn ControlPolicy,
    comparison: &dyn ControlPolicy,
    adj: &dyn AdjointField,
    scenario: &Scenario,
    n_paths: usize,
    seed: u64,
) -> Result<IntegrabilityReport> {
    if n_paths < 4 {
        return Err(Error::InvalidArgument("need at least 4 paths".into()));
    }
    let rows: Vec<([f64; 4], bool)> = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let noise = scenario.noise(dynamics.marks(), dynamics.dim(), seed, k)?;
            let (hat, t1) = match simulate_with_noise(dynamics, candidate, &noise, &scenario.x0) {
                Ok(p) => (p, false),
                Err(t) => (t.path, true),
            };
            let (other, t2) = match simulate_with_noise(dynamics, comparison, &noise, &scenario.x0) {
                Ok(p) => (p, false),
                Err(t) => (t.path, true),
            };
            let vals = condition_integrals(&hat, &other, t1 || t2, adj, dynamics, &scenario.regime)?;
            Ok((vals, t1 || t2))
        })
        .collect::<Result<_>>()?;
    let conditions = (0..4)
        .map(|c| {
            let values: Vec<f64> = rows.iter().map(|r| r.0[c]).collect();
            let finite = values.iter().all(|v| v.is_finite());
            let nested_means = nested(&values);
            let [a, b, m] = nested_means;
            let diverging = finite && a < b && b < m && m > 4.0 * a + 1e-300;
            ConditionRecord {
                condition: c + 1,
                estimate: Estimate::from_samples(&values),
                nested_means,
                finite,
                diverging,
                pass: finite && !diverging,
            }
        })
        .collect();
    Ok(IntegrabilityReport {
        n_paths,
        truncated_paths: rows.iter().filter(|r| r.1).count(),
        conditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump_diffusion::{ConstantPolicy, FnPolicy, MarkMeasure, ScalarDynamics};
    use crate::semi_markov::{RegimeSampler, RegimeState};
    use nalgebra::DMatrix;

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

    #[test]
    fn exponential_adjoint_residual_is_first_order() {
        // dp = −r p dt, p(T) = 1 from f₂ = x
        let r = 0.05;
        let dynamics = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(move |_, x, _, _| r * x);
        let obj = ObjectiveSpec::terminal_only(|x, _, _| x[0]).with_terminal_gradient(|_, _, _| DVector::from_element(1, 1.0));
        let adj = move |t: f64, _: &DVector<f64>, _: &DVector<f64>, _: usize, _: f64| {
            Ok(AdjointState::diffusive(
                DVector::from_element(1, (r * (1.0 - t)).exp()),
                DMatrix::zeros(1, 1),
                1,
            ))
        };
        let policy = ConstantPolicy(DVector::zeros(1));
        let order = adjoint_residual_order(&dynamics, &policy, &obj, &adj, &scenario(1.0), 4e-3, 3, 4, 1).unwrap();
        assert!(order.terminal_mismatch_max() < 1e-15);
        for ratio in &order.ratios {
            assert!((ratio - 0.25).abs() < 0.01, "{order:?}");
        }
    }

    #[test]
    fn identical_controls_zero_conditions() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::point(1.0, 0.1).unwrap())
            .with_drift(|_, x, u, _| 0.05 * x + u)
            .with_vol(|_, _, u, _| 0.2 * u)
            .with_jump(|_, x, _, _, g| g * x);
        let adj = |_: f64, x: &DVector<f64>, _: &DVector<f64>, _: usize, _: f64| {
            Ok(AdjointState::diffusive(x.clone(), DMatrix::from_element(1, 1, 0.3), 1))
        };
        let policy = FnPolicy::new(|_, x: &DVector<f64>, _, _| x * 0.5);
        let rep = integrability_report(&dynamics, &policy, &policy, &adj, &scenario(1e-2), 64, 3).unwrap();
        for c in &rep.conditions {
            assert_eq!(c.estimate.mean, 0.0);
            assert!(c.pass);
        }
    }

    #[test]
    fn exploding_model_reports_failing_condition() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::none())
            .with_drift(|_, x, u, _| x * x + u)
            .with_vol(|_, _, u, _| u);
        let adj = |_: f64, _: &DVector<f64>, _: &DVector<f64>, _: usize, _: f64| {
            Ok(AdjointState::diffusive(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0), 1))
        };
        let candidate = ConstantPolicy(DVector::zeros(1));
        let other = ConstantPolicy(DVector::from_element(1, 0.1));
        let sc = Scenario {
            horizon: 2.0,
            ..scenario(1e-2)
        };
        let rep = integrability_report(&dynamics, &candidate, &other, &adj, &sc, 16, 5).unwrap();
        assert!(rep.truncated_paths > 0);
        assert_eq!(rep.failed(), vec![2], "{rep:?}");
    }
}
