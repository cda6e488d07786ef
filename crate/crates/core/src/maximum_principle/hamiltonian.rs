use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::AdjointState;
use crate::error::{Error, Result};
use crate::jump_diffusion::{central_gradient, ControlSet, ControlledDynamics, ObjectiveSpec};

/// `H(t, x, u, i, y, p, q, η)`.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    dynamics: &dyn ControlledDynamics,
    objective: &ObjectiveSpec,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    regime: usize,
    age: f64,
    adj: &AdjointState,
) -> f64 {
    let b = dynamics.drift(t, x, u, regime);
    let s = dynamics.vol(t, x, u, regime);
    let mut h = objective.running(t, x, u, regime, age) + b.dot(&adj.p) + s.component_mul(&adj.q).sum();
    let marks = dynamics.marks();
    if marks.has_jumps() {
        h += marks.rate()
            * marks.integrate(|m| {
                let g = dynamics.jump(t, x, u, regime, m);
                g.dot(&adj.p) + g.dot(&adj.eta_at(m))
            });
    }
    h
}

/// `∇ₓH` with the adjoint held fixed. Assembled from the analytic
/// coefficient derivatives when the dynamics supply all of them, otherwise
/// by central differences of `H`.
#[allow(clippy::too_many_arguments)]
pub fn grad_x_hamiltonian(
    dynamics: &dyn ControlledDynamics,
    objective: &ObjectiveSpec,
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    regime: usize,
    age: f64,
    adj: &AdjointState,
) -> DVector<f64> {
    let marks = dynamics.marks();
    let jac_b = dynamics.drift_jacobian(t, x, u, regime);
    let dsig = dynamics.vol_derivatives(t, x, u, regime);
    let has_jump_jac = !marks.has_jumps() || dynamics.jump_jacobian(t, x, u, regime, 0.0).is_some();
    match (jac_b, dsig) {
        (Some(jb), Some(ds)) if has_jump_jac => {
            let mut grad = objective.running_gradient(t, x, u, regime, age);
            grad.gemv_tr(1.0, &jb, &adj.p, 1.0);
            for (l, d) in ds.iter().enumerate() {
                grad[l] += d.component_mul(&adj.q).sum();
            }
            if marks.has_jumps() {
                let r = x.len();
                grad += marks.integrate_vec(r, |m| {
                    let jg = dynamics
                        .jump_jacobian(t, x, u, regime, m)
                        .expect("jump jacobian supplied at one mark but not another");
                    jg.tr_mul(&(&adj.p + adj.eta_at(m)))
                }) * marks.rate();
            }
            grad
        }
        _ => central_gradient(x, |z| hamiltonian(dynamics, objective, t, z, u, regime, age, adj)),
    }
}

/// How unbounded, affine-in-`u` objectives are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArgmaxMode {
    /// Only a numerically exact zero slope is accepted on an unbounded set.
    #[default]
    Strict,
    /// Accept a slope below `1e-8` as the first-order stationarity root.
    Stationarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Argmax {
    pub u: Vec<f64>,
    pub value: f64,
    /// The objective is flat in `u`; every control attains `value` and `u`
    /// is just a representative.
    pub entire_line: bool,
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;
const STATIONARITY_TOL: f64 = 1e-8;

fn golden(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if b - a <= 1e-15 * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Parabola through `u ± w` and `u`; returns the vertex when it improves.
fn parabolic_polish(f: &dyn Fn(f64) -> f64, u: f64, fu: f64, w: f64, lo: f64, hi: f64) -> (f64, f64) {
    let (a, b) = ((u - w).max(lo), (u + w).min(hi));
    if !(a < u && u < b) {
        return (u, fu);
    }
    let (fa, fb) = (f(a), f(b));
    let num = (u - a).powi(2) * (fu - fb) - (u - b).powi(2) * (fu - fa);
    let den = (u - a) * (fu - fb) - (u - b) * (fu - fa);
    if den == 0.0 || !num.is_finite() {
        return (u, fu);
    }
    let v = (u - 0.5 * num / den).clamp(lo, hi);
    let fv = f(v);
    // f is flat to rounding near the optimum, so the wide-stencil vertex is
    // kept on ties; it is the more accurate location.
    if fv >= fu - 4.0 * f64::EPSILON * (1.0 + fu.abs()) {
        (v, fv)
    } else {
        (u, fu)
    }
}

fn maximize_interval(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    if lo == hi {
        return (lo, f(lo));
    }
    const N: usize = 64;
    let pts: Vec<f64> = (0..=N).map(|k| lo + (hi - lo) * k as f64 / N as f64).collect();
    let vals: Vec<f64> = pts.iter().map(|&u| f(u)).collect();
    let best = (0..=N).fold(0, |b, k| if vals[k] > vals[b] { k } else { b });
    let a = pts[best.saturating_sub(1)];
    let b = pts[(best + 1).min(N)];
    let (mut u, mut fu) = golden(f, a, b, 200);
    if vals[best] > fu {
        (u, fu) = (pts[best], vals[best]);
    }
    parabolic_polish(f, u, fu, 1e-3 * (hi - lo), lo, hi)
}

fn maximize_unbounded(f: &dyn Fn(f64) -> f64, mode: ArgmaxMode) -> Result<(f64, f64, bool)> {
    let mut c = 0.0;
    let mut s = 1.0;
    for _ in 0..100 {
        let (f0, fp, fm) = (f(c), f(c + s), f(c - s));
        let curv = (fp + fm - 2.0 * f0) / (2.0 * s * s);
        let slope = (fp - fm) / (2.0 * s);
        let scale = 1.0 + f0.abs() + fp.abs() + fm.abs();
        if curv.abs() * s * s <= 1e-12 * scale {
            let tol = match mode {
                ArgmaxMode::Strict => 1e-12 * scale,
                ArgmaxMode::Stationarity => STATIONARITY_TOL,
            };
            if slope.abs() <= tol {
                return Ok((c, f0, true));
            }
            return Err(Error::UnboundedHamiltonian { slope });
        }
        if curv > 0.0 {
            return Err(Error::UnboundedHamiltonian { slope });
        }
        let step = -slope / (2.0 * curv);
        c += step;
        if step.abs() <= 1e-12 * (1.0 + c.abs()) {
            return Ok((c, f(c), false));
        }
        s = 1e-2 * (1.0 + c.abs());
    }
    Ok((c, f(c), false))
}

/// Maximise `f` over `set`.
///
/// A scalar box is searched on a grid, refined by golden section and
/// polished with a parabola through the optimum. Higher-dimensional boxes
/// use a coarse grid followed by coordinate sweeps. On an unbounded set only
/// scalar controls are supported; the search fits successive parabolas and
/// refuses affine objectives with a non-zero slope and convex ones.
pub fn maximize(f: &dyn Fn(&DVector<f64>) -> f64, dim: usize, set: &ControlSet, mode: ArgmaxMode) -> Result<Argmax> {
    match set {
        ControlSet::Unbounded => {
            if dim != 1 {
                return Err(Error::InvalidArgument(
                    "unbounded control search supports scalar controls only".into(),
                ));
            }
            let g = |v: f64| f(&DVector::from_element(1, v));
            let (u, value, entire_line) = maximize_unbounded(&g, mode)?;
            Ok(Argmax {
                u: vec![u],
                value,
                entire_line,
            })
        }
        ControlSet::Box { lo, hi } => {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::InvalidArgument(format!("control box must have dimension {dim}")));
            }
            if dim == 1 {
                let g = |v: f64| f(&DVector::from_element(1, v));
                let (u, value) = maximize_interval(&g, lo[0], hi[0]);
                return Ok(Argmax {
                    u: vec![u],
                    value,
                    entire_line: false,
                });
            }
            let n = ((4096f64).powf(1.0 / dim as f64).floor() as usize).max(3);
            let mut best = DVector::from_column_slice(lo);
            let mut best_val = f64::NEG_INFINITY;
            let mut idx = vec![0usize; dim];
            let mut cand = best.clone();
            'grid: loop {
                for l in 0..dim {
                    cand[l] = lo[l] + (hi[l] - lo[l]) * idx[l] as f64 / (n - 1) as f64;
                }
                let v = f(&cand);
                if v > best_val {
                    best_val = v;
                    best.copy_from(&cand);
                }
                for l in 0..dim {
                    idx[l] += 1;
                    if idx[l] < n {
                        continue 'grid;
                    }
                    idx[l] = 0;
                }
                break;
            }
            for _ in 0..20 {
                let before = best_val;
                for l in 0..dim {
                    let base = best.clone();
                    let g = |v: f64| {
                        let mut z = base.clone();
                        z[l] = v;
                        f(&z)
                    };
                    let (v, fv) = maximize_interval(&g, lo[l], hi[l]);
                    if fv >= best_val {
                        best[l] = v;
                        best_val = fv;
                    }
                }
                if best_val - before <= 1e-14 * (1.0 + best_val.abs()) {
                    break;
                }
            }
            Ok(Argmax {
                u: best.as_slice().to_vec(),
                value: best_val,
                entire_line: false,
            })
        }
    }
}

/// `argmax_u H(t, x, u, i, y, p, q, η)` over `set`.
#[allow(clippy::too_many_arguments)]
pub fn argmax_hamiltonian(
    dynamics: &dyn ControlledDynamics,
    objective: &ObjectiveSpec,
    t: f64,
    x: &DVector<f64>,
    regime: usize,
    age: f64,
    adj: &AdjointState,
    set: &ControlSet,
    mode: ArgmaxMode,
) -> Result<Argmax> {
    let h = |u: &DVector<f64>| hamiltonian(dynamics, objective, t, x, u, regime, age, adj);
    maximize(&h, dynamics.control_dim(), set, mode)
}

/// `∂H/∂u` for a scalar control, by a central difference with step
/// `1e-2·(1 + |u|)`; exact up to rounding when `H` is quadratic in `u`.
#[allow(clippy::too_many_arguments)]
pub fn u_slope(
    dynamics: &dyn ControlledDynamics,
    objective: &ObjectiveSpec,
    t: f64,
    x: &DVector<f64>,
    u: f64,
    regime: usize,
    age: f64,
    adj: &AdjointState,
) -> f64 {
    let h = 1e-2 * (1.0 + u.abs());
    let at = |v: f64| hamiltonian(dynamics, objective, t, x, &DVector::from_element(1, v), regime, age, adj);
    (at(u + h) - at(u - h)) / (2.0 * h)
}
