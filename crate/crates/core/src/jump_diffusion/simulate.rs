use std::io::{self, Write};

use nalgebra::DVector;
use rand::RngCore;

use super::{ControlPolicy, ControlledDynamics, PathNoise};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamRng};
use crate::semi_markov::RegimePath;

/// Left limits at a grid node where a regime switch or an asset jump occurs.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEvent {
    pub node: usize,
    pub time: f64,
    /// `(from, to)` when the regime switches here.
    pub regime: Option<(usize, usize)>,
    /// Mark of the asset jump at this node, if any.
    pub mark: Option<f64>,
    pub x_minus: DVector<f64>,
    pub u_minus: DVector<f64>,
    pub theta_minus: usize,
    pub age_minus: f64,
}

/// State, regime and control at every grid node (right limits), plus the left
/// limits at event nodes and the Brownian increments that drove the path.
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub index: usize,
    pub times: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub theta: Vec<usize>,
    pub age: Vec<f64>,
    pub u: Vec<DVector<f64>>,
    pub events: Vec<NodeEvent>,
    pub dw: Vec<DVector<f64>>,
    pub regime: RegimePath,
}

/// Left-limit view of a node: `(x, u, θ, y)`.
pub struct LeftLimit<'a> {
    pub x: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
    pub theta: usize,
    pub age: f64,
}

impl SamplePath {
    fn empty(regime: RegimePath) -> Self {
        Self {
            index: 0,
            times: vec![],
            x: vec![],
            theta: vec![],
            age: vec![],
            u: vec![],
            events: vec![],
            dw: vec![],
            regime,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn event_at(&self, node: usize) -> Option<&NodeEvent> {
        self.events
            .binary_search_by_key(&node, |e| e.node)
            .ok()
            .map(|i| &self.events[i])
    }

    /// Left limit at `node`; equal to the node values away from events.
    pub fn left_limit(&self, node: usize) -> LeftLimit<'_> {
        match self.event_at(node) {
            Some(e) => LeftLimit {
                x: &e.x_minus,
                u: &e.u_minus,
                theta: e.theta_minus,
                age: e.age_minus,
            },
            None => LeftLimit {
                x: &self.x[node],
                u: &self.u[node],
                theta: self.theta[node],
                age: self.age[node],
            },
        }
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.x.last().expect("non-empty path")
    }

    /// Rows `t, x_1..x_r, theta, y, u_1..u_d`.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        let r = self.x.first().map_or(0, |x| x.len());
        let d = self.u.first().map_or(0, |u| u.len());
        let mut header = vec!["t".to_string()];
        header.extend((1..=r).map(|k| format!("x_{k}")));
        header.push("theta".into());
        header.push("y".into());
        header.extend((1..=d).map(|k| format!("u_{k}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            write!(w, "{:.16e}", self.times[k])?;
            for v in self.x[k].iter() {
                write!(w, ",{v:.16e}")?;
            }
            write!(w, ",{},{:.16e}", self.theta[k], self.age[k])?;
            for v in self.u[k].iter() {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Rows `t, kind, detail` with kind `regime` (detail `from->to`) or
    /// `jump` (detail the mark).
    pub fn write_events_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "t,kind,detail")?;
        for e in &self.events {
            if let Some((from, to)) = e.regime {
                writeln!(w, "{:.16e},regime,{from}->{to}", e.time)?;
            }
            if let Some(m) = e.mark {
                writeln!(w, "{:.16e},jump,{m:.16e}", e.time)?;
            }
        }
        Ok(())
    }
}

/// A path that stopped early, with the error that stopped it.
#[derive(Debug, Clone)]
pub struct TruncatedPath {
    pub path: SamplePath,
    pub error: Error,
}

impl From<TruncatedPath> for Error {
    fn from(t: TruncatedPath) -> Self {
        t.error
    }
}

/// State at a node as seen by a [`StepSink`].
pub(crate) struct NodeState<'a> {
    pub t: f64,
    pub x: &'a DVector<f64>,
    pub u: &'a DVector<f64>,
    pub theta: usize,
    pub age: f64,
}

/// Receives the simulation one step at a time.
pub(crate) trait StepSink {
    fn start(&mut self, node: &NodeState<'_>);

    /// Step `k → k+1`. `left` is the left limit at `k+1`; `next` its right
    /// limit; `event` is set at regime-switch or jump nodes.
    fn step(
        &mut self,
        k: usize,
        left: &NodeState<'_>,
        next: &NodeState<'_>,
        regime: Option<(usize, usize)>,
        mark: Option<f64>,
    );
}

fn check_control(policy: &dyn ControlPolicy, u: &DVector<f64>, t: f64, path: usize) -> Result<()> {
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePath {
            path: Some(path),
            time: t,
            detail: "control is not finite".into(),
        });
    }
    let set = policy.control_set();
    if !set.contains(u) {
        return Err(Error::AdmissibilityFailure {
            id: format!("path {path}"),
            reason: format!("control {:?} at t={t} lies outside {:?}", u.as_slice(), set),
        });
    }
    Ok(())
}

/// Euler–Maruyama over the noise grid, feeding `sink`.
pub(crate) fn run_steps(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    noise: &PathNoise,
    x0: &DVector<f64>,
    sink: &mut dyn StepSink,
) -> Result<()> {
    let r = dynamics.dim();
    if x0.len() != r {
        return Err(Error::InvalidArgument(format!(
            "initial state has dimension {}, dynamics expect {r}",
            x0.len()
        )));
    }
    if noise.brownian_dim() != r {
        return Err(Error::InvalidArgument(format!(
            "noise carries {} Brownian components, dynamics expect {r}",
            noise.brownian_dim()
        )));
    }
    let path_id = noise.index();
    let grid = noise.grid();
    let regime = noise.regime();
    let origin = regime.origin();
    let reg_events = regime.events();
    let reg_nodes = noise.regime_nodes();
    let jumps = noise.jumps();

    let mut theta = origin.theta;
    let mut age_anchor = -origin.age; // age = t − anchor
    let mut x = x0.clone();
    let mut u = policy.control(grid[0], &x, theta, origin.age);
    check_control(policy, &u, grid[0], path_id)?;
    sink.start(&NodeState {
        t: grid[0],
        x: &x,
        u: &u,
        theta,
        age: origin.age,
    });

    let (mut ri, mut ji) = (0, 0);
    let mut dw = DVector::zeros(r);
    for k in 0..noise.num_steps() {
        let (t0, t1) = (grid[k], grid[k + 1]);
        let delta = t1 - t0;
        dw.copy_from_slice(noise.dw(k));
        let b = dynamics.drift(t0, &x, &u, theta);
        let s = dynamics.vol(t0, &x, &u, theta);
        let mut x_minus = x.clone();
        x_minus.axpy(delta, &b, 1.0);
        x_minus.gemv(1.0, &s, &dw, 1.0);
        let age_minus = t1 - age_anchor;
        if x_minus.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePath {
                path: Some(path_id),
                time: t1,
                detail: format!("state {:?} after diffusion step", x_minus.as_slice()),
            });
        }

        let regime_here = if reg_nodes.get(ri) == Some(&(k + 1)) {
            let e = &reg_events[ri];
            ri += 1;
            Some((e.from, e.to))
        } else {
            None
        };
        let mark_here = if jumps.get(ji).map(|j| j.0) == Some(k + 1) {
            let m = jumps[ji].1.mark;
            ji += 1;
            Some(m)
        } else {
            None
        };

        if regime_here.is_none() && mark_here.is_none() {
            let u_next = policy.control(t1, &x_minus, theta, age_minus);
            check_control(policy, &u_next, t1, path_id)?;
            let node = NodeState {
                t: t1,
                x: &x_minus,
                u: &u_next,
                theta,
                age: age_minus,
            };
            sink.step(k, &node, &node, None, None);
            x = x_minus;
            u = u_next;
            continue;
        }

        let u_minus = policy.control(t1, &x_minus, theta, age_minus);
        check_control(policy, &u_minus, t1, path_id)?;
        let mut x_next = x_minus.clone();
        if let Some(m) = mark_here {
            let g = dynamics.jump(t1, &x_minus, &u_minus, theta, m);
            x_next += g;
            if x_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePath {
                    path: Some(path_id),
                    time: t1,
                    detail: format!("state {:?} after asset jump", x_next.as_slice()),
                });
            }
        }
        let (theta_next, age_next) = match regime_here {
            Some((_, to)) => {
                age_anchor = t1;
                (to, 0.0)
            }
            None => (theta, age_minus),
        };
        let u_next = policy.control(t1, &x_next, theta_next, age_next);
        check_control(policy, &u_next, t1, path_id)?;
        sink.step(
            k,
            &NodeState {
                t: t1,
                x: &x_minus,
                u: &u_minus,
                theta,
                age: age_minus,
            },
            &NodeState {
                t: t1,
                x: &x_next,
                u: &u_next,
                theta: theta_next,
                age: age_next,
            },
            regime_here,
            mark_here,
        );
        x = x_next;
        u = u_next;
        theta = theta_next;
    }
    Ok(())
}

struct Recorder {
    path: SamplePath,
}

impl StepSink for Recorder {
    fn start(&mut self, n: &NodeState<'_>) {
        self.push(n);
    }

    fn step(
        &mut self,
        _k: usize,
        left: &NodeState<'_>,
        next: &NodeState<'_>,
        regime: Option<(usize, usize)>,
        mark: Option<f64>,
    ) {
        if regime.is_some() || mark.is_some() {
            self.path.events.push(NodeEvent {
                node: self.path.times.len(),
                time: left.t,
                regime,
                mark,
                x_minus: left.x.clone(),
                u_minus: left.u.clone(),
                theta_minus: left.theta,
                age_minus: left.age,
            });
        }
        self.push(next);
    }
}

impl Recorder {
    fn push(&mut self, n: &NodeState<'_>) {
        self.path.times.push(n.t);
        self.path.x.push(n.x.clone());
        self.path.u.push(n.u.clone());
        self.path.theta.push(n.theta);
        self.path.age.push(n.age);
    }
}

/// Simulate one path on pre-generated noise. On failure the part simulated so
/// far is returned with the error.
pub fn simulate_with_noise(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    noise: &PathNoise,
    x0: &DVector<f64>,
) -> std::result::Result<SamplePath, TruncatedPath> {
    let dw = (0..noise.num_steps())
        .map(|k| DVector::from_column_slice(noise.dw(k)))
        .collect();
    let mut rec = Recorder {
        path: SamplePath {
            index: noise.index(),
            times: Vec::with_capacity(noise.grid().len()),
            x: Vec::with_capacity(noise.grid().len()),
            theta: Vec::with_capacity(noise.grid().len()),
            age: Vec::with_capacity(noise.grid().len()),
            u: Vec::with_capacity(noise.grid().len()),
            events: Vec::new(),
            dw,
            regime: noise.regime().clone(),
        },
    };
    match run_steps(dynamics, policy, noise, x0, &mut rec) {
        Ok(()) => Ok(rec.path),
        Err(error) => {
            let n = rec.path.times.len();
            rec.path.dw.truncate(n.saturating_sub(1));
            Err(TruncatedPath {
                path: rec.path,
                error,
            })
        }
    }
}

/// Simulate `X` along a given regime path. Asset-jump and Brownian streams
/// are split off `rng`.
pub fn simulate_controlled_path(
    dynamics: &dyn ControlledDynamics,
    policy: &dyn ControlPolicy,
    regime: &RegimePath,
    x0: &DVector<f64>,
    dt: f64,
    rng: &mut StreamRng,
) -> std::result::Result<SamplePath, TruncatedPath> {
    let mut jump_rng = StreamRng::new(rng.next_u64(), Purpose::AssetJump, 0);
    let mut bm_rng = StreamRng::new(rng.next_u64(), Purpose::Brownian, 0);
    let noise = PathNoise::from_regime(
        regime.clone(),
        dynamics.marks(),
        dynamics.dim(),
        dt,
        &mut jump_rng,
        &mut bm_rng,
    )
    .map_err(|error| TruncatedPath {
        path: SamplePath::empty(regime.clone()),
        error,
    })?;
    simulate_with_noise(dynamics, policy, &noise, x0)
}

#[cfg(test)]
mod tests {
    use std::sync::Mutex;

    use nalgebra::DMatrix;

    use super::*;
    use crate::jump_diffusion::{FnPolicy, MarkMeasure, ScalarDynamics};
    use crate::semi_markov::{HoldingDist, RegimeModel, RegimeSampler, RegimeState};
    use crate::stats::Estimate;

    fn zero_policy() -> FnPolicy<impl Fn(f64, &DVector<f64>, usize, f64) -> DVector<f64>> {
        FnPolicy::new(|_, _: &DVector<f64>, _, _| DVector::zeros(1))
    }

    fn single(h: f64) -> RegimePath {
        RegimePath::constant(RegimeState::new(0, 0.0), h)
    }

    #[test]
    fn frozen_dynamics_keep_initial_state() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::point(3.0, 0.5).unwrap());
        let mut rng = StreamRng::new(1, Purpose::Auxiliary, 0);
        let x0 = DVector::from_element(1, 2.5);
        let p = simulate_controlled_path(&dynamics, &zero_policy(), &single(1.0), &x0, 0.01, &mut rng)
            .unwrap();
        assert!(p.x.iter().all(|x| x[0] == 2.5));
    }

    #[test]
    fn linear_ode_matches_exponential() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(|_, x, _, _| 0.05 * x);
        let mut rng = StreamRng::new(1, Purpose::Auxiliary, 0);
        let x0 = DVector::from_element(1, 1.0);
        let p = simulate_controlled_path(&dynamics, &zero_policy(), &single(1.0), &x0, 1e-3, &mut rng)
            .unwrap();
        let err = (p.terminal_state()[0] - 0.05f64.exp()).abs();
        assert!(err < 2e-4, "{err}");
    }

    #[test]
    fn compound_poisson_mean() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::point(2.0, 0.1).unwrap())
            .with_jump(|_, _, _, _, g| g);
        let model = RegimeModel::single_state();
        let x0 = DVector::from_element(1, 0.0);
        let samples: Vec<f64> = (0..100_000)
            .map(|k| {
                let noise = PathNoise::generate(
                    &model,
                    RegimeSampler::Direct,
                    RegimeState::new(0, 0.0),
                    dynamics.marks(),
                    1,
                    1.0,
                    0.1,
                    9,
                    k,
                )
                .unwrap();
                simulate_with_noise(&dynamics, &zero_policy(), &noise, &x0).unwrap().terminal_state()[0]
            })
            .collect();
        let e = Estimate::from_samples(&samples);
        assert!((e.mean - 0.2).abs() < 3.0 * e.se, "{e:?}");
    }

    #[test]
    fn regime_columns_follow_regime_path() {
        let model = RegimeModel::two_state(
            HoldingDist::Exponential { rate: 5.0 },
            HoldingDist::Weibull { shape: 2.0, scale: 0.3 },
        )
        .unwrap();
        let dynamics = ScalarDynamics::frozen(MarkMeasure::point(3.0, 0.1).unwrap())
            .with_drift(|_, _, _, i| i as f64)
            .with_jump(|_, _, _, _, g| g);
        let x0 = DVector::from_element(1, 0.0);
        for k in 0..20 {
            let noise = PathNoise::generate(
                &model,
                RegimeSampler::Direct,
                RegimeState::new(1, 0.2),
                dynamics.marks(),
                1,
                1.0,
                0.01,
                4,
                k,
            )
            .unwrap();
            let p = simulate_with_noise(&dynamics, &zero_policy(), &noise, &x0).unwrap();
            for n in 0..p.len() {
                let s = noise.regime().state_at(p.times[n]);
                assert_eq!(s.theta, p.theta[n]);
                assert!((s.age - p.age[n]).abs() < 1e-12);
            }
            for e in &p.events {
                if let Some((from, _)) = e.regime {
                    assert_eq!(from, e.theta_minus);
                    assert_eq!(p.times[e.node], e.time);
                }
            }
        }
    }

    /// Records the x argument of every jump-coefficient call.
    struct Logged {
        marks: MarkMeasure,
        calls: Mutex<Vec<(f64, f64)>>,
    }

    impl ControlledDynamics for Logged {
        fn dim(&self) -> usize {
            1
        }
        fn drift(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>, _i: usize) -> DVector<f64> {
            DVector::from_element(1, 1.0)
        }
        fn vol(&self, _t: f64, _x: &DVector<f64>, _u: &DVector<f64>, _i: usize) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, 0.3)
        }
        fn jump(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>, _i: usize, _m: f64) -> DVector<f64> {
            self.calls.lock().unwrap().push((t, x[0]));
            assert_eq!(u[0], 2.0 * x[0], "control must see the pre-jump state");
            DVector::from_element(1, 1.0)
        }
        fn marks(&self) -> &MarkMeasure {
            &self.marks
        }
    }

    #[test]
    fn jumps_use_left_limits() {
        let dynamics = Logged {
            marks: MarkMeasure::point(5.0, 1.0).unwrap(),
            calls: Mutex::new(Vec::new()),
        };
        let policy = FnPolicy::new(|_, x: &DVector<f64>, _, _| x * 2.0);
        let mut rng = StreamRng::new(2, Purpose::Auxiliary, 0);
        let p = simulate_controlled_path(
            &dynamics,
            &policy,
            &single(2.0),
            &DVector::from_element(1, 0.0),
            0.01,
            &mut rng,
        )
        .unwrap();
        let calls = dynamics.calls.lock().unwrap();
        assert!(!calls.is_empty());
        for (e, (t, x)) in p.events.iter().zip(calls.iter()) {
            assert_eq!(e.time, *t);
            assert_eq!(e.x_minus[0], *x);
            assert_eq!(p.x[e.node][0], x + 1.0);
        }
    }

    #[test]
    fn non_finite_state_reports_truncated_path() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(|_, x, _, _| x * x);
        let mut rng = StreamRng::new(2, Purpose::Auxiliary, 0);
        let err = simulate_controlled_path(
            &dynamics,
            &zero_policy(),
            &single(1.0),
            &DVector::from_element(1, 1e200),
            0.1,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err.error, Error::NonFinitePath { .. }));
        assert_eq!(err.path.len(), 1);
    }

    #[test]
    fn csv_has_expected_columns() {
        let dynamics = ScalarDynamics::frozen(MarkMeasure::point(3.0, 0.1).unwrap()).with_jump(|_, _, _, _, g| g);
        let mut rng = StreamRng::new(2, Purpose::Auxiliary, 0);
        let p = simulate_controlled_path(
            &dynamics,
            &zero_policy(),
            &single(1.0),
            &DVector::from_element(1, 0.0),
            0.25,
            &mut rng,
        )
        .unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "t,x_1,theta,y,u_1");
        assert_eq!(s.lines().count(), p.len() + 1);
        let mut ev = Vec::new();
        p.write_events_csv(&mut ev).unwrap();
        assert_eq!(String::from_utf8(ev).unwrap().lines().count(), p.events.len() + 1);
    }
}
