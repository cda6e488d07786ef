use std::io::{self, Write};

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::gl4;
use crate::rng::{Purpose, StreamRng};
use crate::semi_markov::{RegimeModel, RegimePath, RegimeSampler, RegimeState};
use crate::stats::Estimate;

/// Resolution of the `(t, i, y)` grid a functional is stored on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FunctionalGrid {
    pub time_nodes: usize,
    pub age_nodes: usize,
    /// Largest tabulated age; `None` means the horizon.
    pub age_max: Option<f64>,
    /// Use a single age node when every holding law is exponential.
    pub collapse_exponential: bool,
}

impl Default for FunctionalGrid {
    fn default() -> Self {
        Self {
            time_nodes: 101,
            age_nodes: 51,
            age_max: None,
            collapse_exponential: true,
        }
    }
}

impl FunctionalGrid {
    pub fn new(time_nodes: usize, age_nodes: usize) -> Self {
        Self {
            time_nodes,
            age_nodes,
            ..Self::default()
        }
    }

    pub fn full_ages(mut self) -> Self {
        self.collapse_exponential = false;
        self
    }

    pub(crate) fn resolve(&self, model: &RegimeModel, horizon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.time_nodes < 2 || self.age_nodes < 1 {
            return Err(Error::InvalidArgument(format!(
                "functional grid needs >= 2 time nodes and >= 1 age node, got {}x{}",
                self.time_nodes, self.age_nodes
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
        }
        let nt = self.time_nodes - 1;
        let mut times: Vec<f64> = (0..=nt).map(|n| horizon * n as f64 / nt as f64).collect();
        times[nt] = horizon;
        let collapse = self.collapse_exponential && model.exponential_rates().is_some();
        let ages = if collapse || self.age_nodes == 1 {
            vec![0.0]
        } else {
            let top = self.age_max.unwrap_or(horizon);
            if !(top > 0.0 && top.is_finite()) {
                return Err(Error::InvalidArgument(format!("age_max must be positive, got {top}")));
            }
            let na = self.age_nodes - 1;
            (0..=na).map(|m| top * m as f64 / na as f64).collect()
        };
        Ok((times, ages))
    }
}

/// A function of `(t, i, y)` tabulated on a grid, with the Monte Carlo
/// standard error of every node. Values between nodes are bilinear in
/// `(t, y)`; ages past the last node are clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeFunctional {
    times: Vec<f64>,
    ages: Vec<f64>,
    regimes: usize,
    values: Vec<f64>,
    se: Vec<f64>,
    n_paths: usize,
}

fn bracket(nodes: &[f64], v: f64) -> (usize, usize, f64) {
    let last = nodes.len() - 1;
    if last == 0 || v <= nodes[0] {
        return (0, 0, 0.0);
    }
    if v >= nodes[last] {
        return (last, last, 0.0);
    }
    let hi = nodes.partition_point(|&n| n <= v).min(last);
    let lo = hi - 1;
    let w = (v - nodes[lo]) / (nodes[hi] - nodes[lo]);
    (lo, hi, w)
}

impl RegimeFunctional {
    /// Every node set to `value` with zero error.
    pub fn constant(times: Vec<f64>, ages: Vec<f64>, regimes: usize, value: f64) -> Self {
        let n = times.len() * ages.len() * regimes;
        Self {
            times,
            ages,
            regimes,
            values: vec![value; n],
            se: vec![0.0; n],
            n_paths: 0,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn regimes(&self) -> usize {
        self.regimes
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    fn idx(&self, n: usize, i: usize, m: usize) -> usize {
        (n * self.regimes + i) * self.ages.len() + m
    }

    /// Value and standard error at grid node `(t_n, i, y_m)`.
    pub fn node(&self, n: usize, i: usize, m: usize) -> Estimate {
        let k = self.idx(n, i, m);
        Estimate {
            mean: self.values[k],
            se: self.se[k],
            n: self.n_paths,
        }
    }

    fn interp(&self, data: &[f64], t: f64, i: usize, y: f64) -> f64 {
        let (t0, t1, wt) = bracket(&self.times, t);
        let (a0, a1, wa) = bracket(&self.ages, y);
        let at = |n: usize| {
            let v0 = data[self.idx(n, i, a0)];
            let v1 = data[self.idx(n, i, a1)];
            if wa == 0.0 {
                v0
            } else {
                v0 + wa * (v1 - v0)
            }
        };
        let v0 = at(t0);
        if wt == 0.0 {
            v0
        } else {
            v0 + wt * (at(t1) - v0)
        }
    }

    pub fn value(&self, t: f64, i: usize, y: f64) -> f64 {
        self.interp(&self.values, t, i, y)
    }

    pub fn se_at(&self, t: f64, i: usize, y: f64) -> f64 {
        self.interp(&self.se, t, i, y)
    }

    pub fn max_se(&self) -> f64 {
        self.se.iter().copied().fold(0.0, f64::max)
    }

    /// `max |self − other|` over the nodes; both must share a grid.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, |m, d| if d.is_nan() || m.is_nan() { f64::NAN } else { m.max(d) })
    }

    /// Largest spread over the age axis at fixed `(t, i)`, together with the
    /// largest standard error among the nodes involved.
    pub fn age_variation(&self) -> (f64, f64) {
        let mut spread: f64 = 0.0;
        let mut se: f64 = 0.0;
        for n in 0..self.times.len() {
            for i in 0..self.regimes {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for m in 0..self.ages.len() {
                    let k = self.idx(n, i, m);
                    lo = lo.min(self.values[k]);
                    hi = hi.max(self.values[k]);
                    se = se.max(self.se[k]);
                }
                spread = spread.max(hi - lo);
            }
        }
        (spread, se)
    }

    pub(crate) fn blend(&mut self, target: &Self, weight: f64) {
        for (v, t) in self.values.iter_mut().zip(&target.values) {
            *v += weight * (t - *v);
        }
        self.se.clone_from(&target.se);
        self.n_paths = target.n_paths;
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Rows `t, i, y, phi, psi, se_phi, se_psi`; the `psi` columns are empty when
/// there is no second functional.
pub fn write_functionals_csv(
    mut w: impl Write,
    phi: &RegimeFunctional,
    psi: Option<&RegimeFunctional>,
) -> io::Result<()> {
    writeln!(w, "t,i,y,phi,psi,se_phi,se_psi")?;
    for (n, &t) in phi.times.iter().enumerate() {
        for i in 0..phi.regimes {
            for (m, &y) in phi.ages.iter().enumerate() {
                let a = phi.node(n, i, m);
                match psi {
                    Some(p) => {
                        let b = p.node(n, i, m);
                        writeln!(w, "{t:.17e},{i},{y:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", a.mean, b.mean, a.se, b.se)?
                    }
                    None => writeln!(w, "{t:.17e},{i},{y:.17e},{:.17e},,{:.17e},", a.mean, a.se)?,
                }
            }
        }
    }
    Ok(())
}

/// How path integrals of the rate are turned into a functional value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Representation {
    /// `scale · E[∫ a ds]`
    Integral,
    /// `scale · E[exp ∫ a ds]`
    Exponential,
}

/// The rate `a` integrated along regime paths.
pub(crate) enum Rate<'a> {
    /// Constant within each regime: integrated exactly.
    PerRegime(&'a [f64]),
    /// `a(s, θ, y)`, integrated with 4-point Gauss–Legendre on panels no
    /// wider than `panel`, split at regime jumps.
    General {
        rate: &'a (dyn Fn(f64, usize, f64) -> f64 + Sync),
        panel: f64,
    },
}

/// `∫_0^τ a(θ_s)` for every `τ` in `taus` (ascending), a path with constant
/// per-regime rates.
fn cumulative_per_regime(path: &RegimePath, rates: &[f64], taus: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(taus.len());
    let events = path.events();
    let mut acc = 0.0;
    let mut seg_start = 0.0;
    let mut state = path.origin().theta;
    let mut e = 0;
    for &tau in taus {
        while e < events.len() && events[e].time <= tau {
            acc += rates[state] * (events[e].time - seg_start);
            seg_start = events[e].time;
            state = events[e].to;
            e += 1;
        }
        out.push(acc + rates[state] * (tau - seg_start));
    }
    out
}

/// `∫_0^τ a(t0 + s, θ_s, Y_s) ds` along `path`.
fn general_integral(
    path: &RegimePath,
    rate: &(dyn Fn(f64, usize, f64) -> f64 + Sync),
    panel: f64,
    t0: f64,
    tau: f64,
) -> f64 {
    let mut acc = 0.0;
    let mut seg_start = 0.0;
    let mut state = path.origin().theta;
    let mut age0 = path.origin().age;
    let segment = |a: f64, b: f64, state: usize, age_at_a: f64| {
        if b <= a {
            return 0.0;
        }
        let k = ((b - a) / panel).ceil().max(1.0) as usize;
        let h = (b - a) / k as f64;
        let mut s = 0.0;
        for j in 0..k {
            let lo = a + j as f64 * h;
            s += gl4().integrate(lo, lo + h, |u| rate(t0 + u, state, age_at_a + (u - a)));
        }
        s
    };
    for ev in path.events() {
        if ev.time > tau {
            break;
        }
        acc += segment(seg_start, ev.time, state, age0);
        seg_start = ev.time;
        state = ev.to;
        age0 = 0.0;
    }
    acc + segment(seg_start, tau, state, age0)
}

/// Estimate `F(t_n, i, y_m) = scale · E[R(∫_{t_n}^T a)]` on a grid, started
/// from `(θ, Y) = (i, y_m)` at `t_n`.
///
/// Path `k` of every node uses the stream `(seed, Functional, k)`, so all
/// nodes share their random numbers. One regime path of length `T − t_0` is
/// drawn per `(i, y_m, k)` and its prefixes serve every `t_n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn estimate_functional(
    model: &RegimeModel,
    sampler: RegimeSampler,
    times: &[f64],
    ages: &[f64],
    n_paths: usize,
    seed: u64,
    rate: &Rate<'_>,
    repr: Representation,
    scale: f64,
) -> Result<RegimeFunctional> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let regimes = model.num_states();
    let horizon = *times.last().expect("non-empty time grid");
    let span = horizon - times[0];
    // durations T − t_n in ascending order
    let taus: Vec<f64> = times.iter().rev().map(|t| horizon - t).collect();
    let nt = times.len();
    let mut values = vec![0.0; nt * regimes * ages.len()];
    let mut se = vec![0.0; values.len()];

    for i in 0..regimes {
        for (m, &y) in ages.iter().enumerate() {
            let samples: Vec<Vec<f64>> = (0..n_paths)
                .into_par_iter()
                .map(|k| -> Result<Vec<f64>> {
                    let mut rng = StreamRng::new(seed, Purpose::Functional, k as u64);
                    let path = sampler.sample(model, RegimeState::new(i, y), span, &mut rng)?;
                    let ints = match rate {
                        Rate::PerRegime(r) => cumulative_per_regime(&path, r, &taus),
                        Rate::General { rate, panel } => taus
                            .iter()
                            .map(|&tau| general_integral(&path, *rate, *panel, horizon - tau, tau))
                            .collect(),
                    };
                    Ok(ints
                        .into_iter()
                        .map(|v| match repr {
                            Representation::Integral => scale * v,
                            Representation::Exponential => scale * v.exp(),
                        })
                        .collect())
                })
                .collect::<Result<_>>()?;
            for (q, _) in taus.iter().enumerate() {
                let n = nt - 1 - q;
                let column: Vec<f64> = samples.iter().map(|s| s[q]).collect();
                let est = Estimate::from_samples(&column);
                let k = (n * regimes + i) * ages.len() + m;
                values[k] = est.mean;
                se[k] = if n_paths > 1 { est.se } else { 0.0 };
            }
        }
    }
    // boundary values are exact, not estimated
    let terminal = match repr {
        Representation::Integral => 0.0,
        Representation::Exponential => scale,
    };
    for i in 0..regimes {
        for m in 0..ages.len() {
            let k = ((nt - 1) * regimes + i) * ages.len() + m;
            values[k] = terminal;
            se[k] = 0.0;
        }
    }
    Ok(RegimeFunctional {
        times: times.to_vec(),
        ages: ages.to_vec(),
        regimes,
        values,
        se,
        n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semi_markov::HoldingDist;

    #[test]
    fn interpolation_is_bilinear_and_clamped() {
        let mut f = RegimeFunctional::constant(vec![0.0, 1.0], vec![0.0, 2.0], 1, 0.0);
        // v = t + y on the corners
        for (n, t) in [0.0, 1.0].iter().enumerate() {
            for (m, y) in [0.0, 2.0].iter().enumerate() {
                let k = f.idx(n, 0, m);
                f.values[k] = t + y;
            }
        }
        assert!((f.value(0.25, 0, 0.5) - 0.75).abs() < 1e-15);
        assert_eq!(f.value(1.0, 0, 5.0), 3.0);
        assert_eq!(f.value(0.0, 0, 0.0), 0.0);
    }

    #[test]
    fn per_regime_integral_is_exact() {
        let m = RegimeModel::two_state(
            HoldingDist::Exponential { rate: 2.0 },
            HoldingDist::Exponential { rate: 1.0 },
        )
        .unwrap();
        let mut rng = StreamRng::new(3, Purpose::Functional, 0);
        let path = RegimeSampler::Direct.sample(&m, RegimeState::new(0, 0.0), 2.0, &mut rng).unwrap();
        let rates = [1.5, -0.5];
        let taus = [0.0, 0.3, 1.0, 2.0];
        let exact = cumulative_per_regime(&path, &rates, &taus);
        let f = |_: f64, i: usize, _: f64| rates[i];
        for (tau, e) in taus.iter().zip(&exact) {
            let g = general_integral(&path, &f, 0.05, 0.0, *tau);
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
        assert_eq!(exact[0], 0.0);
    }

    #[test]
    fn terminal_nodes_are_exact() {
        let m = RegimeModel::single_state();
        let (times, ages) = FunctionalGrid::new(5, 3).resolve(&m, 1.0).unwrap();
        let f = estimate_functional(
            &m,
            RegimeSampler::Direct,
            &times,
            &ages,
            4,
            0,
            &Rate::PerRegime(&[0.3]),
            Representation::Exponential,
            -2.0,
        )
        .unwrap();
        assert_eq!(f.value(1.0, 0, 0.0), -2.0);
        assert!((f.value(0.0, 0, 0.0) + 2.0 * 0.3f64.exp()).abs() < 1e-14);
        assert_eq!(f.node(0, 0, 0).se, 0.0);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let f = RegimeFunctional::constant(vec![0.0, 0.5, 1.0], vec![0.0], 2, 1.0);
        let mut buf = Vec::new();
        write_functionals_csv(&mut buf, &f, Some(&f)).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1 + 6);
        assert!(s.starts_with("t,i,y,phi,psi,se_phi,se_psi\n"));
    }
}
