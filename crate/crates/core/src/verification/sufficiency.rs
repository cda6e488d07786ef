use std::io::{self, Write};

use nalgebra::DVector;
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jump_diffusion::{path_objective, simulate_with_noise, ControlPolicy, ControlSet};
use crate::maximum_principle::u_slope;
use crate::portfolio::ExampleProblem;
use crate::rng::{Purpose, StreamRng};
use crate::stats::Estimate;

/// How a perturbation modifies the base control `u(t, x, i, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PerturbationKind {
    /// `u + δ`
    Shift,
    /// `u + δ·x`
    StateShift,
    /// `(1 + δ)·u`
    Scale,
    /// `u + δ·x` for `t ∈ [a, b)`, `u` elsewhere.
    Window { a: f64, b: f64 },
    /// `u + ξ·x` with `ξ ~ U[−δ, δ]` drawn once per path.
    RandomConstant,
}

// serde rejects `deny_unknown_fields` together with `flatten`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Perturbation {
    pub id: String,
    #[serde(flatten)]
    pub kind: PerturbationKind,
    pub delta: f64,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, delta: f64) -> Self {
        let tag = match &kind {
            PerturbationKind::Shift => "shift".to_string(),
            PerturbationKind::StateShift => "state-shift".to_string(),
            PerturbationKind::Scale => "scale".to_string(),
            PerturbationKind::Window { a, b } => format!("window[{a},{b})"),
            PerturbationKind::RandomConstant => "random".to_string(),
        };
        Self {
            id: format!("{tag}:{delta:+}"),
            kind,
            delta,
        }
    }

    fn apply(&self, t: f64, x: f64, u: f64, xi: f64) -> f64 {
        match self.kind {
            PerturbationKind::Shift => u + self.delta,
            PerturbationKind::StateShift => u + self.delta * x,
            PerturbationKind::Scale => (1.0 + self.delta) * u,
            PerturbationKind::Window { a, b } => {
                if t >= a && t < b {
                    u + self.delta * x
                } else {
                    u
                }
            }
            PerturbationKind::RandomConstant => u + xi * x,
        }
    }
}

/// Finite family of competitors `u` for the comparison `J(û) ≥ J(u)`.
///
/// Only these controls are compared; the admissible class is much larger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PerturbationFamily {
    pub entries: Vec<Perturbation>,
}

impl Default for PerturbationFamily {
    /// 21 perturbations: the zero perturbation, constant and state shifts,
    /// scalings, early and late windows, and random per-path constants.
    fn default() -> Self {
        use PerturbationKind::*;
        let mut entries = vec![Perturbation::new(Shift, 0.0)];
        for d in [-0.2, -0.05, 0.05, 0.2] {
            entries.push(Perturbation::new(Shift, d));
        }
        for d in [-0.2, -0.05, 0.05, 0.2] {
            entries.push(Perturbation::new(StateShift, d));
        }
        for d in [-0.3, -0.1, 0.1, 0.3] {
            entries.push(Perturbation::new(Scale, d));
        }
        for (a, b) in [(0.0, 0.5), (0.5, 1.0)] {
            for d in [-0.1, 0.1] {
                entries.push(Perturbation::new(Window { a, b }, d));
            }
        }
        for d in [0.05, 0.2] {
            entries.push(Perturbation::new(RandomConstant, d));
        }
        entries.push(Perturbation::new(Shift, 0.5));
        entries.push(Perturbation::new(Shift, -0.5));
        Self { entries }
    }
}

impl PerturbationFamily {
    /// 21 perturbations proportional to wealth, which keep positive wealth
    /// positive: the zero perturbation, state shifts, scalings, windows and
    /// random per-path constants.
    pub fn proportional() -> Self {
        use PerturbationKind::*;
        let mut entries = vec![Perturbation::new(Scale, 0.0)];
        for d in [-0.4, -0.2, -0.1, -0.05, 0.05, 0.1, 0.2, 0.4] {
            entries.push(Perturbation::new(StateShift, d));
        }
        for d in [-0.5, -0.3, -0.1, 0.1, 0.3, 0.5] {
            entries.push(Perturbation::new(Scale, d));
        }
        for (a, b) in [(0.0, 0.5), (0.5, 1.0)] {
            for d in [-0.1, 0.1] {
                entries.push(Perturbation::new(Window { a, b }, d));
            }
        }
        for d in [0.05, 0.2] {
            entries.push(Perturbation::new(RandomConstant, d));
        }
        Self { entries }
    }

    /// [`PerturbationFamily::proportional`] for problems whose payoff needs
    /// positive wealth, the default family otherwise.
    pub fn for_problem(problem: &ExampleProblem) -> Self {
        if problem.requires_positive_wealth() {
            Self::proportional()
        } else {
            Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

struct Perturbed<'a> {
    base: &'a dyn ControlPolicy,
    perturbation: &'a Perturbation,
    xi: f64,
    set: ControlSet,
}

impl ControlPolicy for Perturbed<'_> {
    fn control(&self, t: f64, x: &DVector<f64>, regime: usize, age: f64) -> DVector<f64> {
        let u = self.base.control(t, x, regime, age);
        let v = DVector::from_element(1, self.perturbation.apply(t, x[0], u[0], self.xi));
        // leaving U shows up as a non-finite path
        if self.set.contains(&v) {
            v
        } else {
            DVector::from_element(1, f64::NAN)
        }
    }

    fn control_set(&self) -> ControlSet {
        self.set.clone()
    }
}

/// Monte Carlo and acceptance settings of a sufficiency run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SufficiencyOptions {
    pub n_paths: usize,
    /// Multiplier on the closed-form control used as the base; values other
    /// than 1 turn the run into a negative control.
    pub candidate_factor: f64,
    /// Number of `(path, node)` points where the first-order condition is checked.
    pub first_order_nodes: usize,
    pub first_order_tolerance: f64,
    /// Pass rule `ΔJ ≥ −pass_sigmas · SE`.
    pub pass_sigmas: f64,
}

impl Default for SufficiencyOptions {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            candidate_factor: 1.0,
            first_order_nodes: 1000,
            first_order_tolerance: 1e-8,
            pass_sigmas: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub id: String,
    pub delta: f64,
    /// `Ĵ(base) − Ĵ(perturbed)` under shared noise.
    pub d_j: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub example: String,
    pub n_paths: usize,
    pub seed: u64,
    pub candidate_factor: f64,
    pub objective: Estimate,
    pub records: Vec<PerturbationRecord>,
    /// Largest `|∂H/∂u|` seen along base paths.
    pub max_u_slope: f64,
    pub first_order_nodes: usize,
    pub hamiltonian_max: bool,
    pub concavity: bool,
    pub within_hypotheses: bool,
    pub pass: bool,
    pub scope: String,
}

impl SufficiencyReport {
    /// Perturbations with `ΔJ < −k·SE`.
    pub fn violations(&self) -> Vec<&PerturbationRecord> {
        self.records.iter().filter(|r| !r.pass).collect()
    }

    /// Rows `perturbation_id, delta, dJ, se, pass`.
    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "perturbation_id,delta,dJ,se,pass")?;
        for r in &self.records {
            writeln!(w, "{},{:.16e},{:.16e},{:.16e},{}", r.id, r.delta, r.d_j, r.se, r.pass)?;
        }
        Ok(())
    }
}

/// Compare the (possibly scaled) closed-form control against every member
/// of `family` on shared noise: path `k` of every control uses the same
/// regime, jump and Brownian draws. Also checks `∂H/∂u = 0` along the base
/// paths and probes the payoff for concavity.
pub fn sufficiency_experiment(
    problem: &ExampleProblem,
    family: &PerturbationFamily,
    options: &SufficiencyOptions,
    seed: u64,
) -> Result<SufficiencyReport> {
    if family.is_empty() {
        return Err(Error::InvalidArgument("empty perturbation family".into()));
    }
    if options.n_paths < 2 {
        return Err(Error::InvalidArgument("need at least two paths".into()));
    }
    let dynamics = problem.dynamics.as_ref();
    let objective = &problem.objective;
    let scenario = &problem.scenario;
    let base = problem.scaled_candidate(options.candidate_factor);
    let base = base.as_ref();
    let set = base.control_set();
    let family_tags: Vec<u64> = (0..family.len())
        .map(|p| StreamRng::subtag(Purpose::Perturbation as u64, p as u64))
        .collect();

    let rows: Vec<(f64, Vec<f64>)> = (0..options.n_paths)
        .into_par_iter()
        .map(|k| -> Result<(f64, Vec<f64>)> {
            let noise = scenario.noise(dynamics.marks(), dynamics.dim(), seed, k)?;
            let j_base = path_objective(dynamics, base, objective, &noise, &scenario.x0)?;
            let mut out = Vec::with_capacity(family.len());
            for (p, pert) in family.entries.iter().enumerate() {
                let xi = match pert.kind {
                    PerturbationKind::RandomConstant => {
                        let mut rng = StreamRng::with_tag(seed, family_tags[p], k as u64);
                        pert.delta * (2.0 * rng.uniform() - 1.0)
                    }
                    _ => 0.0,
                };
                let policy = Perturbed {
                    base,
                    perturbation: pert,
                    xi,
                    set: set.clone(),
                };
                let j = path_objective(dynamics, &policy, objective, &noise, &scenario.x0).map_err(|e| {
                    Error::AdmissibilityFailure {
                        id: pert.id.clone(),
                        reason: e.to_string(),
                    }
                })?;
                out.push(j);
            }
            Ok((j_base, out))
        })
        .collect::<Result<_>>()?;

    let base_values: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let records = family
        .entries
        .iter()
        .enumerate()
        .map(|(p, pert)| {
            let diffs: Vec<f64> = rows.iter().map(|(b, js)| b - js[p]).collect();
            let e = Estimate::from_samples(&diffs);
            PerturbationRecord {
                id: pert.id.clone(),
                delta: pert.delta,
                d_j: e.mean,
                se: e.se,
                pass: e.mean >= -options.pass_sigmas * e.se,
            }
        })
        .collect::<Vec<_>>();

    let (max_u_slope, nodes) = first_order_check(problem, base, options.first_order_nodes, seed)?;
    let (lo, hi) = problem.concavity_box;
    let concavity = objective.terminal_concavity_probe(&[lo], &[hi], scenario.regime.num_states(), &[0.0, 0.5], 200, seed);
    let hamiltonian_max = max_u_slope < options.first_order_tolerance;
    let pass = records.iter().all(|r| r.pass) && hamiltonian_max;
    Ok(SufficiencyReport {
        example: problem.name.clone(),
        n_paths: options.n_paths,
        seed,
        candidate_factor: options.candidate_factor,
        objective: Estimate::from_samples(&base_values),
        records,
        max_u_slope,
        first_order_nodes: nodes,
        hamiltonian_max,
        concavity,
        within_hypotheses: problem.within_hypotheses,
        pass,
        scope: format!(
            "compares the base control with {} fixed perturbations only; not a certificate over all admissible controls",
            family.len()
        ),
    })
}

/// `max |∂H/∂u|` over `nodes` points of base paths (ten evenly spaced base
/// grid nodes per path), with the adjoint of the closed-form control.
pub fn first_order_check(
    problem: &ExampleProblem,
    base: &dyn ControlPolicy,
    nodes: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    const PER_PATH: usize = 10;
    if nodes == 0 {
        return Ok((0.0, 0));
    }
    let paths = nodes.div_ceil(PER_PATH);
    let dynamics = problem.dynamics.as_ref();
    let scenario = &problem.scenario;
    let slopes: Vec<(f64, usize)> = (0..paths)
        .into_par_iter()
        .map(|k| -> Result<(f64, usize)> {
            let noise = scenario.noise(dynamics.marks(), dynamics.dim(), seed, k)?;
            let path = simulate_with_noise(dynamics, base, &noise, &scenario.x0)?;
            let take = PER_PATH.min(nodes - k * PER_PATH);
            let mut worst: f64 = 0.0;
            for j in 0..take {
                // interior nodes, away from the terminal time
                let node = (j * (path.len() - 1)) / PER_PATH;
                let (t, x, u, i, y) = (path.times[node], &path.x[node], &path.u[node], path.theta[node], path.age[node]);
                let adj = problem.adjoint.adjoint(t, x, u, i, y)?;
                let s = u_slope(dynamics, &problem.objective, t, x, u[0], i, y, &adj);
                worst = if s.is_nan() { f64::NAN } else { worst.max(s.abs()) };
            }
            Ok((worst, take))
        })
        .collect::<Result<_>>()?;
    let worst = slopes.iter().fold(0.0, |m: f64, (s, _)| if s.is_nan() { f64::NAN } else { m.max(*s) });
    Ok((worst, slopes.iter().map(|s| s.1).sum()))
}
