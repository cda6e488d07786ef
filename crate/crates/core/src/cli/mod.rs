//! Configuration-driven experiment runner behind the `smjd` binary.
//!
//! Every run writes `resolved_config.json`, `results.csv`, `report.json` and
//! `summary.txt` into the output directory. Given the same configuration and
//! seed the files are byte-identical, whatever the number of worker threads.

mod config;

pub use config::{
    ConfigError, DynkinConfig, ExampleKind, ExperimentConfig, ExperimentKind, HjbConfig, HoldingConfig,
    MarkDistConfig, MarksConfig, ModelConfig, NumericConfig, PolicyEvalConfig, QuadraticLossConfig, RegimeConfig,
    ResidualConfig, RiskSensitiveConfig, SufficiencyConfig, SEED_ENV,
};

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::jump_diffusion::{path_objective, simulate_with_noise, Scenario};
use crate::maximum_principle::{adjoint_residual_order, dynkin_check, hjb_residual, ArgmaxMode, FnValue, ResidualOrder};
use crate::portfolio::{
    ql_optimal_control, ql_phi_psi, rs_optimal_control, rs_phi_functional, write_functionals_csv, ExampleProblem,
    QlFunctionals, RegimeFunctional, RsAdjoint,
};
use crate::semi_markov::{regime_dynkin_check, RegimeModel};
use crate::stats::Estimate;
use crate::verification::{
    markov_reduction_experiment, sufficiency_experiment, DeterministicQuadratic, PerturbationFamily, ReductionStatus,
    SufficiencyOptions,
};

/// Failure of a run: bad configuration (exit status 2), a numerical error
/// from the library, or an I/O error (both exit status 1).
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] crate::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

/// Outcome of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub pass: bool,
    pub summary: String,
}

impl RunOutcome {
    pub fn exit_code(&self) -> u8 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// Where the effective seed came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedSource {
    Config,
    Environment,
    Flag,
}

/// Apply seed overrides: the `--seed` flag wins over [`SEED_ENV`], which
/// wins over the file.
pub fn apply_seed_override(
    config: &mut ExperimentConfig,
    flag: Option<u64>,
    env: Option<&str>,
) -> Result<SeedSource, ConfigError> {
    if let Some(s) = flag {
        config.seed = s;
        return Ok(SeedSource::Flag);
    }
    if let Some(v) = env {
        config.seed = v
            .trim()
            .parse()
            .map_err(|_| ConfigError::new(SEED_ENV, format!("not an unsigned 64-bit integer: {v:?}")))?;
        return Ok(SeedSource::Environment);
    }
    Ok(SeedSource::Config)
}

/// JSON schema of [`ExperimentConfig`].
pub fn config_schema() -> String {
    let schema = schemars::schema_for!(ExperimentConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes")
}

struct Artifacts {
    results: String,
    report: serde_json::Value,
    pass: bool,
    summary: Vec<String>,
    extra: Vec<(&'static str, String)>,
}

/// Validate `config` for `command`, run it and write the result files into
/// `out`.
pub fn run_experiment(command: ExperimentKind, config: &ExperimentConfig, out: &Path) -> Result<RunOutcome, RunError> {
    config.validate(command)?;
    let mut resolved = config.clone();
    resolved.experiment = Some(command);
    std::fs::create_dir_all(out)?;
    write_file(out, "resolved_config.json", &(pretty(&resolved) + "\n"))?;
    log::info!("{command}: seed {}, output {}", config.seed, out.display());

    let art = match command {
        ExperimentKind::Simulate => simulate(config)?,
        ExperimentKind::RsVerify | ExperimentKind::QlVerify => verify(config, command)?,
        ExperimentKind::Dynkin => dynkin(config)?,
        ExperimentKind::Hjb => hjb(config)?,
        ExperimentKind::ReduceMarkov => reduce_markov(config)?,
        ExperimentKind::PolicyEval => policy_eval(config)?,
    };

    let mut summary = String::new();
    let _ = writeln!(summary, "experiment: {command}");
    let _ = writeln!(summary, "seed: {}", config.seed);
    for line in &art.summary {
        let _ = writeln!(summary, "{line}");
    }
    let _ = writeln!(summary, "result: {}", if art.pass { "PASS" } else { "FAIL" });

    write_file(out, "results.csv", &art.results)?;
    write_file(out, "report.json", &(pretty(&art.report) + "\n"))?;
    write_file(out, "summary.txt", &summary)?;
    for (name, body) in &art.extra {
        write_file(out, name, body)?;
    }
    Ok(RunOutcome { pass: art.pass, summary })
}

fn write_file(dir: &Path, name: &str, body: &str) -> std::io::Result<()> {
    let mut f = std::fs::File::create(dir.join(name))?;
    f.write_all(body.as_bytes())
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

/// Round-trip float format (17 significant digits).
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

enum Functionals {
    Rs(Arc<RegimeFunctional>),
    Ql(Arc<QlFunctionals>),
}

/// The example problem `config` describes, with its functionals estimated
/// as a run would.
pub fn example_problem(config: &ExperimentConfig, kind: ExampleKind) -> Result<ExampleProblem, RunError> {
    Ok(build_problem(config, kind)?.0)
}

fn build_problem(config: &ExperimentConfig, kind: ExampleKind) -> Result<(ExampleProblem, Functionals), RunError> {
    let regime = config.regime_model()?;
    let n = &config.numeric;
    let sampler = config.model.regime.sampler;
    let (mut problem, f) = match kind {
        ExampleKind::RiskSensitive => {
            let m = config.risk_sensitive_model()?;
            let c = &config.model.risk_sensitive;
            let phi = Arc::new(rs_phi_functional(
                &m,
                &regime,
                sampler,
                &n.functional_grid,
                n.functional_paths,
                config.seed,
                c.phi_variant,
            )?);
            let mut p = ExampleProblem::risk_sensitive(m.clone(), regime, sampler, c.x0, n.dt, phi.clone());
            p.adjoint = Arc::new(RsAdjoint::new(m, phi.clone()).with_regime_jump(c.regime_jump));
            (p, Functionals::Rs(phi))
        }
        ExampleKind::QuadraticLoss => {
            let m = config.quadratic_loss_model()?;
            let f = Arc::new(ql_phi_psi(
                &m,
                &regime,
                sampler,
                &n.functional_grid,
                n.functional_paths,
                config.seed,
                &n.fixed_point,
            )?);
            let x0 = config.model.quadratic_loss.x0;
            (ExampleProblem::quadratic_loss(m, regime, sampler, x0, n.dt, f.clone()), Functionals::Ql(f))
        }
    };
    problem.scenario.origin = config.origin();
    Ok((problem, f))
}

fn functional_summary(f: &Functionals) -> (serde_json::Value, Vec<String>) {
    match f {
        Functionals::Rs(phi) => (
            json!({"phi_max_se": phi.max_se(), "n_paths": phi.n_paths()}),
            vec![format!("phi: max se {:.3e}", phi.max_se())],
        ),
        Functionals::Ql(f) => (
            json!({
                "phi_max_se": f.phi.max_se(),
                "psi_max_se": f.psi.max_se(),
                "n_paths": f.phi.n_paths(),
                "iterations": f.iterations,
                "trace": f.trace,
            }),
            vec![format!(
                "phi, psi: {} fixed-point iteration(s), max se {:.3e} / {:.3e}",
                f.iterations,
                f.phi.max_se(),
                f.psi.max_se()
            )],
        ),
    }
}

fn simulate(config: &ExperimentConfig) -> Result<Artifacts, RunError> {
    let kind = config.model.example;
    let (problem, f) = build_problem(config, kind)?;
    let dynamics = problem.dynamics.as_ref();
    let policy = problem.candidate();
    let scenario = &problem.scenario;
    let seed = config.seed;
    let rows: Vec<(f64, f64, usize, f64, usize)> = (0..config.numeric.n_paths)
        .into_par_iter()
        .map(|k| -> crate::Result<_> {
            let noise = scenario.noise(dynamics.marks(), dynamics.dim(), seed, k)?;
            let path = simulate_with_noise(dynamics, policy.as_ref(), &noise, &scenario.x0)?;
            let j = path_objective(dynamics, policy.as_ref(), &problem.objective, &noise, &scenario.x0)?;
            let last = path.len() - 1;
            let switches = path.events.iter().filter(|e| e.regime.is_some()).count();
            Ok((path.x[last][0], j, path.theta[last], path.age[last], switches))
        })
        .collect::<crate::Result<_>>()?;
    let mut csv = String::from("path,x_T,objective,final_regime,final_age,regime_switches\n");
    for (k, r) in rows.iter().enumerate() {
        let _ = writeln!(csv, "{k},{},{},{},{},{}", num(r.0), num(r.1), r.2, num(r.3), r.4);
    }
    let wealth: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let objective = Estimate::from_samples(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
    let terminal = Estimate::from_samples(&wealth);
    let (fs, mut lines) = functional_summary(&f);
    lines.insert(0, format!("example: {}", problem.name));
    lines.push(format!("paths: {}, dt: {}", config.numeric.n_paths, config.numeric.dt));
    lines.push(format!("objective: {:.6e} (se {:.3e})", objective.mean, objective.se));
    lines.push(format!("terminal wealth: {:.6e} (se {:.3e})", terminal.mean, terminal.se));
    Ok(Artifacts {
        results: csv,
        report: json!({
            "experiment": "simulate",
            "example": problem.name,
            "seed": seed,
            "n_paths": config.numeric.n_paths,
            "dt": config.numeric.dt,
            "objective": objective,
            "terminal_wealth": terminal,
            "functionals": fs,
            "pass": true,
        }),
        pass: true,
        summary: lines,
        extra: vec![],
    })
}

fn residual_order(config: &ExperimentConfig, problem: &ExampleProblem) -> Result<Option<(ResidualOrder, bool)>, RunError> {
    let r = &config.numeric.residual;
    if !r.enabled {
        return Ok(None);
    }
    let order = adjoint_residual_order(
        problem.dynamics.as_ref(),
        problem.candidate().as_ref(),
        &problem.objective,
        problem.adjoint.as_ref(),
        &problem.scenario,
        r.coarsest,
        r.levels,
        r.n_paths,
        config.seed,
    )?;
    let pass = order.ratios_within(r.ratio_band.0, r.ratio_band.1) && order.terminal_mismatch_max() < 1e-12;
    Ok(Some((order, pass)))
}

fn verify(config: &ExperimentConfig, command: ExperimentKind) -> Result<Artifacts, RunError> {
    let (problem, f) = build_problem(config, config.example_for(command))?;
    let family = config.perturbations.clone().unwrap_or_else(|| PerturbationFamily::for_problem(&problem));
    let s = &config.numeric.sufficiency;
    let options = SufficiencyOptions {
        n_paths: config.numeric.n_paths,
        candidate_factor: s.candidate_factor,
        first_order_nodes: s.first_order_nodes,
        first_order_tolerance: s.first_order_tolerance,
        pass_sigmas: s.pass_sigmas,
    };
    let report = sufficiency_experiment(&problem, &family, &options, config.seed)?;
    let residual = residual_order(config, &problem)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let (fs, mut lines) = functional_summary(&f);
    lines.insert(0, format!("example: {}", problem.name));
    lines.push(format!(
        "paths: {}, dt: {}, candidate factor: {}",
        options.n_paths, config.numeric.dt, options.candidate_factor
    ));
    lines.push(format!("objective: {:.6e} (se {:.3e})", report.objective.mean, report.objective.se));
    lines.push(format!(
        "perturbations: {} compared, {} with dJ < -{}*SE",
        report.records.len(),
        report.violations().len(),
        options.pass_sigmas
    ));
    for v in report.violations() {
        lines.push(format!("  violated: {} dJ {:.6e} se {:.3e}", v.id, v.d_j, v.se));
    }
    lines.push(format!(
        "first-order condition: max |dH/du| {:.3e} over {} nodes ({})",
        report.max_u_slope,
        report.first_order_nodes,
        if report.hamiltonian_max { "ok" } else { "violated" }
    ));
    lines.push(format!("concavity probe: {}", if report.concavity { "ok" } else { "failed" }));
    lines.push(format!("within theorem hypotheses: {}", report.within_hypotheses));
    let mut pass = report.pass;
    let residual_json = match &residual {
        Some((order, ok)) => {
            pass &= *ok;
            lines.push(format!(
                "adjoint residual ratios: {:?} (terminal mismatch {:.3e}, {})",
                order.ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
                order.terminal_mismatch_max(),
                if *ok { "ok" } else { "outside band" }
            ));
            json!({"order": order, "pass": ok})
        }
        None => serde_json::Value::Null,
    };
    lines.push(format!("scope: {}", report.scope));
    Ok(Artifacts {
        results: String::from_utf8(csv).expect("csv is utf-8"),
        report: json!({
            "experiment": command.name(),
            "sufficiency": report,
            "adjoint_residual": residual_json,
            "functionals": fs,
            "pass": pass,
        }),
        pass,
        summary: lines,
        extra: vec![],
    })
}

type TestFunction = (&'static str, fn(usize, f64) -> f64);

/// Smooth test functions of `(regime, age)`.
const REGIME_FUNCTIONS: [TestFunction; 3] = [
    ("(1+i)*y", |i, y| (1.0 + i as f64) * y),
    ("cos(y)+i/2", |i, y| y.cos() + 0.5 * i as f64),
    ("exp(-y)*(1+i)^2", |i, y| (-y).exp() * (1.0 + i as f64).powi(2)),
];

fn dynkin(config: &ExperimentConfig) -> Result<Artifacts, RunError> {
    let d = &config.numeric.dynkin;
    let regime = config.regime_model()?;
    let origin = config.origin();
    let horizon = config.model.horizon;
    let mut csv = String::from("check,function,lhs,lhs_se,rhs,rhs_se,gap,gap_se,pass\n");
    let mut rows = Vec::new();
    let mut lines = vec![format!("paths: {}, dt: {}, threshold: {} SE", d.n_paths, d.dt, d.sigmas)];
    let mut pass = true;
    let mut record = |check: &str, name: &str, lhs: Estimate, rhs: Estimate, gap: Estimate, ok: bool| {
        let _ = writeln!(
            csv,
            "{check},{name},{},{},{},{},{},{},{ok}",
            num(lhs.mean),
            num(lhs.se),
            num(rhs.mean),
            num(rhs.se),
            num(gap.mean),
            num(gap.se)
        );
        lines.push(format!("{check} {name}: gap {:.3e} (se {:.3e}) {}", gap.mean, gap.se, if ok { "ok" } else { "FAIL" }));
        rows.push(json!({"check": check, "function": name, "lhs": lhs, "rhs": rhs, "gap": gap, "pass": ok}));
        pass &= ok;
    };
    for (name, f) in REGIME_FUNCTIONS {
        let r = regime_dynkin_check(&regime, &f, origin, horizon, d.dt, d.n_paths, config.seed)?;
        record("regime", name, r.lhs, r.rhs, r.gap, r.passes(d.sigmas));
    }
    // the controlled generator along candidate paths of the configured example
    let (problem, _) = build_problem(config, config.model.example)?;
    let scenario = Scenario {
        dt: d.dt,
        ..problem.scenario.clone()
    };
    let joint: [(&str, FnValue); 2] = [
        ("x*(1+i/10)*exp(-y/5)", FnValue::new(|_, x, i, y| x[0] * (1.0 + 0.1 * i as f64) * (-0.2 * y).exp())),
        ("x^2*exp(-t)*(1+y)", FnValue::new(|t, x, _, y| x[0] * x[0] * (-t).exp() * (1.0 + y))),
    ];
    for (name, v) in &joint {
        let r = dynkin_check(v, problem.dynamics.as_ref(), problem.candidate().as_ref(), &scenario, d.n_paths, config.seed)?;
        record("controlled", name, r.lhs, r.rhs, r.gap, r.passes(d.sigmas));
    }
    lines.insert(0, format!("example for controlled checks: {}", problem.name));
    Ok(Artifacts {
        results: csv,
        report: json!({
            "experiment": "dynkin",
            "n_paths": d.n_paths,
            "dt": d.dt,
            "sigmas": d.sigmas,
            "checks": rows,
            "pass": pass,
        }),
        pass,
        summary: lines,
        extra: vec![],
    })
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

fn hjb(config: &ExperimentConfig) -> Result<Artifacts, RunError> {
    let h = &config.hjb;
    let ex = DeterministicQuadratic {
        r: h.r,
        d: h.d,
        horizon: h.horizon,
    };
    let (dynamics, objective, set) = (ex.dynamics(), ex.objective(), ex.control_set());
    let model = RegimeModel::single_state();
    let times = linspace(0.0, h.horizon, h.t_nodes);
    let xs = linspace(h.x_min, h.x_max, h.x_nodes);
    let mut csv = String::from("case,t,x,residual,terminal_gap\n");
    let mut worst = [0.0f64; 2];
    for (c, (case, shift)) in [("exact", 0.0), ("shifted", h.shift)].into_iter().enumerate() {
        let v = ex.value(shift);
        for &t in &times {
            for &x in &xs {
                let r = hjb_residual(&v, &objective, &dynamics, &model, h.horizon, t, &DVector::from_element(1, x), 0, 0.0, &set, ArgmaxMode::Strict)?;
                let _ = writeln!(csv, "{case},{},{},{},{}", num(t), num(x), num(r.residual), num(r.terminal_gap));
                worst[c] = worst[c].max(r.worst());
            }
        }
    }
    let exact_ok = worst[0] < h.tolerance;
    let detected = worst[1] > h.detection_threshold;
    let pass = exact_ok && detected;
    Ok(Artifacts {
        results: csv,
        report: json!({
            "experiment": "hjb",
            "points": times.len() * xs.len(),
            "exact_worst": worst[0],
            "tolerance": h.tolerance,
            "exact_pass": exact_ok,
            "shifted_worst": worst[1],
            "detection_threshold": h.detection_threshold,
            "negative_control_detected": detected,
            "pass": pass,
        }),
        pass,
        summary: vec![
            format!("grid: {} x {} (t, x)", h.t_nodes, h.x_nodes),
            format!("exact value: max |residual|, terminal gap {:.3e} (tolerance {:.0e})", worst[0], h.tolerance),
            format!(
                "value with d shifted by {}: {:.3e} ({})",
                h.shift,
                worst[1],
                if detected { "detected" } else { "NOT detected" }
            ),
        ],
        extra: vec![],
    })
}

fn reduce_markov(config: &ExperimentConfig) -> Result<Artifacts, RunError> {
    let (problem, _) = build_problem(config, config.model.example)?;
    let n = &config.numeric;
    let r = markov_reduction_experiment(&problem, &n.functional_grid, n.n_paths, n.functional_paths, config.seed)?;
    let mut csv = String::from("quantity,regime,semi_markov,se_semi_markov,markov_chain,se_markov_chain,agree\n");
    let mut lines = vec![format!("example: {}", problem.name)];
    if let (Some(a), Some(b), Some(ok)) = (r.objective_semi_markov, r.objective_markov_chain, r.objective_agree) {
        let _ = writeln!(csv, "objective,,{},{},{},{},{ok}", num(a.mean), num(a.se), num(b.mean), num(b.se));
        lines.push(format!("objective: {:.6e} vs {:.6e} ({})", a.mean, b.mean, if ok { "agree" } else { "DISAGREE" }));
    }
    for c in &r.phi {
        let (a, b) = (c.semi_markov, c.markov_chain);
        let _ = writeln!(csv, "phi,{},{},{},{},{},{}", c.regime, num(a.mean), num(a.se), num(b.mean), num(b.se), c.agree);
        lines.push(format!(
            "phi(0, {}, 0): {:.6e} vs {:.6e} ({})",
            c.regime,
            a.mean,
            b.mean,
            if c.agree { "agree" } else { "DISAGREE" }
        ));
    }
    match &r.status {
        ReductionStatus::Applicable => lines.push(format!(
            "generator age spread: {:.3e} (tolerance {:.0e})",
            r.generator_age_spread.unwrap_or(f64::NAN),
            r.generator_tolerance
        )),
        ReductionStatus::NotApplicable { reason } => lines.push(format!("not applicable: {reason}")),
    }
    let pass = r.pass.unwrap_or(true);
    Ok(Artifacts {
        results: csv,
        report: json!({"experiment": "reduce-markov", "reduction": r, "pass": pass}),
        pass,
        summary: lines,
        extra: vec![],
    })
}

fn policy_eval(config: &ExperimentConfig) -> Result<Artifacts, RunError> {
    let kind = config.model.example;
    let (problem, f) = build_problem(config, kind)?;
    let p = &config.policy_eval;
    let regimes = problem.scenario.regime.num_states();
    let mut csv = String::from("t,i,y,x,u,phi,psi\n");
    let mut count = 0usize;
    for &t in &p.times {
        for i in 0..regimes {
            for &y in &p.ages {
                for &x in &p.wealth {
                    let (u, phi, psi) = match &f {
                        Functionals::Rs(phi) => {
                            let m = config.risk_sensitive_model()?;
                            (rs_optimal_control(&m, t, x, i)?, phi.value(t, i, y), f64::NAN)
                        }
                        Functionals::Ql(q) => {
                            let m = config.quadratic_loss_model()?;
                            (ql_optimal_control(&m, t, x, i, y, q)?, q.phi.value(t, i, y), q.psi.value(t, i, y))
                        }
                    };
                    let psi = if psi.is_nan() { String::new() } else { num(psi) };
                    let _ = writeln!(csv, "{},{i},{},{},{},{},{psi}", num(t), num(y), num(x), num(u), num(phi));
                    count += 1;
                }
            }
        }
    }
    let mut extra = vec![];
    if p.write_functionals {
        let mut buf = Vec::new();
        match &f {
            Functionals::Rs(phi) => write_functionals_csv(&mut buf, phi, None)?,
            Functionals::Ql(q) => write_functionals_csv(&mut buf, &q.phi, Some(&q.psi))?,
        }
        extra.push(("functionals.csv", String::from_utf8(buf).expect("csv is utf-8")));
    }
    let (fs, mut lines) = functional_summary(&f);
    lines.insert(0, format!("example: {}", problem.name));
    lines.push(format!("{count} control evaluations"));
    Ok(Artifacts {
        results: csv,
        report: json!({"experiment": "policy-eval", "example": problem.name, "evaluations": count, "functionals": fs, "pass": true}),
        pass: true,
        summary: lines,
        extra,
    })
}
