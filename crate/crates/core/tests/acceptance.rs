//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the lines always appear; exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use smjd::cli::{example_problem, run_experiment, ExampleKind, ExperimentConfig, ExperimentKind, HoldingConfig};
use smjd::jump_diffusion::Scenario;
use smjd::maximum_principle::{adjoint_residual_order, dynkin_check, ArgmaxMode, FnValue};
use smjd::portfolio::{
    ql_phi_psi, rs_phi, ExampleProblem, FixedPointOptions, FunctionalGrid, PhiVariant, QuadraticLossModel,
    RiskSensitiveModel,
};
use smjd::rng::{Purpose, StreamRng};
use smjd::semi_markov::{
    regime_dynkin_check, simulate_regime_direct, simulate_regime_thinning, HoldingDist, RegimeModel, RegimePath,
    RegimeSampler, RegimeState,
};
use smjd::stats::{chi_square_homogeneity, ks_two_sample};
use smjd::verification::{
    first_order_check, hjb_grid_check, markov_reduction_experiment, sufficiency_experiment, DeterministicQuadratic,
    PerturbationFamily, ReductionStatus, SufficiencyOptions,
};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

const SEED: u64 = 20_240_601;

fn weibull_pair() -> RegimeModel {
    RegimeModel::two_state(
        HoldingDist::Weibull { shape: 1.5, scale: 0.8 },
        HoldingDist::Weibull { shape: 2.0, scale: 1.2 },
    )
    .unwrap()
}

/// Both examples under the default (two-state Weibull) configuration.
fn examples(dt: f64) -> Result<Vec<ExampleProblem>, Box<dyn std::error::Error>> {
    let mut c = ExperimentConfig::example(ExperimentKind::Simulate, SEED);
    c.numeric.dt = dt;
    Ok(vec![
        example_problem(&c, ExampleKind::RiskSensitive)?,
        example_problem(&c, ExampleKind::QuadraticLoss)?,
    ])
}

fn sampler_equivalence() -> Check {
    const EVENTS: usize = 100_000;
    let kernel = vec![vec![0.0, 0.3, 0.7], vec![0.6, 0.0, 0.4], vec![0.5, 0.5, 0.0]];
    let hs = vec![
        HoldingDist::Weibull { shape: 2.0, scale: 1.0 },
        HoldingDist::Weibull { shape: 1.5, scale: 0.7 },
        HoldingDist::Weibull { shape: 3.0, scale: 1.2 },
    ];
    let m = RegimeModel::new(kernel, hs)?;
    let o = RegimeState::new(0, 0.0);
    // mean sojourn is below one, so this horizon yields more than EVENTS jumps
    let horizon = 1.2 * EVENTS as f64;
    let a = simulate_regime_direct(&m, o, horizon, &mut StreamRng::new(SEED, Purpose::Regime, 0));
    let b = simulate_regime_thinning(&m, o, horizon, &mut StreamRng::new(SEED, Purpose::Regime, 1))?;
    let sojourns = |p: &RegimePath| p.completed_sojourns().iter().take(EVENTS).map(|s| s.1).collect::<Vec<_>>();
    let (sa, sb) = (sojourns(&a), sojourns(&b));
    if sa.len() < EVENTS || sb.len() < EVENTS {
        return Ok((false, format!("only {} / {} sojourns", sa.len(), sb.len())));
    }
    let ks = ks_two_sample(&sa, &sb);
    let count = |p: &RegimePath| {
        let mut c = vec![0u64; 9];
        for e in p.events().iter().take(EVENTS) {
            c[e.from * 3 + e.to] += 1;
        }
        c
    };
    let (stat, df, p) = chi_square_homogeneity(&count(&a), &count(&b));
    Ok((
        ks < 0.01 && p > 0.01,
        format!("KS {ks:.4} (< 0.01), transition chi2 {stat:.2} on {df} df, p {p:.3} (> 0.01), {EVENTS} events each"),
    ))
}

fn dynkin() -> Check {
    const K: f64 = 3.0;
    let m = weibull_pair();
    let o = RegimeState::new(0, 0.0);
    let fs: [fn(usize, f64) -> f64; 3] = [
        |i, y| (1.0 + i as f64) * y,
        |i, y| y.cos() + 0.5 * i as f64,
        |i, y| (-y).exp() * (1.0 + i as f64).powi(2),
    ];
    let mut pass = true;
    let mut worst: f64 = 0.0;
    for f in fs {
        let r = regime_dynkin_check(&m, &f, o, 1.0, 1e-3, 10_000, SEED)?;
        pass &= r.passes(K);
        worst = worst.max(r.gap.mean.abs() / r.gap.se);
    }
    // the controlled generator along candidate paths of the power-utility example
    let p = &examples(1e-3)?[0];
    let scenario = Scenario {
        dt: 1e-3,
        ..p.scenario.clone()
    };
    let vs = [
        FnValue::new(|_, x, i, y| x[0] * (1.0 + 0.1 * i as f64) * (-0.2 * y).exp()),
        FnValue::new(|t, x, _, y| x[0] * x[0] * (-t).exp() * (1.0 + y)),
        FnValue::new(|t, x, i, y| (1.0 + x[0]).ln() * (1.0 + 0.5 * i as f64) * (1.0 + t * y)),
    ];
    for v in &vs {
        let r = dynkin_check(v, p.dynamics.as_ref(), p.candidate().as_ref(), &scenario, 10_000, SEED)?;
        pass &= r.passes(K);
        worst = worst.max(r.gap.mean.abs() / r.gap.se);
    }
    Ok((pass, format!("3 regime + 3 controlled test functions, worst |gap|/SE {worst:.2} (< {K}), 1e4 paths, dt 1e-3")))
}

fn markov_reduction() -> Check {
    let mut c = ExperimentConfig::example(ExperimentKind::ReduceMarkov, SEED);
    c.model.regime.holding = vec![HoldingConfig::Exponential { rate: 1.0 }, HoldingConfig::Exponential { rate: 1.5 }];
    let grid = FunctionalGrid::new(21, 6);
    let mut pass = true;
    let mut parts = vec![];
    for kind in [ExampleKind::RiskSensitive, ExampleKind::QuadraticLoss] {
        let p = example_problem(&c, kind)?;
        let r = markov_reduction_experiment(&p, &grid, 10_000, 4_000, SEED)?;
        let ok = r.status == ReductionStatus::Applicable && r.pass == Some(true);
        pass &= ok;
        parts.push(format!("{}: age spread {:.1e}, agree {}", p.name, r.generator_age_spread.unwrap_or(f64::NAN), ok));
    }
    // a Weibull model must be reported as out of scope
    let w = example_problem(&ExperimentConfig::example(ExperimentKind::Simulate, SEED), ExampleKind::RiskSensitive)?;
    let r = markov_reduction_experiment(&w, &grid, 10, 10, SEED)?;
    let scoped = matches!(r.status, ReductionStatus::NotApplicable { .. });
    pass &= scoped;
    parts.push(format!("weibull not applicable: {scoped}"));
    Ok((pass, parts.join("; ")))
}

fn adjoint_order() -> Check {
    let mut pass = true;
    let mut parts = vec![];
    for p in examples(1e-3)? {
        let o = adjoint_residual_order(
            p.dynamics.as_ref(),
            p.candidate().as_ref(),
            &p.objective,
            p.adjoint.as_ref(),
            &p.scenario,
            4e-3,
            3,
            1000,
            SEED,
        )?;
        let ok = o.ratios_within(0.35, 0.65) && o.terminal_mismatch_max() == 0.0;
        pass &= ok;
        parts.push(format!(
            "{}: ratios [{}], terminal mismatch {:.1e}",
            p.name,
            o.ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", "),
            o.terminal_mismatch_max()
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn first_order() -> Check {
    let mut pass = true;
    let mut parts = vec![];
    for p in examples(5e-3)? {
        let (slope, nodes) = first_order_check(&p, p.candidate().as_ref(), 1000, SEED)?;
        let ok = slope < 1e-8 && nodes == 1000;
        pass &= ok;
        parts.push(format!("{}: max |dH/du| {slope:.1e} at {nodes} nodes", p.name));
    }
    Ok((pass, parts.join("; ")))
}

fn sufficiency() -> Check {
    let mut pass = true;
    let mut parts = vec![];
    for p in examples(5e-3)? {
        let family = PerturbationFamily::for_problem(&p);
        let start = Instant::now();
        let base = sufficiency_experiment(&p, &family, &SufficiencyOptions::default(), SEED)?;
        let secs = start.elapsed().as_secs_f64();
        let negative = sufficiency_experiment(
            &p,
            &family,
            &SufficiencyOptions {
                candidate_factor: 1.5,
                ..SufficiencyOptions::default()
            },
            SEED,
        )?;
        let detected = !negative.violations().is_empty();
        let ok = base.pass && family.len() >= 20 && base.n_paths == 10_000 && detected && secs < 300.0;
        pass &= ok;
        parts.push(format!(
            "{}: {} perturbations, {} violations, min dJ/SE {:.2}; 1.5x control flagged by {} ({secs:.0}s)",
            p.name,
            family.len(),
            base.violations().len(),
            base.records
                .iter()
                .filter(|r| r.se > 0.0)
                .map(|r| r.d_j / r.se)
                .fold(f64::INFINITY, f64::min),
            negative.violations().len()
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn closed_forms() -> Check {
    // no jumps and regime-free coefficients: the fixed point has a closed form
    let (r, mbar, d, horizon) = (0.05, 0.4, 1.2, 1.0);
    let m = QuadraticLossModel::diffusive(vec![r, r], vec![mbar, mbar], vec![0.2, 0.3], d, horizon)?;
    let f = ql_phi_psi(&m, &weibull_pair(), RegimeSampler::Direct, &FunctionalGrid::new(11, 6), 10_000, SEED, &FixedPointOptions::default())?;
    let mut worst: f64 = 0.0;
    for (n, &t) in f.phi.times().iter().enumerate() {
        let phi = -2.0 * ((2.0 * r - mbar * mbar) * (horizon - t)).exp();
        let psi = 2.0 * d * ((r - mbar * mbar) * (horizon - t)).exp();
        for i in 0..2 {
            for k in 0..f.phi.ages().len() {
                worst = worst.max(((f.phi.node(n, i, k).mean - phi) / phi).abs());
                worst = worst.max(((f.psi.node(n, i, k).mean - psi) / psi).abs());
            }
        }
    }
    let rs = RiskSensitiveModel::new(vec![0.05], vec![0.13], vec![0.2], 0.5, 1.0)?;
    let e = rs_phi(&rs, &RegimeModel::single_state(), RegimeSampler::Direct, 0.0, 0, 0.0, 100, SEED, PhiVariant::Integral)?;
    let exact = (e.mean - 5.865).abs() < 1e-12 && e.se == 0.0;
    Ok((
        worst < 0.01 && exact,
        format!("no-jump phi, psi max relative error {worst:.1e} (< 1%); single-regime phi {:.12} (se {})", e.mean, e.se),
    ))
}

fn hjb() -> Check {
    let ex = DeterministicQuadratic::default();
    let times: Vec<f64> = (0..10).map(|k| k as f64 / 9.0).collect();
    let xs: Vec<f64> = (0..10).map(|k| 0.5 + k as f64 / 6.0).collect();
    let model = RegimeModel::single_state();
    let run = |shift: f64| {
        hjb_grid_check(&ex.value(shift), &ex.objective(), &ex.dynamics(), &model, ex.horizon, &times, &xs, 0, 0.0, &ex.control_set(), ArgmaxMode::Strict)
    };
    let (good, bad) = (run(0.0)?, run(0.1)?);
    Ok((
        good.points == 100 && good.worst() < 1e-8 && bad.worst() > 1e-3,
        format!("exact V {:.1e} (< 1e-8) on {} points; V with d + 0.1: {:.2e} (> 1e-3)", good.worst(), good.points, bad.worst()),
    ))
}

fn small(kind: ExperimentKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::example(kind, SEED);
    c.numeric.n_paths = 500;
    c.numeric.functional_paths = 200;
    c.numeric.functional_grid = FunctionalGrid::new(21, 6);
    c.numeric.residual.n_paths = 100;
    c.numeric.sufficiency.first_order_nodes = 100;
    c.numeric.dynkin.n_paths = 500;
    c.numeric.dynkin.dt = 5e-3;
    c
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Check {
    let root = tempfile::tempdir()?;
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let mut identical = 0;
    let mut differing = vec![];
    for kind in ExperimentKind::ALL {
        let c = small(kind);
        let a = root.path().join(format!("{kind}-a"));
        let b = root.path().join(format!("{kind}-b"));
        run_experiment(kind, &c, &a)?;
        one.install(|| run_experiment(kind, &c, &b))?;
        let (fa, fb) = (read_all(&a), read_all(&b));
        if fa == fb && fa.len() >= 4 {
            identical += 1;
        } else {
            differing.push(kind.name());
        }
    }
    Ok((
        differing.is_empty(),
        format!(
            "{identical}/{} commands byte-identical between a parallel and a single-thread run{}",
            ExperimentKind::ALL.len(),
            if differing.is_empty() { String::new() } else { format!(", differing: {differing:?}") }
        ),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("sampler equivalence", sampler_equivalence),
        ("generator / Dynkin", dynkin),
        ("Markov reduction", markov_reduction),
        ("adjoint residual order", adjoint_order),
        ("first-order optimality", first_order),
        ("sufficiency inequality", sufficiency),
        ("closed-form cross-checks", closed_forms),
        ("HJB residual", hjb),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {} {} {name}: {detail} [{:.1}s]",
            n + 1,
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
