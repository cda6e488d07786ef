use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::ControlledDynamics;
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamRng};

/// Finite box on which the coefficients are probed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Controls to probe at; empty means the zero control.
    pub controls: Vec<Vec<f64>>,
    pub time: (f64, f64),
    pub regimes: usize,
}

impl ProbeDomain {
    pub fn cube(dim: usize, half_width: f64, horizon: f64, regimes: usize) -> Self {
        Self {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
            controls: Vec::new(),
            time: (0.0, horizon),
            regimes,
        }
    }
}

/// Empirical growth (`c1`) and Lipschitz (`c2`) constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub c1: f64,
    pub c2: f64,
    /// `c1` restricted to the half-size box around the centre.
    pub c1_inner: f64,
    /// `c2` over pairs drawn from the half-size box.
    pub c2_inner: f64,
    /// Set when the full-box ratio exceeds 1.5 times the inner one.
    pub growth_flag: bool,
    pub samples: usize,
    /// Evaluations that produced a non-finite value; they are skipped.
    pub non_finite: usize,
}

const FLAG_FACTOR: f64 = 1.5;

struct Coefs {
    b: DVector<f64>,
    sigma: nalgebra::DMatrix<f64>,
}

/// Samples point pairs in the box and reports
///
/// ```text
/// c1 = max (|σ|² + ‖b‖² + λ∫‖g‖² dπ) / (1 + ‖x‖²)
/// c2 = max (|σ − σ'|² + ‖b − b'‖² + λ∫‖g − g'‖² dπ) / ‖x − x'‖²
/// ```
///
/// Even samples come from the box shrunk by half about its centre, odd ones
/// from the full box; a ratio that keeps climbing with the radius raises the
/// growth flag.
pub fn coefficient_regularity_probe(
    dynamics: &dyn ControlledDynamics,
    domain: &ProbeDomain,
    n_samples: usize,
    seed: u64,
) -> Result<RegularityReport> {
    let r = dynamics.dim();
    if domain.lo.len() != r || domain.hi.len() != r {
        return Err(Error::InvalidArgument(format!("probe box must have dimension {r}")));
    }
    if domain.lo.iter().chain(&domain.hi).any(|v| !v.is_finite())
        || domain.lo.iter().zip(&domain.hi).any(|(l, h)| l > h)
    {
        return Err(Error::InvalidArgument("probe box must be finite and ordered".into()));
    }
    let controls: Vec<DVector<f64>> = if domain.controls.is_empty() {
        vec![DVector::zeros(dynamics.control_dim())]
    } else {
        domain.controls.iter().map(|c| DVector::from_column_slice(c)).collect()
    };
    let marks = dynamics.marks();
    let lambda = marks.rate();
    let regimes = domain.regimes.max(1);
    let mut rng = StreamRng::new(seed, Purpose::Probe, 0);

    let draw = |rng: &mut StreamRng, scale: f64| {
        DVector::from_iterator(
            r,
            domain.lo.iter().zip(&domain.hi).map(|(l, h)| {
                let c = 0.5 * (l + h);
                let w = 0.5 * (h - l) * scale;
                c - w + 2.0 * w * rng.uniform()
            }),
        )
    };

    let mut rep = RegularityReport {
        c1: 0.0,
        c2: 0.0,
        c1_inner: 0.0,
        c2_inner: 0.0,
        growth_flag: false,
        samples: n_samples,
        non_finite: 0,
    };
    for s in 0..n_samples {
        let inner = s % 2 == 0;
        let scale = if inner { 0.5 } else { 1.0 };
        let x = draw(&mut rng, scale);
        let xp = if rng.uniform() < 0.5 {
            draw(&mut rng, scale)
        } else {
            // nearby partner, for local Lipschitz behaviour
            let mut z = x.clone();
            for (l, zl) in z.iter_mut().enumerate() {
                let w = 1e-3 * (domain.hi[l] - domain.lo[l]).max(1e-12);
                *zl += w * rng.normal();
            }
            z
        };
        let t = domain.time.0 + (domain.time.1 - domain.time.0) * rng.uniform();
        let i = ((rng.uniform() * regimes as f64) as usize).min(regimes - 1);
        let u = &controls[((rng.uniform() * controls.len() as f64) as usize).min(controls.len() - 1)];

        let eval = |x: &DVector<f64>| Coefs {
            b: dynamics.drift(t, x, u, i),
            sigma: dynamics.vol(t, x, u, i),
        };
        let a = eval(&x);
        let bp = eval(&xp);

        let jump_sq = if lambda > 0.0 {
            lambda * marks.integrate(|g| dynamics.jump(t, &x, u, i, g).norm_squared())
        } else {
            0.0
        };
        let growth = (a.sigma.norm_squared() + a.b.norm_squared() + jump_sq) / (1.0 + x.norm_squared());

        let dx2 = (&x - &xp).norm_squared();
        let lip = if dx2 > 0.0 {
            let jump_diff = if lambda > 0.0 {
                lambda
                    * marks.integrate(|g| {
                        (dynamics.jump(t, &x, u, i, g) - dynamics.jump(t, &xp, u, i, g)).norm_squared()
                    })
            } else {
                0.0
            };
            ((&a.sigma - &bp.sigma).norm_squared() + (&a.b - &bp.b).norm_squared() + jump_diff) / dx2
        } else {
            0.0
        };

        if !growth.is_finite() || !lip.is_finite() {
            rep.non_finite += 1;
            continue;
        }
        rep.c1 = rep.c1.max(growth);
        rep.c2 = rep.c2.max(lip);
        if inner {
            rep.c1_inner = rep.c1_inner.max(growth);
            rep.c2_inner = rep.c2_inner.max(lip);
        }
    }
    let climbs = |outer: f64, inner: f64| outer > FLAG_FACTOR * inner && outer > 1e-12;
    rep.growth_flag = climbs(rep.c1, rep.c1_inner) || climbs(rep.c2, rep.c2_inner) || rep.non_finite > 0;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump_diffusion::{MarkMeasure, ScalarDynamics};

    fn domain(w: f64) -> ProbeDomain {
        ProbeDomain::cube(1, w, 1.0, 1)
    }

    #[test]
    fn zero_coefficients() {
        let d = ScalarDynamics::frozen(MarkMeasure::none());
        let rep = coefficient_regularity_probe(&d, &domain(10.0), 500, 1).unwrap();
        assert_eq!(rep.c1, 0.0);
        assert_eq!(rep.c2, 0.0);
        assert!(!rep.growth_flag);
    }

    #[test]
    fn linear_drift_lipschitz_constant() {
        let d = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(|_, x, _, _| 2.0 * x);
        let rep = coefficient_regularity_probe(&d, &domain(10.0), 2000, 2).unwrap();
        assert!((rep.c2 - 4.0).abs() < 1e-9, "{rep:?}");
        assert!(rep.c1 <= 4.0 && rep.c1 > 3.9);
        assert!(!rep.growth_flag);
    }

    #[test]
    fn quadratic_drift_flagged() {
        let d = ScalarDynamics::frozen(MarkMeasure::none()).with_drift(|_, x, _, _| x * x);
        let rep = coefficient_regularity_probe(&d, &domain(10.0), 2000, 3).unwrap();
        assert!(rep.growth_flag, "{rep:?}");
    }

    #[test]
    fn jump_term_counts_with_intensity() {
        let d = ScalarDynamics::frozen(MarkMeasure::point(3.0, 0.5).unwrap()).with_jump(|_, x, _, _, g| g * x);
        let rep = coefficient_regularity_probe(&d, &domain(1.0), 2000, 4).unwrap();
        assert!((rep.c2 - 0.75).abs() < 1e-9, "{rep:?}");
    }
}
