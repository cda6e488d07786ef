use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::quadrature::gl64;
use crate::rng::StreamRng;

/// Law `π` of the scalar jump marks.
#[derive(Clone)]
pub enum MarkDist {
    /// Finitely many atoms; moments are exact sums.
    Discrete { atoms: Vec<f64>, weights: Vec<f64> },
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    /// Density on the bounded interval `[lo, hi]`, sampled by rejection
    /// against `max_density`; moments use 64-point Gauss–Legendre.
    Density {
        lo: f64,
        hi: f64,
        density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        max_density: f64,
    },
}

impl fmt::Debug for MarkDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Discrete { atoms, weights } => f
                .debug_struct("Discrete")
                .field("atoms", atoms)
                .field("weights", weights)
                .finish(),
            Self::Uniform { lo, hi } => write!(f, "Uniform[{lo}, {hi}]"),
            Self::Density { lo, hi, .. } => write!(f, "Density[{lo}, {hi}]"),
        }
    }
}

/// Jump clock rate `λ` and mark law `π`; the compensator is `λ π(dγ) dt`.
#[derive(Debug, Clone)]
pub struct MarkMeasure {
    rate: f64,
    dist: MarkDist,
}

impl MarkMeasure {
    pub fn new(rate: f64, dist: MarkDist) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::InvalidModel(format!("jump rate must be finite and >= 0, got {rate}")));
        }
        match &dist {
            MarkDist::Discrete { atoms, weights } => {
                if atoms.is_empty() || atoms.len() != weights.len() {
                    return Err(Error::InvalidModel(
                        "discrete marks need matching, non-empty atoms and weights".into(),
                    ));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || atoms.iter().any(|a| !a.is_finite()) {
                    return Err(Error::InvalidModel("mark weights must be >= 0 and atoms finite".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidModel(format!("mark weights sum to {total}, not 1")));
                }
            }
            MarkDist::Uniform { lo, hi } => {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::InvalidModel(format!("bad uniform mark interval [{lo}, {hi}]")));
                }
            }
            MarkDist::Density {
                lo,
                hi,
                density,
                max_density,
            } => {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::InvalidModel(format!("bad mark interval [{lo}, {hi}]")));
                }
                let mass = gl64().integrate(*lo, *hi, |g| density(g));
                if (mass - 1.0).abs() > 1e-8 {
                    return Err(Error::InvalidModel(format!("mark density integrates to {mass}, not 1")));
                }
                let peak = gl64()
                    .mapped(*lo, *hi)
                    .map(|(g, _)| density(g))
                    .fold(0.0, f64::max);
                if !(*max_density >= peak) {
                    return Err(Error::InvalidModel(format!(
                        "declared density bound {max_density} below observed {peak}"
                    )));
                }
            }
        }
        Ok(Self { rate, dist })
    }

    /// No asset jumps at all.
    pub fn none() -> Self {
        Self {
            rate: 0.0,
            dist: MarkDist::Discrete {
                atoms: vec![0.0],
                weights: vec![1.0],
            },
        }
    }

    /// Jumps of fixed size `mark` at rate `rate`.
    pub fn point(rate: f64, mark: f64) -> Result<Self> {
        Self::new(
            rate,
            MarkDist::Discrete {
                atoms: vec![mark],
                weights: vec![1.0],
            },
        )
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn dist(&self) -> &MarkDist {
        &self.dist
    }

    pub fn has_jumps(&self) -> bool {
        self.rate > 0.0
    }

    /// `∫ f(γ) π(dγ)`.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        match &self.dist {
            MarkDist::Discrete { atoms, weights } => {
                atoms.iter().zip(weights).map(|(&a, &w)| if w > 0.0 { w * f(a) } else { 0.0 }).sum()
            }
            MarkDist::Uniform { lo, hi } => {
                let w = 1.0 / (hi - lo);
                gl64().integrate(*lo, *hi, |g| w * f(g))
            }
            MarkDist::Density { lo, hi, density, .. } => {
                gl64().integrate(*lo, *hi, |g| density(g) * f(g))
            }
        }
    }

    /// Vector-valued `∫ f(γ) π(dγ)`.
    pub fn integrate_vec(&self, dim: usize, mut f: impl FnMut(f64) -> DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(dim);
        match &self.dist {
            MarkDist::Discrete { atoms, weights } => {
                for (&a, &w) in atoms.iter().zip(weights) {
                    if w > 0.0 {
                        acc.axpy(w, &f(a), 1.0);
                    }
                }
            }
            MarkDist::Uniform { lo, hi } => {
                let w = 1.0 / (hi - lo);
                for (g, wt) in gl64().mapped(*lo, *hi) {
                    acc.axpy(w * wt, &f(g), 1.0);
                }
            }
            MarkDist::Density { lo, hi, density, .. } => {
                for (g, wt) in gl64().mapped(*lo, *hi) {
                    acc.axpy(density(g) * wt, &f(g), 1.0);
                }
            }
        }
        acc
    }

    /// `∫ min(γ², 1) λ π(dγ)`.
    pub fn small_jump_activity(&self) -> f64 {
        self.rate * self.integrate(|g| (g * g).min(1.0))
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match &self.dist {
            MarkDist::Discrete { atoms, weights } => {
                let u = rng.uniform();
                let mut acc = 0.0;
                for (&a, &w) in atoms.iter().zip(weights) {
                    acc += w;
                    if u < acc {
                        return a;
                    }
                }
                *atoms.last().expect("non-empty atoms")
            }
            MarkDist::Uniform { lo, hi } => lo + (hi - lo) * rng.uniform(),
            MarkDist::Density {
                lo,
                hi,
                density,
                max_density,
            } => loop {
                let g = lo + (hi - lo) * rng.uniform();
                if rng.uniform() * max_density <= density(g) {
                    return g;
                }
            },
        }
    }
}
