//! Holding-time (sojourn) distributions.

use std::fmt;
use std::sync::Arc;

/// Survival values below this are treated as "age beyond support".
pub(crate) const SUPPORT_EPS: f64 = 1e-15;

/// Absolute tolerance on the time axis for numeric cdf inversion.
pub const INVERSION_TOL: f64 = 1e-10;

/// A user-supplied holding-time law given by its density and cdf.
///
/// Implementors must also declare an upper bound of the hazard on any finite
/// age window; the thinning sampler refuses laws without one.
pub trait HoldingLaw: Send + Sync + fmt::Debug {
    fn density(&self, age: f64) -> f64;
    fn cdf(&self, age: f64) -> f64;
    /// Upper bound of `density / (1 - cdf)` on `[lo, hi]`, or `None` if no
    /// finite bound is known.
    fn hazard_bound(&self, lo: f64, hi: f64) -> Option<f64>;
}

/// Per-state holding-time distribution.
#[derive(Clone)]
pub enum HoldingDist {
    Exponential { rate: f64 },
    Weibull { shape: f64, scale: f64 },
    Custom(Arc<dyn HoldingLaw>),
}

impl fmt::Debug for HoldingDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exponential { rate } => write!(f, "Exponential({rate})"),
            Self::Weibull { shape, scale } => write!(f, "Weibull(k={shape}, s={scale})"),
            Self::Custom(law) => write!(f, "Custom({law:?})"),
        }
    }
}

impl HoldingDist {
    pub fn density(&self, y: f64) -> f64 {
        match *self {
            Self::Exponential { rate } => rate * (-rate * y).exp(),
            Self::Weibull { shape, scale } => {
                if y < 0.0 {
                    return 0.0;
                }
                let z = y / scale;
                (shape / scale) * z.powf(shape - 1.0) * (-z.powf(shape)).exp()
            }
            Self::Custom(ref law) => law.density(y),
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return match self {
                Self::Custom(law) => law.cdf(y),
                _ => 0.0,
            };
        }
        match *self {
            Self::Exponential { rate } => -(-rate * y).exp_m1(),
            Self::Weibull { shape, scale } => -(-(y / scale).powf(shape)).exp_m1(),
            Self::Custom(ref law) => law.cdf(y),
        }
    }

    /// `1 - F(y)`, computed without cancellation for the analytic laws.
    pub fn survival(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 1.0 - self.cdf(y);
        }
        match *self {
            Self::Exponential { rate } => (-rate * y).exp(),
            Self::Weibull { shape, scale } => (-(y / scale).powf(shape)).exp(),
            Self::Custom(ref law) => 1.0 - law.cdf(y),
        }
    }

    /// Raw hazard `f/(1-F)`; `None` when the survival has hit the support
    /// threshold. Analytic laws use their closed-form hazard.
    pub(crate) fn hazard(&self, y: f64) -> Option<f64> {
        if self.survival(y) < SUPPORT_EPS {
            return None;
        }
        Some(match *self {
            Self::Exponential { rate } => rate,
            Self::Weibull { shape, scale } => (shape / scale) * (y / scale).powf(shape - 1.0),
            Self::Custom(ref law) => law.density(y) / (1.0 - law.cdf(y)),
        })
    }

    /// Declared hazard majorant on the age window `[lo, hi]`.
    pub fn hazard_bound(&self, lo: f64, hi: f64) -> Option<f64> {
        match *self {
            Self::Exponential { rate } => Some(rate),
            Self::Weibull { shape, scale } => {
                let h = |y: f64| (shape / scale) * (y / scale).powf(shape - 1.0);
                if shape >= 1.0 {
                    Some(h(hi))
                } else if lo > 0.0 {
                    Some(h(lo))
                } else {
                    None
                }
            }
            Self::Custom(ref law) => law.hazard_bound(lo, hi),
        }
    }

    pub fn exponential_rate(&self) -> Option<f64> {
        match *self {
            Self::Exponential { rate } => Some(rate),
            Self::Weibull { shape, scale } if shape == 1.0 => Some(1.0 / scale),
            _ => None,
        }
    }

    /// Inverse cdf of a fresh sojourn. Returns `+inf` when `u` exceeds the
    /// total mass of a defective law.
    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            Self::Exponential { rate } => -(-u).ln_1p() / rate,
            Self::Weibull { shape, scale } => scale * (-(-u).ln_1p()).powf(1.0 / shape),
            Self::Custom(_) => self.numeric_inverse(0.0, u),
        }
    }

    /// Inverse of the age-conditioned residual law
    /// `P(τ ≤ s | age) = (F(age+s) - F(age)) / (1 - F(age))`.
    pub fn residual_quantile(&self, age: f64, u: f64) -> f64 {
        if age <= 0.0 {
            return self.quantile(u);
        }
        match *self {
            Self::Exponential { rate } => -(-u).ln_1p() / rate,
            Self::Weibull { shape, scale } => {
                let z = (age / scale).powf(shape) - (-u).ln_1p();
                scale * z.powf(1.0 / shape) - age
            }
            Self::Custom(_) => self.numeric_inverse(age, u),
        }
    }

    /// Bisection on `F(age + s) = F(age) + u (1 - F(age))` to [`INVERSION_TOL`].
    fn numeric_inverse(&self, age: f64, u: f64) -> f64 {
        let f0 = self.cdf(age);
        let target = f0 + u * (1.0 - f0);
        let mut hi = 1.0;
        while self.cdf(age + hi) < target {
            hi *= 2.0;
            if hi > 1e12 {
                return f64::INFINITY;
            }
        }
        let mut lo = 0.0;
        while hi - lo > INVERSION_TOL {
            let mid = 0.5 * (lo + hi);
            if self.cdf(age + mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub(crate) fn validate(&self, state: usize) -> Result<(), String> {
        match *self {
            Self::Exponential { rate } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(format!("state {state}: exponential rate must be positive, got {rate}"));
                }
            }
            Self::Weibull { shape, scale } => {
                if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                    return Err(format!(
                        "state {state}: Weibull shape and scale must be positive, got ({shape}, {scale})"
                    ));
                }
            }
            Self::Custom(ref law) => spot_check(state, law.as_ref())?,
        }
        Ok(())
    }
}

/// Grid checks on a custom law over `[0, 10]`.
fn spot_check(state: usize, law: &dyn HoldingLaw) -> Result<(), String> {
    const WINDOW: f64 = 10.0;
    const N: usize = 400;
    if law.cdf(0.0).abs() > 1e-12 {
        return Err(format!("state {state}: F(0) = {} != 0", law.cdf(0.0)));
    }
    let bound = law
        .hazard_bound(0.0, WINDOW)
        .ok_or_else(|| format!("state {state}: custom law declares no hazard bound on [0, {WINDOW}]"))?;
    let mut prev = 0.0;
    for k in 0..=N {
        let y = WINDOW * k as f64 / N as f64;
        let f = law.density(y);
        let c = law.cdf(y);
        if f < 0.0 || !f.is_finite() {
            return Err(format!("state {state}: density {f} at age {y}"));
        }
        if c < prev - 1e-12 {
            return Err(format!("state {state}: cdf decreases at age {y}"));
        }
        prev = c;
        if 1.0 - c >= SUPPORT_EPS {
            let h = f / (1.0 - c);
            if h > bound * (1.0 + 1e-9) + 1e-12 {
                return Err(format!(
                    "state {state}: hazard {h} at age {y} exceeds declared bound {bound}"
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_quantile_median() {
        let d = HoldingDist::Exponential { rate: 2.0 };
        assert!((d.quantile(0.5) - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn weibull_quantile_at_one_minus_inv_e() {
        let d = HoldingDist::Weibull { shape: 2.0, scale: 1.0 };
        let u = 1.0 - (-1.0f64).exp();
        assert!((d.quantile(u) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quantile_tends_to_zero() {
        let d = HoldingDist::Weibull { shape: 2.0, scale: 1.0 };
        assert!(d.quantile(1e-12) < 1e-5);
        assert_eq!(d.quantile(0.0), 0.0);
    }

    #[test]
    fn residual_quantile_matches_conditioned_cdf() {
        let d = HoldingDist::Weibull { shape: 2.5, scale: 1.3 };
        let age = 0.7;
        for u in [0.1, 0.5, 0.9] {
            let s = d.residual_quantile(age, u);
            let p = (d.cdf(age + s) - d.cdf(age)) / d.survival(age);
            assert!((p - u).abs() < 1e-12);
        }
    }

    #[derive(Debug)]
    struct Triangular;
    impl HoldingLaw for Triangular {
        // density 2(1-y) on [0,1]
        fn density(&self, y: f64) -> f64 {
            if (0.0..1.0).contains(&y) {
                2.0 * (1.0 - y)
            } else {
                0.0
            }
        }
        fn cdf(&self, y: f64) -> f64 {
            if y <= 0.0 {
                0.0
            } else if y >= 1.0 {
                1.0
            } else {
                1.0 - (1.0 - y) * (1.0 - y)
            }
        }
        fn hazard_bound(&self, _lo: f64, _hi: f64) -> Option<f64> {
            None
        }
    }

    #[test]
    fn numeric_inverse_of_custom_law() {
        let d = HoldingDist::Custom(Arc::new(Triangular));
        for u in [0.05, 0.3, 0.75, 0.99] {
            let exact = 1.0 - (1.0 - u as f64).sqrt();
            assert!((d.quantile(u) - exact).abs() < 2e-10);
        }
    }

    #[test]
    fn custom_without_bound_is_rejected() {
        let d = HoldingDist::Custom(Arc::new(Triangular));
        assert!(d.validate(0).is_err());
    }
}
