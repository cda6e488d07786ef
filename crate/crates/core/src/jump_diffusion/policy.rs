use std::fmt;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Closed control set `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlSet {
    /// All of `ℝ^d`.
    Unbounded,
    /// Coordinate box `[lo, hi]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl ControlSet {
    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::Box {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            Self::Unbounded => u.iter().all(|v| v.is_finite()),
            Self::Box { lo, hi } => {
                u.len() == lo.len()
                    && u.iter()
                        .zip(lo.iter().zip(hi))
                        .all(|(v, (l, h))| *v >= *l && *v <= *h)
            }
        }
    }

    /// Nearest point of `U` in the max-norm.
    pub fn project(&self, u: DVector<f64>) -> DVector<f64> {
        match self {
            Self::Unbounded => u,
            Self::Box { lo, hi } => {
                DVector::from_iterator(u.len(), u.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)))
            }
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, Self::Box { .. })
    }
}

/// Feedback rule `u(t, x, i, y)`.
///
/// The simulator always calls it with left-limit arguments, so any rule of
/// this form is predictable.
pub trait ControlPolicy: Send + Sync {
    fn control(&self, t: f64, x: &DVector<f64>, regime: usize, age: f64) -> DVector<f64>;

    fn control_set(&self) -> ControlSet {
        ControlSet::Unbounded
    }
}

/// A [`ControlPolicy`] from a closure.
pub struct FnPolicy<F> {
    rule: F,
    set: ControlSet,
}

impl<F> FnPolicy<F>
where
    F: Fn(f64, &DVector<f64>, usize, f64) -> DVector<f64> + Send + Sync,
{
    pub fn new(rule: F) -> Self {
        Self {
            rule,
            set: ControlSet::Unbounded,
        }
    }

    pub fn with_set(rule: F, set: ControlSet) -> Self {
        Self { rule, set }
    }
}

impl<F> fmt::Debug for FnPolicy<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPolicy").field("set", &self.set).finish_non_exhaustive()
    }
}

impl<F> ControlPolicy for FnPolicy<F>
where
    F: Fn(f64, &DVector<f64>, usize, f64) -> DVector<f64> + Send + Sync,
{
    fn control(&self, t: f64, x: &DVector<f64>, regime: usize, age: f64) -> DVector<f64> {
        (self.rule)(t, x, regime, age)
    }

    fn control_set(&self) -> ControlSet {
        self.set.clone()
    }
}

/// Constant control `u ≡ c`.
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub DVector<f64>);

impl ControlPolicy for ConstantPolicy {
    fn control(&self, _t: f64, _x: &DVector<f64>, _i: usize, _y: f64) -> DVector<f64> {
        self.0.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_membership_and_projection() {
        let u = ControlSet::interval(-1.0, 2.0);
        assert!(u.contains(&DVector::from_element(1, 2.0)));
        assert!(!u.contains(&DVector::from_element(1, 2.5)));
        assert_eq!(u.project(DVector::from_element(1, 3.0))[0], 2.0);
        assert!(!ControlSet::Unbounded.contains(&DVector::from_element(1, f64::NAN)));
    }
}
