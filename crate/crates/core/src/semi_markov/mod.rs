//! The semi-Markov regime process `θ(t)` and its age `Y(t)`.
//!
//! A [`RegimeModel`] holds the embedded jump kernel `p_ij` and one holding-time
//! law per state. The pair `(θ, Y)` is Markov with generator
//!
//! ```text
//! Lφ(i, y) = ∂φ/∂y (i, y) + h_i(y) Σ_{j≠i} p_ij [φ(j, 0) − φ(i, y)]
//! ```
//!
//! where `h_i = f_i / (1 − F_i)` is the hazard of the holding law. Paths can be
//! drawn by renewal sampling ([`simulate_regime_direct`]) or by thinning a
//! dominating Poisson clock ([`simulate_regime_thinning`]).

mod generator;
mod holding;
mod path;
mod sampler;

pub use generator::{apply_generator_l, regime_dynkin_check, RegimeDynkin, RegimeFunction, AGE_FD_STEP};
pub use holding::{HoldingDist, HoldingLaw, INVERSION_TOL};
pub use path::{RegimeEvent, RegimePath, RegimeState};
pub use sampler::{
    simulate_markov_chain, simulate_regime_direct, simulate_regime_thinning,
    simulate_regime_thinning_with_stats, RegimeSampler, ThinningStats,
};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// The semi-Markov law: embedded kernel plus per-state holding distributions.
///
/// Immutable after construction; share it freely between workers.
#[derive(Debug, Clone)]
pub struct RegimeModel {
    kernel: DMatrix<f64>,
    holding: Vec<HoldingDist>,
}

impl RegimeModel {
    /// Validate and build a model. `kernel` is row-major `M × M`.
    pub fn new(kernel: Vec<Vec<f64>>, holding: Vec<HoldingDist>) -> Result<Self> {
        let m = kernel.len();
        if m == 0 {
            return Err(Error::InvalidModel("at least one state is required".into()));
        }
        if holding.len() != m {
            return Err(Error::InvalidModel(format!(
                "{} holding laws for {m} states",
                holding.len()
            )));
        }
        for (i, row) in kernel.iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidModel(format!("kernel row {i} has length {}", row.len())));
            }
            if row[i] != 0.0 {
                return Err(Error::InvalidModel(format!("kernel diagonal ({i},{i}) must be 0")));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidModel(format!("kernel row {i} has entries outside [0,1]")));
            }
            if m > 1 {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidModel(format!("kernel row {i} sums to {s}")));
                }
            }
        }
        let kernel = DMatrix::from_fn(m, m, |i, j| kernel[i][j]);
        if !irreducible(&kernel) {
            return Err(Error::InvalidModel("kernel is not irreducible".into()));
        }
        for (i, h) in holding.iter().enumerate() {
            h.validate(i).map_err(Error::InvalidModel)?;
        }
        Ok(Self { kernel, holding })
    }

    /// One-state model: no regime transitions ever happen.
    pub fn single_state() -> Self {
        Self {
            kernel: DMatrix::zeros(1, 1),
            holding: vec![HoldingDist::Exponential { rate: 1.0 }],
        }
    }

    /// Two states flipping into each other with the given holding laws.
    pub fn two_state(first: HoldingDist, second: HoldingDist) -> Result<Self> {
        Self::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![first, second])
    }

    pub fn num_states(&self) -> usize {
        self.holding.len()
    }

    pub fn kernel(&self, i: usize, j: usize) -> f64 {
        self.kernel[(i, j)]
    }

    pub fn kernel_matrix(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn holding(&self, i: usize) -> &HoldingDist {
        &self.holding[i]
    }

    /// True when the chain can leave state `i`.
    pub fn can_jump(&self, i: usize) -> bool {
        self.num_states() > 1 && (0..self.num_states()).any(|j| self.kernel[(i, j)] > 0.0)
    }

    /// Exponential rates of every state, if all holding laws are exponential.
    pub fn exponential_rates(&self) -> Option<Vec<f64>> {
        self.holding.iter().map(HoldingDist::exponential_rate).collect()
    }

    /// Instantaneous exit rate `f(y|i) / (1 − F(y|i))`.
    pub fn hazard_rate(&self, i: usize, y: f64) -> Result<f64> {
        match self.holding[i].hazard(y) {
            None => Err(Error::AgeBeyondSupport { state: i, age: y }),
            Some(h) if !h.is_finite() => Err(Error::SingularHazard { state: i, age: y }),
            Some(h) => Ok(h.max(0.0)),
        }
    }

    /// `λ_ij(y) = p_ij h_i(y)` off the diagonal, rows summing to zero.
    pub fn intensity_matrix(&self, y: f64) -> Result<DMatrix<f64>> {
        let m = self.num_states();
        let mut out = DMatrix::zeros(m, m);
        for i in 0..m {
            if !self.can_jump(i) {
                continue;
            }
            let h = self.hazard_rate(i, y)?;
            let mut diag = 0.0;
            for j in 0..m {
                if j != i {
                    let v = self.kernel[(i, j)] * h;
                    out[(i, j)] = v;
                    diag += v;
                }
            }
            out[(i, i)] = -diag;
        }
        Ok(out)
    }

    /// Draw a fresh sojourn length in state `i`.
    pub fn sample_holding_time(&self, i: usize, rng: &mut StreamRng) -> f64 {
        self.holding[i].quantile(rng.uniform())
    }

    /// Pick the next state from kernel row `i` by inversion of `u`.
    pub fn next_state(&self, i: usize, u: f64) -> usize {
        let m = self.num_states();
        let mut acc = 0.0;
        let mut last = i;
        for j in 0..m {
            let p = self.kernel[(i, j)];
            if p <= 0.0 {
                continue;
            }
            last = j;
            acc += p;
            if u < acc {
                return j;
            }
        }
        last
    }
}

fn irreducible(kernel: &DMatrix<f64>) -> bool {
    let m = kernel.nrows();
    if m == 1 {
        return true;
    }
    for start in 0..m {
        let mut seen = vec![false; m];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                if kernel[(i, j)] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp2() -> RegimeModel {
        RegimeModel::two_state(
            HoldingDist::Exponential { rate: 2.0 },
            HoldingDist::Exponential { rate: 2.0 },
        )
        .unwrap()
    }

    #[test]
    fn exponential_hazard_is_constant() {
        let m = exp2();
        assert_eq!(m.hazard_rate(0, 0.7).unwrap(), 2.0);
    }

    #[test]
    fn weibull_shape_one_is_unit_hazard() {
        let m = RegimeModel::two_state(
            HoldingDist::Weibull { shape: 1.0, scale: 1.0 },
            HoldingDist::Weibull { shape: 1.0, scale: 1.0 },
        )
        .unwrap();
        for y in [0.0, 0.3, 2.0, 10.0] {
            assert!((m.hazard_rate(0, y).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weibull_shape_two_hazard_against_quadrature_oracle() {
        // Oracle: f / (1 − F) with F integrated from the density by a
        // composite Simpson rule, independent of the closed forms.
        let d = HoldingDist::Weibull { shape: 2.0, scale: 1.0 };
        let y = 0.5;
        let n = 2000;
        let h = y / n as f64;
        let mut cdf = d.density(0.0) + d.density(y);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            cdf += w * d.density(k as f64 * h);
        }
        cdf *= h / 3.0;
        let oracle = d.density(y) / (1.0 - cdf);
        assert!((oracle - 1.0).abs() < 1e-10);
        let m = RegimeModel::two_state(d.clone(), d).unwrap();
        assert!((m.hazard_rate(0, y).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hazard_beyond_support_errors() {
        let m = exp2();
        assert!(matches!(
            m.hazard_rate(0, 100.0),
            Err(Error::AgeBeyondSupport { state: 0, .. })
        ));
    }

    #[test]
    fn intensity_matrix_two_state() {
        let q = exp2().intensity_matrix(0.3).unwrap();
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[-2.0, 2.0, 2.0, -2.0]));
    }

    #[test]
    fn intensity_matrix_three_state_uniform_kernel() {
        let k = vec![vec![0.0, 0.5, 0.5], vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0]];
        let unit = HoldingDist::Exponential { rate: 1.0 };
        let m = RegimeModel::new(k, vec![unit.clone(), unit.clone(), unit]).unwrap();
        let q = m.intensity_matrix(1.7).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { -1.0 } else { 0.5 };
                assert_eq!(q[(i, j)], want);
            }
        }
    }

    #[test]
    fn rejects_bad_kernels() {
        let e = HoldingDist::Exponential { rate: 1.0 };
        let hs = vec![e.clone(), e.clone(), e.clone()];
        // diagonal
        assert!(RegimeModel::new(
            vec![vec![0.5, 0.5, 0.0], vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0]],
            hs.clone()
        )
        .is_err());
        // row sum
        assert!(RegimeModel::new(
            vec![vec![0.0, 0.6, 0.5], vec![0.5, 0.0, 0.5], vec![0.5, 0.5, 0.0]],
            hs.clone()
        )
        .is_err());
        // reducible: state 2 never reached
        assert!(RegimeModel::new(
            vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0]],
            hs
        )
        .is_err());
    }

    #[test]
    fn next_state_follows_kernel_row() {
        let k = vec![vec![0.0, 0.25, 0.75], vec![1.0, 0.0, 0.0], vec![0.5, 0.5, 0.0]];
        let e = HoldingDist::Exponential { rate: 1.0 };
        let m = RegimeModel::new(k, vec![e.clone(), e.clone(), e]).unwrap();
        assert_eq!(m.next_state(0, 0.1), 1);
        assert_eq!(m.next_state(0, 0.3), 2);
        assert_eq!(m.next_state(1, 0.99), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn intensity_rows_sum_to_zero(
                a in 0.05f64..0.95, b in 0.05f64..0.95,
                k0 in 0.5f64..4.0, k1 in 0.5f64..4.0, k2 in 0.5f64..4.0,
                y in 0.0f64..3.0,
            ) {
                let kernel = vec![
                    vec![0.0, a, 1.0 - a],
                    vec![b, 0.0, 1.0 - b],
                    vec![0.5, 0.5, 0.0],
                ];
                let hs = vec![
                    HoldingDist::Weibull { shape: k0, scale: 1.0 },
                    HoldingDist::Weibull { shape: k1, scale: 0.8 },
                    HoldingDist::Weibull { shape: k2, scale: 1.5 },
                ];
                let m = RegimeModel::new(kernel, hs).unwrap();
                if let Ok(q) = m.intensity_matrix(y) {
                    for i in 0..3 {
                        let s: f64 = q.row(i).iter().sum();
                        prop_assert!(s.abs() <= 1e-12 * (1.0 + q[(i, i)].abs()));
                        for j in 0..3 {
                            if i != j { prop_assert!(q[(i, j)] >= 0.0); }
                        }
                    }
                }
            }
        }
    }
}
