use rayon::prelude::*;

use super::MarkMeasure;
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamRng};
use crate::semi_markov::{RegimeModel, RegimePath, RegimeSampler, RegimeState};

/// One asset jump: its time and mark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssetJump {
    pub time: f64,
    pub mark: f64,
}

/// Every random input of one path, fixed before any control is applied.
///
/// The grid is the uniform base grid merged with the regime switch times and
/// the asset jump times (the jump clock has constant rate, so its times do not
/// depend on the control). Re-using one `PathNoise` for two policies is the
/// shared-noise coupling.
#[derive(Debug, Clone)]
pub struct PathNoise {
    index: usize,
    base_step: f64,
    grid: Vec<f64>,
    is_base: Vec<bool>,
    dim: usize,
    dw: Vec<f64>,
    regime: RegimePath,
    regime_nodes: Vec<usize>,
    jumps: Vec<(usize, AssetJump)>,
}

fn base_grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(horizon > 0.0 && dt > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "need horizon > 0 and dt > 0, got T={horizon}, dt={dt}"
        )));
    }
    let n = (horizon / dt).round().max(1.0) as usize;
    Ok((0..=n).map(|k| horizon * k as f64 / n as f64).collect())
}

fn poisson_times(rate: f64, horizon: f64, marks: &MarkMeasure, rng: &mut StreamRng) -> Vec<AssetJump> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let mut t = 0.0;
    loop {
        t += rng.exponential(rate);
        if t >= horizon {
            break;
        }
        let mark = marks.sample(rng);
        out.push(AssetJump { time: t, mark });
    }
    out
}

impl PathNoise {
    /// Noise for path `index`: regime stream `(seed, Regime, index)`, jump
    /// stream `(seed, AssetJump, index)` and Brownian stream
    /// `(seed, Brownian, index)`.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        model: &RegimeModel,
        sampler: RegimeSampler,
        origin: RegimeState,
        marks: &MarkMeasure,
        dim: usize,
        horizon: f64,
        dt: f64,
        seed: u64,
        index: usize,
    ) -> Result<Self> {
        let mut rng = StreamRng::new(seed, Purpose::Regime, index as u64);
        let regime = sampler.sample(model, origin, horizon, &mut rng)?;
        let mut jump_rng = StreamRng::new(seed, Purpose::AssetJump, index as u64);
        let mut bm_rng = StreamRng::new(seed, Purpose::Brownian, index as u64);
        let mut noise = Self::from_regime(regime, marks, dim, dt, &mut jump_rng, &mut bm_rng)?;
        noise.index = index;
        Ok(noise)
    }

    /// `n` independent noises, indices `0..n`.
    #[allow(clippy::too_many_arguments)]
    pub fn ensemble(
        model: &RegimeModel,
        sampler: RegimeSampler,
        origin: RegimeState,
        marks: &MarkMeasure,
        dim: usize,
        horizon: f64,
        dt: f64,
        seed: u64,
        n: usize,
    ) -> Result<Vec<Self>> {
        (0..n)
            .into_par_iter()
            .map(|k| Self::generate(model, sampler, origin, marks, dim, horizon, dt, seed, k))
            .collect()
    }

    /// Noise around a given regime path.
    pub fn from_regime(
        regime: RegimePath,
        marks: &MarkMeasure,
        dim: usize,
        dt: f64,
        jump_rng: &mut StreamRng,
        brownian_rng: &mut StreamRng,
    ) -> Result<Self> {
        let horizon = regime.horizon();
        let base = base_grid(horizon, dt)?;
        let jumps = poisson_times(marks.rate(), horizon, marks, jump_rng);

        // three-way merge of sorted time lists
        let reg_times: Vec<f64> = regime.events().iter().map(|e| e.time).collect();
        let mut grid = Vec::with_capacity(base.len() + reg_times.len() + jumps.len());
        let mut is_base = Vec::with_capacity(grid.capacity());
        let mut regime_nodes = Vec::with_capacity(reg_times.len());
        let mut jump_nodes = Vec::with_capacity(jumps.len());
        let (mut a, mut b, mut c) = (0, 0, 0);
        loop {
            let ta = base.get(a).copied().unwrap_or(f64::INFINITY);
            let tb = reg_times.get(b).copied().unwrap_or(f64::INFINITY);
            let tc = jumps.get(c).map(|j| j.time).unwrap_or(f64::INFINITY);
            let t = ta.min(tb).min(tc);
            if t == f64::INFINITY {
                break;
            }
            let node = grid.len();
            grid.push(t);
            is_base.push(ta == t);
            if ta == t {
                a += 1;
            }
            if tb == t {
                regime_nodes.push(node);
                b += 1;
            }
            if tc == t {
                jump_nodes.push((node, jumps[c]));
                c += 1;
            }
        }

        let steps = grid.len() - 1;
        let mut dw = Vec::with_capacity(steps * dim);
        for w in grid.windows(2) {
            let s = (w[1] - w[0]).sqrt();
            for _ in 0..dim {
                dw.push(s * brownian_rng.normal());
            }
        }
        Ok(Self {
            index: 0,
            base_step: dt,
            grid,
            is_base,
            dim,
            dw,
            regime,
            regime_nodes,
            jumps: jump_nodes,
        })
    }

    /// Same noise on a base grid of twice the step: every other base node is
    /// dropped, event nodes are kept, and Brownian increments are summed.
    pub fn coarsen(&self) -> Self {
        let last = self.grid.len() - 1;
        let mut base_idx = vec![usize::MAX; self.grid.len()];
        let mut count = 0;
        for (k, b) in self.is_base.iter().enumerate() {
            if *b {
                base_idx[k] = count;
                count += 1;
            }
        }
        let even_base = |k: usize| self.is_base[k] && (base_idx[k] % 2 == 0 || k == last);
        let mut keep = Vec::with_capacity(self.grid.len() / 2 + 2);
        for k in 0..self.grid.len() {
            let event = self.regime_nodes.binary_search(&k).is_ok()
                || self.jumps.binary_search_by_key(&k, |j| j.0).is_ok();
            if k == 0 || k == last || event || even_base(k) {
                keep.push(k);
            }
        }
        let mut remap = vec![usize::MAX; self.grid.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut dw = Vec::with_capacity((keep.len() - 1) * self.dim);
        for w in keep.windows(2) {
            for l in 0..self.dim {
                let s: f64 = (w[0]..w[1]).map(|k| self.dw[k * self.dim + l]).sum();
                dw.push(s);
            }
        }
        Self {
            index: self.index,
            base_step: 2.0 * self.base_step,
            grid: keep.iter().map(|&k| self.grid[k]).collect(),
            is_base: keep.iter().map(|&k| even_base(k)).collect(),
            dim: self.dim,
            dw,
            regime: self.regime.clone(),
            regime_nodes: self.regime_nodes.iter().map(|&k| remap[k]).collect(),
            jumps: self.jumps.iter().map(|&(k, j)| (remap[k], j)).collect(),
        }
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn base_step(&self) -> f64 {
        self.base_step
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        self.regime.horizon()
    }

    pub fn brownian_dim(&self) -> usize {
        self.dim
    }

    /// Brownian increment over `[t_k, t_{k+1}]`.
    pub fn dw(&self, k: usize) -> &[f64] {
        &self.dw[k * self.dim..(k + 1) * self.dim]
    }

    pub fn regime(&self) -> &RegimePath {
        &self.regime
    }

    /// Grid node of each regime event, aligned with `regime().events()`.
    pub fn regime_nodes(&self) -> &[usize] {
        &self.regime_nodes
    }

    /// Asset jumps with their grid nodes, in time order.
    pub fn jumps(&self) -> &[(usize, AssetJump)] {
        &self.jumps
    }

    pub fn num_steps(&self) -> usize {
        self.grid.len() - 1
    }
}
