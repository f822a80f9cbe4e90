//! Seeded Brownian increments with exact fine-to-coarse aggregation.
//!
//! Every fine increment `ΔW_r^i(t_k)` is a pure function of
//! `(seed, i, k, r)`: particle `i` owns ChaCha stream `i` under a key derived
//! from the seed, and the draw for `(k, r)` sits at 64-bit word `k·m + r` of
//! that stream. Uniforms are mapped to normals through the inverse normal CDF,
//! so each increment consumes exactly one word and any entry can be
//! regenerated by seeking.
//!
//! Increments are rounded to the dyadic lattice `2^-40 ℤ`. Sums of lattice
//! values are exact in f64 while partial sums stay below `2^12` in magnitude,
//! so coarse increments, their cumulative sums and every regrouping of the
//! fine increments agree bit for bit regardless of summation order.

use std::sync::Arc;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use statrs::function::erf::erfc_inv;

use crate::error::{invalid, Result};

/// Grids with at most this many fine increments are materialized in memory.
pub const MATERIALIZE_LIMIT: usize = 1 << 26;

const LATTICE: f64 = 1_099_511_627_776.0; // 2^40

const TAG_INCREMENTS: u64 = 0x5749_4e43_5245_4d54; // "WINCREMT"
const TAG_INIT: u64 = 0x494e_4954_5354_524d; // "INITSTRM"

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, tag: u64) -> [u8; 32] {
    let mut state = seed ^ tag.rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

fn stream_rng(seed: u64, tag: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(derive_key(seed, tag));
    rng.set_stream(stream);
    rng
}

/// Uniform on the open interval (0, 1) from the top 53 bits.
#[inline]
fn open_uniform(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal via the inverse CDF, `Φ^{-1}(u) = −√2 erfc^{-1}(2u)`.
#[inline]
pub fn standard_normal(bits: u64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * open_uniform(bits))
}

#[inline]
fn to_lattice(x: f64) -> f64 {
    (x * LATTICE).round() / LATTICE
}

/// Per-particle normal stream keyed on `(seed, particle)`, independent of the
/// increment streams. Used to draw initial data.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn for_initial(seed: u64, particle: usize) -> Self {
        Self { rng: stream_rng(seed, TAG_INIT, particle as u64) }
    }

    pub fn next_normal(&mut self) -> f64 {
        standard_normal(self.rng.next_u64())
    }

    pub fn next_uniform(&mut self) -> f64 {
        open_uniform(self.rng.next_u64())
    }
}

#[derive(Debug, Clone)]
enum Storage {
    /// Fine increments, particle-major: `[(i * n_fine + k) * m + r]`.
    Materialized(Arc<Vec<f64>>),
    Streamed,
}

/// Brownian increments for `N` particles on a uniform grid over `[0, T]`.
///
/// A grid produced by [`PathGrid::coarsen`] shares the fine source and sums
/// `factor` consecutive fine increments per coarse step.
#[derive(Debug, Clone)]
pub struct PathGrid {
    seed: u64,
    n_fine: usize,
    horizon: f64,
    particles: usize,
    dim_w: usize,
    factor: usize,
    storage: Storage,
}

impl PathGrid {
    /// Materializes when `N·n_fine·m ≤ MATERIALIZE_LIMIT`, streams otherwise.
    pub fn generate(seed: u64, n_fine: usize, horizon: f64, particles: usize, dim_w: usize) -> Result<Self> {
        let total = particles.saturating_mul(n_fine).saturating_mul(dim_w);
        if total <= MATERIALIZE_LIMIT {
            Self::generate_materialized(seed, n_fine, horizon, particles, dim_w)
        } else {
            Self::generate_streamed(seed, n_fine, horizon, particles, dim_w)
        }
    }

    pub fn generate_streamed(
        seed: u64,
        n_fine: usize,
        horizon: f64,
        particles: usize,
        dim_w: usize,
    ) -> Result<Self> {
        validate(n_fine, horizon, dim_w)?;
        Ok(Self { seed, n_fine, horizon, particles, dim_w, factor: 1, storage: Storage::Streamed })
    }

    pub fn generate_materialized(
        seed: u64,
        n_fine: usize,
        horizon: f64,
        particles: usize,
        dim_w: usize,
    ) -> Result<Self> {
        validate(n_fine, horizon, dim_w)?;
        let per_particle = n_fine * dim_w;
        let scale = (horizon / n_fine as f64).sqrt();
        let mut data = vec![0.0; particles * per_particle];
        if per_particle > 0 {
            data.par_chunks_mut(per_particle).enumerate().for_each(|(i, row)| {
                let mut rng = stream_rng(seed, TAG_INCREMENTS, i as u64);
                for v in row.iter_mut() {
                    *v = to_lattice(scale * standard_normal(rng.next_u64()));
                }
            });
        }
        Ok(Self {
            seed,
            n_fine,
            horizon,
            particles,
            dim_w,
            factor: 1,
            storage: Storage::Materialized(Arc::new(data)),
        })
    }

    /// Aggregates `factor` consecutive steps of this grid into one.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let steps = self.steps();
        if factor == 0 || !steps.is_multiple_of(factor) {
            return Err(invalid(format!("coarsening factor {factor} does not divide {steps} steps")));
        }
        Ok(Self { factor: self.factor * factor, ..self.clone() })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn noise_dim(&self) -> usize {
        self.dim_w
    }

    pub fn n_fine(&self) -> usize {
        self.n_fine
    }

    /// Fine steps per step of this grid.
    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Number of steps of this grid.
    pub fn steps(&self) -> usize {
        self.n_fine / self.factor
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps() as f64
    }

    pub fn is_materialized(&self) -> bool {
        matches!(self.storage, Storage::Materialized(_))
    }

    /// Fine increment `(i, k, r)` of the underlying source grid.
    pub fn fine_increment(&self, i: usize, k: usize, r: usize) -> f64 {
        assert!(i < self.particles && k < self.n_fine && r < self.dim_w, "increment index out of range");
        match &self.storage {
            Storage::Materialized(data) => data[(i * self.n_fine + k) * self.dim_w + r],
            Storage::Streamed => {
                let mut rng = stream_rng(self.seed, TAG_INCREMENTS, i as u64);
                rng.set_word_pos(2 * (k * self.dim_w + r) as u128);
                to_lattice(self.fine_scale() * standard_normal(rng.next_u64()))
            }
        }
    }

    /// Increment `(i, j, r)` of this grid: the ascending-order sum of its fine increments.
    pub fn increment(&self, i: usize, j: usize, r: usize) -> f64 {
        let start = j * self.factor;
        let mut s = 0.0;
        for k in start..start + self.factor {
            s += self.fine_increment(i, k, r);
        }
        s
    }

    fn fine_scale(&self) -> f64 {
        (self.horizon / self.n_fine as f64).sqrt()
    }

    /// Sequential reader yielding the `N×m` increments of each step in turn.
    pub fn cursor(&self) -> IncrementCursor<'_> {
        let streams = match self.storage {
            Storage::Streamed => {
                (0..self.particles).map(|i| stream_rng(self.seed, TAG_INCREMENTS, i as u64)).collect()
            }
            Storage::Materialized(_) => Vec::new(),
        };
        IncrementCursor { grid: self, step: 0, streams }
    }
}

fn validate(n_fine: usize, horizon: f64, dim_w: usize) -> Result<()> {
    if n_fine == 0 {
        return Err(invalid("number of fine steps must be positive"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(invalid(format!("horizon must be positive and finite, got {horizon}")));
    }
    if dim_w == 0 {
        return Err(invalid("Brownian dimension must be positive"));
    }
    Ok(())
}

/// Step-by-step access to a [`PathGrid`]. Streamed grids advance one ChaCha
/// stream per particle, so a full pass costs one draw per fine increment.
pub struct IncrementCursor<'a> {
    grid: &'a PathGrid,
    step: usize,
    streams: Vec<ChaCha8Rng>,
}

impl IncrementCursor<'_> {
    pub fn step(&self) -> usize {
        self.step
    }

    /// Fills `out` (row-major `N×m`) with the next step's increments.
    /// Returns `false` once the grid is exhausted.
    pub fn next_into(&mut self, out: &mut [f64]) -> bool {
        let g = self.grid;
        if self.step >= g.steps() {
            return false;
        }
        let m = g.dim_w;
        assert_eq!(out.len(), g.particles * m, "increment buffer has wrong length");
        let k0 = self.step * g.factor;
        match &g.storage {
            Storage::Materialized(data) => {
                out.par_chunks_mut(m).enumerate().with_min_len(256).for_each(|(i, row)| {
                    let base = i * g.n_fine;
                    for (r, slot) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for k in k0..k0 + g.factor {
                            s += data[(base + k) * m + r];
                        }
                        *slot = s;
                    }
                });
            }
            Storage::Streamed => {
                let scale = g.fine_scale();
                let factor = g.factor;
                out.par_chunks_mut(m).zip(self.streams.par_iter_mut()).with_min_len(64).for_each(
                    |(row, rng)| {
                        row.fill(0.0);
                        for _ in 0..factor {
                            for slot in row.iter_mut() {
                                *slot += to_lattice(scale * standard_normal(rng.next_u64()));
                            }
                        }
                    },
                );
            }
        }
        self.step += 1;
        true
    }
}
