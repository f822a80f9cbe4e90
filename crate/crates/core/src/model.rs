//! Model abstraction for McKean-Vlasov SDEs
//!
//! ```text
//! dX_t = b(t, X_t, μ_t) dt + Σ_r σ_r(t, X_t, μ_t) dW_r(t),   μ_t = Law(X_t)
//! ```
//!
//! The measure argument is handed to coefficients as a [`MeasureView`]: a
//! snapshot of the empirical measure of the particle system with its raw
//! moments precomputed once per step. Coefficients that need more than
//! moments can walk the particles through [`MeasureView::particles`].

use std::fmt;
use std::sync::Arc;

use crate::brownian::NormalStream;
use crate::error::{invalid, Error, Result};

/// `b(t, x, μ)`, written into `out` (length d).
pub type DriftFn = dyn Fn(f64, &[f64], &MeasureView<'_>, &mut [f64]) + Send + Sync;
/// `σ_r(t, x, μ)` for a 0-based column index `r < m`, written into `out` (length d).
pub type DiffusionFn = dyn Fn(f64, &[f64], &MeasureView<'_>, usize, &mut [f64]) + Send + Sync;
/// Draws one sample of `X_0` into `out` (length d).
pub type InitialFn = dyn Fn(&mut NormalStream, &mut [f64]) + Send + Sync;

/// Precomputed statistics of an empirical measure.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureStats {
    n: usize,
    d: usize,
    max_order: usize,
    /// `moments[(k - 1) * d + c]` is the k-th raw moment of coordinate c.
    moments: Vec<f64>,
    w2sq_dirac0: f64,
}

impl MeasureStats {
    /// One fixed-order pass over `states` (row-major N×d).
    pub fn compute(states: &[f64], d: usize, max_order: usize) -> Self {
        let max_order = max_order.max(2);
        let n = states.len().checked_div(d).unwrap_or(0);
        let mut moments = vec![0.0; max_order * d];
        let mut sq = 0.0;
        for row in states.chunks_exact(d.max(1)) {
            let mut norm_sq = 0.0;
            for (c, &x) in row.iter().enumerate() {
                norm_sq += x * x;
                let mut p = 1.0;
                for k in 0..max_order {
                    p *= x;
                    moments[k * d + c] += p;
                }
            }
            sq += norm_sq;
        }
        if n > 0 {
            let inv = n as f64;
            for m in moments.iter_mut() {
                *m /= inv;
            }
            sq /= inv;
        }
        Self { n, d, max_order, moments, w2sq_dirac0: sq }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn w2sq_dirac0(&self) -> f64 {
        self.w2sq_dirac0
    }

    pub fn mean(&self) -> &[f64] {
        &self.moments[..self.d]
    }

    fn cached(&self, k: usize, coord: usize) -> Option<f64> {
        (k >= 1 && k <= self.max_order && coord < self.d).then(|| self.moments[(k - 1) * self.d + coord])
    }
}

/// Read-only view of the empirical measure `μ = (1/N) Σ δ_{x_i}`.
#[derive(Clone, Copy)]
pub struct MeasureView<'a> {
    stats: &'a MeasureStats,
    states: &'a [f64],
}

impl<'a> MeasureView<'a> {
    pub fn new(stats: &'a MeasureStats, states: &'a [f64]) -> Self {
        debug_assert_eq!(stats.n * stats.d, states.len());
        Self { stats, states }
    }

    pub fn len(&self) -> usize {
        self.stats.n
    }

    pub fn is_empty(&self) -> bool {
        self.stats.n == 0
    }

    pub fn dim(&self) -> usize {
        self.stats.d
    }

    pub fn mean(&self) -> &'a [f64] {
        self.stats.mean()
    }

    /// `(1/N) Σ_i x_{i,coord}^k`. Orders beyond the precomputed table cost one O(N) pass.
    pub fn raw_moment(&self, k: usize, coord: usize) -> f64 {
        if let Some(m) = self.stats.cached(k, coord) {
            return m;
        }
        let d = self.stats.d;
        if self.stats.n == 0 || coord >= d {
            return f64::NAN;
        }
        let exp = k as i32;
        let sum: f64 = self.states.chunks_exact(d).map(|row| row[coord].powi(exp)).sum();
        sum / self.stats.n as f64
    }

    /// `W2²(μ, δ_0) = (1/N) Σ |x_i|²`.
    pub fn w2sq_to_dirac0(&self) -> f64 {
        self.stats.w2sq_dirac0
    }

    pub fn particles(&self) -> &'a [f64] {
        self.states
    }

    pub fn particle(&self, i: usize) -> &'a [f64] {
        let d = self.stats.d;
        &self.states[i * d..(i + 1) * d]
    }

    /// Hash of the measure's defining statistics; used to check that every
    /// coefficient call within one step sees the same snapshot.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::default();
        h.write_u64(self.stats.n as u64);
        for m in &self.stats.moments {
            h.write_u64(m.to_bits());
        }
        h.write_u64(self.stats.w2sq_dirac0.to_bits());
        h.finish()
    }
}

impl fmt::Debug for MeasureView<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeasureView")
            .field("n", &self.stats.n)
            .field("mean", &self.mean())
            .field("w2sq_dirac0", &self.stats.w2sq_dirac0)
            .finish()
    }
}

/// An owned empirical measure, handy for building synthetic measures.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    states: Vec<f64>,
    stats: MeasureStats,
}

impl EmpiricalMeasure {
    pub fn new(states: Vec<f64>, d: usize, max_order: usize) -> Self {
        let stats = MeasureStats::compute(&states, d, max_order);
        Self { states, stats }
    }

    /// Dirac mass at `x`.
    pub fn dirac(x: &[f64], max_order: usize) -> Self {
        Self::new(x.to_vec(), x.len(), max_order)
    }

    pub fn view(&self) -> MeasureView<'_> {
        MeasureView::new(&self.stats, &self.states)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }
}

#[derive(Default)]
pub(crate) struct Fnv64(u64);

impl Fnv64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub(crate) fn write(&mut self, bytes: &[u8]) {
        if self.0 == 0 {
            self.0 = Self::OFFSET;
        }
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub(crate) fn finish(&self) -> u64 {
        if self.0 == 0 {
            Self::OFFSET
        } else {
            self.0
        }
    }
}

/// Drift, diffusion and initial law of a McKean-Vlasov SDE.
///
/// Immutable once built and cheap to clone; coefficients are shared behind `Arc`.
#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    d: usize,
    m: usize,
    rho: f64,
    moment_order: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    initial: Arc<InitialFn>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("d", &self.d)
            .field("m", &self.m)
            .field("rho", &self.rho)
            .finish()
    }
}

impl ModelSpec {
    /// Starts a model with zero drift, zero diffusion and `X_0 = 0`.
    pub fn builder(name: impl Into<String>, d: usize, m: usize) -> ModelBuilder {
        ModelBuilder {
            name: name.into(),
            d,
            m,
            rho: 0.0,
            moment_order: 2,
            drift: Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0)),
            diffusion: Arc::new(|_, _, _, _, out: &mut [f64]| out.fill(0.0)),
            initial: Arc::new(|_, out: &mut [f64]| out.fill(0.0)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Highest raw moment order the coefficients read from the measure.
    pub fn moment_order(&self) -> usize {
        self.moment_order
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], mu: &MeasureView<'_>, out: &mut [f64]) {
        (self.drift)(t, x, mu, out)
    }

    #[inline]
    pub fn diffusion_col_into(&self, t: f64, x: &[f64], mu: &MeasureView<'_>, r: usize, out: &mut [f64]) {
        debug_assert!(r < self.m);
        (self.diffusion)(t, x, mu, r, out)
    }

    pub fn drift(&self, t: f64, x: &[f64], mu: &MeasureView<'_>) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.drift_into(t, x, mu, &mut out);
        out
    }

    pub fn diffusion_col(&self, t: f64, x: &[f64], mu: &MeasureView<'_>, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.diffusion_col_into(t, x, mu, r, &mut out);
        out
    }

    pub fn sample_initial(&self, stream: &mut NormalStream, out: &mut [f64]) {
        (self.initial)(stream, out)
    }
}

pub struct ModelBuilder {
    name: String,
    d: usize,
    m: usize,
    rho: f64,
    moment_order: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    initial: Arc<InitialFn>,
}

impl ModelBuilder {
    pub fn rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn moment_order(mut self, k: usize) -> Self {
        self.moment_order = k;
        self
    }

    pub fn drift<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &MeasureView<'_>, &mut [f64]) + Send + Sync + 'static,
    {
        self.drift = Arc::new(f);
        self
    }

    pub fn diffusion<F>(mut self, f: F) -> Self
    where
        F: Fn(f64, &[f64], &MeasureView<'_>, usize, &mut [f64]) + Send + Sync + 'static,
    {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn initial<F>(mut self, f: F) -> Self
    where
        F: Fn(&mut NormalStream, &mut [f64]) + Send + Sync + 'static,
    {
        self.initial = Arc::new(f);
        self
    }

    /// Deterministic initial law `δ_{x0}`.
    pub fn initial_dirac(self, x0: Vec<f64>) -> Self {
        self.initial(move |_, out: &mut [f64]| out.copy_from_slice(&x0))
    }

    pub fn build(self) -> Result<ModelSpec> {
        if self.d == 0 || self.m == 0 {
            return Err(invalid("model dimensions d and m must be positive"));
        }
        if !(self.rho >= 0.0) {
            return Err(invalid(format!("growth exponent rho must be >= 0, got {}", self.rho)));
        }
        Ok(ModelSpec {
            name: self.name,
            d: self.d,
            m: self.m,
            rho: self.rho,
            moment_order: self.moment_order.max(1),
            drift: self.drift,
            diffusion: self.diffusion,
            initial: self.initial,
        })
    }
}

/// `dX = (X − X³ + c E[X]) dt + γ(1 − X²) dW`, γ = 0.5, c = 1, X_0 = 0, ρ = 1.
pub fn model_example_cubic() -> ModelSpec {
    const GAMMA: f64 = 0.5;
    const C: f64 = 1.0;
    ModelSpec::builder("cubic", 1, 1)
        .rho(1.0)
        .moment_order(1)
        .drift(|_, x, mu, out| {
            let x = x[0];
            out[0] = x - x * x * x + C * mu.mean()[0];
        })
        .diffusion(|_, x, _, _, out| {
            let x = x[0];
            out[0] = GAMMA * (1.0 - x * x);
        })
        .initial_dirac(vec![0.0])
        .build()
        .expect("builtin model is valid")
}

/// `dX = (1 − X⁵ + X³ + c E[X]) dt + (γX² + 1) dW`, c = 1, γ = 0.01, X_0 = 0, ρ = 2.
pub fn model_example_quintic() -> ModelSpec {
    const GAMMA: f64 = 0.01;
    const C: f64 = 1.0;
    ModelSpec::builder("quintic", 1, 1)
        .rho(2.0)
        .moment_order(1)
        .drift(|_, x, mu, out| {
            let x = x[0];
            let x3 = x * x * x;
            out[0] = 1.0 - x3 * x * x + x3 + C * mu.mean()[0];
        })
        .diffusion(|_, x, _, _, out| {
            let x = x[0];
            out[0] = GAMMA * x * x + 1.0;
        })
        .initial_dirac(vec![0.0])
        .build()
        .expect("builtin model is valid")
}

/// Double-well mean-field model with multiplicative noise:
///
/// ```text
/// dX = (−5/4 X³ + 3X² E[X] − 3X E[X²] + E[X³]) dt + X dW,   X_0 ~ N(mu0, sigma0sq)
/// ```
pub fn model_example_doublewell(mu0: f64, sigma0sq: f64) -> Result<ModelSpec> {
    if !(sigma0sq >= 0.0) || !sigma0sq.is_finite() {
        return Err(invalid(format!("initial variance must be finite and >= 0, got {sigma0sq}")));
    }
    if !mu0.is_finite() {
        return Err(invalid(format!("initial mean must be finite, got {mu0}")));
    }
    let sd = sigma0sq.sqrt();
    ModelSpec::builder("doublewell", 1, 1)
        .rho(1.0)
        .moment_order(3)
        .drift(|_, x, mu, out| {
            let x = x[0];
            let m1 = mu.raw_moment(1, 0);
            let m2 = mu.raw_moment(2, 0);
            let m3 = mu.raw_moment(3, 0);
            out[0] = -1.25 * x * x * x + 3.0 * x * x * m1 - 3.0 * x * m2 + m3;
        })
        .diffusion(|_, x, _, _, out| out[0] = x[0])
        .initial(move |s, out| out[0] = mu0 + sd * s.next_normal())
        .build()
}

/// Names accepted in config files.
pub const BUILTIN_MODELS: [&str; 3] = ["cubic", "quintic", "doublewell"];

/// Evaluates `b(t, x, μ)`, rejecting non-finite inputs or outputs.
pub fn eval_drift(model: &ModelSpec, t: f64, x: &[f64], mu: &MeasureView<'_>) -> Result<Vec<f64>> {
    check_state(model, x)?;
    let out = model.drift(t, x, mu);
    if !x.iter().all(|v| v.is_finite()) || !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteCoefficient { what: "drift", t, x: x.to_vec() });
    }
    Ok(out)
}

/// Evaluates `σ_r(t, x, μ)` (0-based `r`), rejecting non-finite inputs or outputs.
pub fn eval_diffusion_col(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    mu: &MeasureView<'_>,
    r: usize,
) -> Result<Vec<f64>> {
    check_state(model, x)?;
    if r >= model.noise_dim() {
        return Err(Error::DimensionMismatch(format!(
            "diffusion column {r} out of range for m = {}",
            model.noise_dim()
        )));
    }
    let out = model.diffusion_col(t, x, mu, r);
    if !x.iter().all(|v| v.is_finite()) || !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteCoefficient { what: "diffusion", t, x: x.to_vec() });
    }
    Ok(out)
}

fn check_state(model: &ModelSpec, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "state has length {} but model dimension is {}",
            x.len(),
            model.dim()
        )));
    }
    Ok(())
}
