//! Time stepping for the N-particle system.
//!
//! Within one step every coefficient evaluation sees the measure of the
//! input ensemble, so particle updates are independent and run in parallel.
//! Reductions (moments, divergence scan) are sequential in particle order,
//! which keeps results bitwise independent of the worker count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::brownian::{NormalStream, PathGrid};
use crate::error::{invalid, Error, Result};
use crate::model::{MeasureStats, MeasureView, ModelSpec};
use crate::taming::TamingOperator;

/// Particles per rayon task; smaller ensembles are stepped on one thread.
const PAR_MIN_LEN: usize = 128;

/// Where an ensemble first produced a non-finite state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub particle: usize,
    pub step: usize,
    pub time: f64,
}

/// Particle states `X_k^{i}` (row-major N×d) at time `t_k` with their empirical measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: Vec<f64>,
    d: usize,
    t: f64,
    step_index: usize,
    stats: MeasureStats,
    divergence: Option<Divergence>,
}

impl Ensemble {
    pub fn new(states: Vec<f64>, d: usize, t: f64, step_index: usize, moment_order: usize) -> Result<Self> {
        if d == 0 || !states.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of length {d}",
                states.len()
            )));
        }
        let stats = MeasureStats::compute(&states, d, moment_order);
        Ok(Self { states, d, t, step_index, stats, divergence: None })
    }

    /// One-dimensional ensemble at time 0.
    pub fn from_values(values: Vec<f64>) -> Self {
        Self::new(values, 1, 0.0, 0, 4).expect("d = 1 always divides")
    }

    pub fn view(&self) -> MeasureView<'_> {
        MeasureView::new(&self.stats, &self.states)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.d..(i + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn divergence(&self) -> Option<Divergence> {
        self.divergence
    }

    pub fn is_diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// Same ensemble with particles reordered: row `j` of the result is row `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut states = Vec::with_capacity(self.states.len());
        for &p in perm {
            states.extend_from_slice(self.particle(p));
        }
        let stats = MeasureStats::compute(&states, self.d, self.stats.max_order());
        Self { states, stats, ..self.clone() }
    }

    fn max_abs(&self) -> f64 {
        self.states.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Absolute residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative forward-difference bump for the Jacobian.
    pub jacobian_fd_eps: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 50, jacobian_fd_eps: 1e-7 }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.jacobian_fd_eps > 0.0) {
            return Err(invalid("newton config needs tol > 0, max_iter >= 1 and a positive fd bump"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ModifiedEuler,
    SplitStep,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchemeConfig {
    pub t1: TamingOperator,
    pub t2: TamingOperator,
    pub method: Method,
    pub newton: NewtonConfig,
}

impl SchemeConfig {
    pub fn modified_euler(t1: TamingOperator, t2: TamingOperator) -> Self {
        Self { t1, t2, method: Method::ModifiedEuler, newton: NewtonConfig::default() }
    }

    /// Modified Euler with the same operator family for drift and diffusion.
    pub fn tamed(op: TamingOperator) -> Self {
        Self::modified_euler(op, op)
    }

    /// Classical Euler-Maruyama.
    pub fn euler_maruyama() -> Self {
        Self::tamed(TamingOperator::identity())
    }

    pub fn split_step(newton: NewtonConfig) -> Self {
        let id = TamingOperator::identity();
        Self { t1: id, t2: id, method: Method::SplitStep, newton }
    }

    pub fn label(&self) -> String {
        match self.method {
            Method::SplitStep => "ssm".into(),
            Method::ModifiedEuler if self.t1 == self.t2 && self.t1 == TamingOperator::identity() => "em".into(),
            Method::ModifiedEuler if self.t1 == self.t2 => self.t1.label(),
            Method::ModifiedEuler => format!("{}+{}", self.t1.label(), self.t2.label()),
        }
    }
}

fn check_step_args(ens: &Ensemble, model: &ModelSpec, h: f64, dw: &[f64]) -> Result<()> {
    if !(h > 0.0 && h < 1.0) {
        return Err(invalid(format!("step size must lie in (0, 1), got {h}")));
    }
    if ens.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "ensemble dimension {} but model dimension {}",
            ens.dim(),
            model.dim()
        )));
    }
    if dw.len() != ens.len() * model.noise_dim() {
        return Err(Error::DimensionMismatch(format!(
            "expected {} Brownian increments, got {}",
            ens.len() * model.noise_dim(),
            dw.len()
        )));
    }
    Ok(())
}

/// Replaces non-finite rows by NaN and builds the next ensemble.
fn finish_step(prev: &Ensemble, mut next: Vec<f64>, h: f64, moment_order: usize) -> Ensemble {
    let d = prev.d;
    let step_index = prev.step_index + 1;
    let t = prev.t + h;
    let mut divergence = prev.divergence;
    for (i, row) in next.chunks_exact_mut(d).enumerate() {
        if !row.iter().all(|x| x.is_finite()) {
            row.fill(f64::NAN);
            divergence.get_or_insert(Divergence { particle: i, step: step_index, time: t });
        }
    }
    let stats = MeasureStats::compute(&next, d, moment_order);
    Ensemble { states: next, d, t, step_index, stats, divergence }
}

/// One modified Euler step:
/// `X_{k+1} = X_k + T1(b(t_k, X_k, μ_k)) h + Σ_r T2(σ_r(t_k, X_k, μ_k)) ΔW_r`.
///
/// Non-finite results do not abort; the affected rows become NaN and the
/// returned ensemble carries a [`Divergence`] marker.
pub fn euler_step(ens: &Ensemble, model: &ModelSpec, cfg: &SchemeConfig, h: f64, dw: &[f64]) -> Result<Ensemble> {
    if cfg.method != Method::ModifiedEuler {
        return Err(Error::SchemeMismatch("euler_step needs a modified Euler scheme".into()));
    }
    check_step_args(ens, model, h, dw)?;
    let d = ens.d;
    let m = model.noise_dim();
    let t = ens.t;
    let mu = ens.view();
    let (t1, t2) = (cfg.t1, cfg.t2);
    let mut next = vec![0.0; ens.states.len()];
    next.par_chunks_mut(d).enumerate().with_min_len(PAR_MIN_LEN).for_each_init(
        || (vec![0.0; d], vec![0.0; d]),
        |(drift, col), (i, out)| {
            let x = &ens.states[i * d..(i + 1) * d];
            model.drift_into(t, x, &mu, drift);
            t1.tame_drift(drift, x, h);
            for c in 0..d {
                out[c] = x[c] + drift[c] * h;
            }
            for r in 0..m {
                model.diffusion_col_into(t, x, &mu, r, col);
                t2.tame_diffusion(col, x, h);
                let w = dw[i * m + r];
                for c in 0..d {
                    out[c] += col[c] * w;
                }
            }
        },
    );
    Ok(finish_step(ens, next, h, model.moment_order()))
}

/// One split-step: solve `Y = X_k + h b(t_k, Y, μ_k)` by Newton's method,
/// then `X_{k+1} = Y + Σ_r σ_r(t_k, Y, μ_k) ΔW_r`. The measure stays frozen at `μ_k`.
pub fn split_step(ens: &Ensemble, model: &ModelSpec, cfg: &SchemeConfig, h: f64, dw: &[f64]) -> Result<Ensemble> {
    if cfg.method != Method::SplitStep {
        return Err(Error::SchemeMismatch("split_step needs the split-step scheme".into()));
    }
    check_step_args(ens, model, h, dw)?;
    cfg.newton.validate()?;
    let d = ens.d;
    let m = model.noise_dim();
    let t = ens.t;
    let mu = ens.view();
    let newton = cfg.newton;
    let mut next = vec![0.0; ens.states.len()];
    let mut failures = vec![None; ens.len()];
    next.par_chunks_mut(d)
        .zip(failures.par_iter_mut())
        .enumerate()
        .with_min_len(PAR_MIN_LEN)
        .for_each_init(
            || NewtonScratch::new(d),
            |scratch, (i, (out, failure))| {
                let x = &ens.states[i * d..(i + 1) * d];
                if !x.iter().all(|v| v.is_finite()) {
                    out.fill(f64::NAN);
                    return;
                }
                if let Err(residual) = solve_implicit(model, t, x, &mu, h, &newton, out, scratch) {
                    if residual.is_finite() {
                        *failure = Some(residual);
                        return;
                    }
                    out.fill(f64::NAN);
                    return;
                }
                let y = scratch.y.as_mut_slice();
                y.copy_from_slice(out);
                for r in 0..m {
                    model.diffusion_col_into(t, y, &mu, r, &mut scratch.col);
                    let w = dw[i * m + r];
                    for (o, s) in out.iter_mut().zip(&scratch.col) {
                        *o += s * w;
                    }
                }
            },
        );
    if let Some((particle, residual)) =
        failures.iter().enumerate().find_map(|(i, f)| f.map(|r| (i, r)))
    {
        return Err(Error::NewtonNonConvergence { particle, residual });
    }
    Ok(finish_step(ens, next, h, model.moment_order()))
}

/// Dispatches on `cfg.method`.
pub fn step(ens: &Ensemble, model: &ModelSpec, cfg: &SchemeConfig, h: f64, dw: &[f64]) -> Result<Ensemble> {
    match cfg.method {
        Method::ModifiedEuler => euler_step(ens, model, cfg, h, dw),
        Method::SplitStep => split_step(ens, model, cfg, h, dw),
    }
}

struct NewtonScratch {
    y: Vec<f64>,
    by: Vec<f64>,
    bump: Vec<f64>,
    bb: Vec<f64>,
    col: Vec<f64>,
}

impl NewtonScratch {
    fn new(d: usize) -> Self {
        Self { y: vec![0.0; d], by: vec![0.0; d], bump: vec![0.0; d], bb: vec![0.0; d], col: vec![0.0; d] }
    }
}

fn residual_into(x: &[f64], y: &[f64], by: &[f64], h: f64, res: &mut [f64]) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..x.len() {
        res[c] = y[c] - x[c] - h * by[c];
        worst = worst.max(res[c].abs());
    }
    worst
}

/// Newton iteration for `F(Y) = Y − x − h b(t, Y, μ) = 0`, starting from `Y = x`.
/// On success `y_out` holds the root; on failure the last residual norm is returned.
#[allow(clippy::too_many_arguments)]
fn solve_implicit(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    mu: &MeasureView<'_>,
    h: f64,
    cfg: &NewtonConfig,
    y_out: &mut [f64],
    s: &mut NewtonScratch,
) -> std::result::Result<(), f64> {
    let d = x.len();
    y_out.copy_from_slice(x);
    let mut res = vec![0.0; d];
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        model.drift_into(t, y_out, mu, &mut s.by);
        residual = residual_into(x, y_out, &s.by, h, &mut res);
        if !residual.is_finite() {
            return Err(f64::NAN);
        }
        if residual <= cfg.tol {
            return Ok(());
        }
        // forward-difference Jacobian of F
        let mut jac = DMatrix::<f64>::identity(d, d);
        for j in 0..d {
            s.bump.copy_from_slice(y_out);
            let eps = cfg.jacobian_fd_eps * y_out[j].abs().max(1.0);
            s.bump[j] += eps;
            model.drift_into(t, &s.bump, mu, &mut s.bb);
            for c in 0..d {
                jac[(c, j)] -= h * (s.bb[c] - s.by[c]) / eps;
            }
        }
        let delta = if d == 1 {
            vec![res[0] / jac[(0, 0)]]
        } else {
            match jac.lu().solve(&DVector::from_column_slice(&res)) {
                Some(v) => v.as_slice().to_vec(),
                None => return Err(residual),
            }
        };
        let mut step_norm = 0.0f64;
        let mut scale = 1.0f64;
        for c in 0..d {
            y_out[c] -= delta[c];
            step_norm = step_norm.max(delta[c].abs());
            scale = scale.max(y_out[c].abs());
        }
        if !y_out.iter().all(|v| v.is_finite()) {
            return Err(f64::NAN);
        }
        if step_norm <= 4.0 * f64::EPSILON * scale {
            // stagnated at rounding level; accept if the residual is at its floor
            model.drift_into(t, y_out, mu, &mut s.by);
            residual = residual_into(x, y_out, &s.by, h, &mut res);
            let floor = 64.0 * f64::EPSILON * (scale + x.iter().fold(0.0f64, |a, v| a.max(v.abs())) + h * s.by.iter().fold(0.0f64, |a, v| a.max(v.abs())));
            return if residual <= cfg.tol.max(floor) { Ok(()) } else { Err(residual) };
        }
    }
    model.drift_into(t, y_out, mu, &mut s.by);
    residual = residual_into(x, y_out, &s.by, h, &mut res).min(residual.max(0.0));
    if residual <= cfg.tol {
        Ok(())
    } else {
        Err(residual)
    }
}

/// Samples `X_0^i` for `i < n` from the model's initial law, one stream per particle.
pub fn initial_ensemble(model: &ModelSpec, seed: u64, n: usize) -> Ensemble {
    let d = model.dim();
    let mut states = vec![0.0; n * d];
    states.par_chunks_mut(d).enumerate().with_min_len(PAR_MIN_LEN).for_each(|(i, row)| {
        let mut stream = NormalStream::for_initial(seed, i);
        model.sample_initial(&mut stream, row);
    });
    Ensemble::new(states, d, 0.0, 0, model.moment_order()).expect("rows have model dimension")
}

/// What to keep while simulating.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recording {
    /// Sorted times in `[0, T]`; each is recorded at the grid point `κ(t) = ⌊t/h⌋ h`.
    pub times: Vec<f64>,
    /// Keep every step's states (needed for path traces).
    pub history: bool,
}

impl Recording {
    pub fn at(times: Vec<f64>) -> Self {
        Self { times, history: false }
    }
}

/// Every step's states, row-major N×d per step.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Ensembles at `κ(times[j])`, truncated at divergence.
    pub records: Vec<Ensemble>,
    pub final_state: Ensemble,
    pub divergence: Option<Divergence>,
    /// Largest `|X|` component over all finite states visited.
    pub max_abs: f64,
    /// Largest `(1/N) Σ |X_k^i|²` over all visited steps (NaN once diverged).
    pub sup_second_moment: f64,
    pub step_size: f64,
    pub steps: usize,
    pub history: Option<History>,
}

/// Grid index `⌊n t / T⌋`, clamped to `[0, n]`, with a small allowance for
/// times that should land exactly on a grid point.
pub fn grid_index(t: f64, horizon: f64, steps: usize) -> usize {
    let k = (t / horizon * steps as f64 * (1.0 + 1e-12) + 1e-9).floor();
    (k.max(0.0) as usize).min(steps)
}

/// Simulates from the model's initial law, sampled with the grid's seed.
pub fn simulate(model: &ModelSpec, cfg: &SchemeConfig, grid: &PathGrid, recording: &Recording) -> Result<Trajectory> {
    let init = initial_ensemble(model, grid.seed(), grid.particles());
    simulate_from(init, model, cfg, grid, recording)
}

/// Simulates over every step of `grid` starting from `initial`.
pub fn simulate_from(
    initial: Ensemble,
    model: &ModelSpec,
    cfg: &SchemeConfig,
    grid: &PathGrid,
    recording: &Recording,
) -> Result<Trajectory> {
    simulate_observed(initial, model, cfg, grid, recording, &mut |_| {})
}

/// [`simulate_from`] that also hands every visited ensemble, the initial one
/// included, to `observer` in step order.
pub fn simulate_observed(
    initial: Ensemble,
    model: &ModelSpec,
    cfg: &SchemeConfig,
    grid: &PathGrid,
    recording: &Recording,
    observer: &mut dyn FnMut(&Ensemble),
) -> Result<Trajectory> {
    if initial.len() != grid.particles() {
        return Err(Error::DimensionMismatch(format!(
            "{} particles but the grid drives {}",
            initial.len(),
            grid.particles()
        )));
    }
    if grid.noise_dim() != model.noise_dim() {
        return Err(Error::DimensionMismatch(format!(
            "grid has Brownian dimension {} but the model needs {}",
            grid.noise_dim(),
            model.noise_dim()
        )));
    }
    let horizon = grid.horizon();
    let steps = grid.steps();
    let h = grid.step_size();
    if recording.times.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("record times must be sorted"));
    }
    if let Some(bad) = recording.times.iter().find(|&&t| !(0.0..=horizon * (1.0 + 1e-12)).contains(&t)) {
        return Err(invalid(format!("record time {bad} outside [0, {horizon}]")));
    }
    let targets: Vec<usize> = recording.times.iter().map(|&t| grid_index(t, horizon, steps)).collect();

    let mut records = Vec::with_capacity(targets.len());
    let mut next_target = 0;
    let mut ens = initial;
    let mut max_abs = ens.max_abs();
    let mut sup_m2 = ens.view().w2sq_to_dirac0();
    let mut history = recording.history.then(|| History { times: vec![0.0], states: vec![ens.states.clone()] });

    let take_records = |ens: &Ensemble, records: &mut Vec<Ensemble>, next_target: &mut usize| {
        while *next_target < targets.len() && targets[*next_target] == ens.step_index {
            records.push(ens.clone());
            *next_target += 1;
        }
    };
    take_records(&ens, &mut records, &mut next_target);
    observer(&ens);

    let mut dw = vec![0.0; grid.particles() * grid.noise_dim()];
    let mut cursor = grid.cursor();
    while ens.divergence.is_none() && cursor.next_into(&mut dw) {
        let mut next = step(&ens, model, cfg, h, &dw)?;
        // time on the grid, not accumulated
        next.t = next.step_index as f64 * h;
        if let Some(div) = next.divergence.as_mut() {
            div.time = next.t;
        }
        max_abs = max_abs.max(next.states.iter().filter(|x| x.is_finite()).fold(0.0, |m: f64, x| m.max(x.abs())));
        sup_m2 = if next.divergence.is_some() { f64::NAN } else { sup_m2.max(next.view().w2sq_to_dirac0()) };
        if let Some(hist) = history.as_mut() {
            hist.times.push(next.t);
            hist.states.push(next.states.clone());
        }
        ens = next;
        take_records(&ens, &mut records, &mut next_target);
        observer(&ens);
    }

    Ok(Trajectory {
        records,
        divergence: ens.divergence,
        final_state: ens,
        max_abs,
        sup_second_moment: sup_m2,
        step_size: h,
        steps,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_example_cubic, model_example_quintic, EmpiricalMeasure};
    use std::sync::{Arc, Mutex};

    fn scalar_model(name: &str, drift: impl Fn(f64) -> f64 + Send + Sync + 'static, sigma: f64) -> ModelSpec {
        ModelSpec::builder(name, 1, 1)
            .drift(move |_, x, _, out| out[0] = drift(x[0]))
            .diffusion(move |_, _, _, _, out| out[0] = sigma)
            .build()
            .unwrap()
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(lo) < 0.0) == (f(mid) < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let model = scalar_model("zero", |_| 0.0, 0.0);
        let ens = Ensemble::from_values(vec![1.0, -2.0, 0.5]);
        let next = euler_step(&ens, &model, &SchemeConfig::tamed(TamingOperator::modified()), 0.1, &[0.3, -0.2, 1.0]).unwrap();
        assert_eq!(next.states(), ens.states());
        assert_eq!(next.step_index(), 1);
    }

    #[test]
    fn pure_noise_step() {
        let model = scalar_model("noise", |_| 0.0, 1.0);
        let ens = Ensemble::from_values(vec![0.0]);
        let next = euler_step(&ens, &model, &SchemeConfig::euler_maruyama(), 0.5, &[0.731]).unwrap();
        assert_eq!(next.states(), &[0.731]);
    }

    #[test]
    fn cubic_explicit_step_by_hand() {
        let model = model_example_cubic();
        let em = SchemeConfig::euler_maruyama();
        let next = euler_step(&Ensemble::from_values(vec![0.0]), &model, &em, 0.5, &[0.0]).unwrap();
        assert_eq!(next.states(), &[0.0]);
        let next = euler_step(&Ensemble::from_values(vec![1.0]), &model, &em, 0.5, &[0.0]).unwrap();
        assert_eq!(next.states(), &[1.5]);
    }

    #[test]
    fn split_step_closed_forms() {
        let ssm = SchemeConfig::split_step(NewtonConfig::default());
        let lin = scalar_model("lin", |x| -x, 0.0);
        let y = split_step(&Ensemble::from_values(vec![1.0]), &lin, &ssm, 0.5, &[0.0]).unwrap();
        assert!((y.states()[0] - 2.0 / 3.0).abs() < 1e-14);

        let cubic = scalar_model("cub", |x| -x * x * x, 0.0);
        let y = split_step(&Ensemble::from_values(vec![1.0]), &cubic, &ssm, 0.1, &[0.0]).unwrap().states()[0];
        let oracle = bisect(|v| v + 0.1 * v * v * v - 1.0, 0.0, 1.0);
        assert!((oracle - 0.921_699).abs() < 1e-6);
        assert!((y - oracle).abs() < 1e-10, "{y} vs {oracle}");

        // no drift: explicit diffusion step
        let noise = scalar_model("noise", |_| 0.0, 2.0);
        let y = split_step(&Ensemble::from_values(vec![0.25]), &noise, &ssm, 0.1, &[0.5]).unwrap();
        assert_eq!(y.states(), &[1.25]);
    }

    #[test]
    fn split_step_two_dimensional() {
        // b(y) = A y with A = [[-1, 0.5], [0, -2]]: Y = (I - hA)^{-1} x
        let model = ModelSpec::builder("lin2", 2, 1)
            .drift(|_, x, _, out| {
                out[0] = -x[0] + 0.5 * x[1];
                out[1] = -2.0 * x[1];
            })
            .build()
            .unwrap();
        let ens = Ensemble::new(vec![1.0, 1.0], 2, 0.0, 0, 2).unwrap();
        let y = split_step(&ens, &model, &SchemeConfig::split_step(NewtonConfig::default()), 0.5, &[0.0]).unwrap();
        // (I - hA) = [[1.5, -0.25], [0, 2]]
        let y1 = 0.5;
        let y0 = (1.0 + 0.25 * y1) / 1.5;
        assert!((y.states()[0] - y0).abs() < 1e-12);
        assert!((y.states()[1] - y1).abs() < 1e-12);
    }

    #[test]
    fn newton_failure_is_reported() {
        let model = scalar_model("cub", |x| -x * x * x, 0.0);
        let cfg = SchemeConfig::split_step(NewtonConfig { tol: 1e-12, max_iter: 1, jacobian_fd_eps: 1e-7 });
        let err = split_step(&Ensemble::from_values(vec![0.0, 5.0]), &model, &cfg, 0.5, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NewtonNonConvergence { particle: 1, .. }), "{err:?}");
    }

    #[test]
    fn scheme_and_dimension_checks() {
        let model = model_example_cubic();
        let ens = Ensemble::from_values(vec![0.0, 1.0]);
        let ssm = SchemeConfig::split_step(NewtonConfig::default());
        assert!(matches!(euler_step(&ens, &model, &ssm, 0.1, &[0.0, 0.0]), Err(Error::SchemeMismatch(_))));
        let em = SchemeConfig::euler_maruyama();
        assert!(matches!(euler_step(&ens, &model, &em, 0.1, &[0.0]), Err(Error::DimensionMismatch(_))));
        assert!(euler_step(&ens, &model, &em, 1.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn divergence_is_flagged_not_fatal() {
        let model = model_example_quintic();
        let ens = Ensemble::from_values(vec![0.0, 1e80]);
        let next = euler_step(&ens, &model, &SchemeConfig::euler_maruyama(), 0.125, &[0.0, 0.0]).unwrap();
        let div = next.divergence().unwrap();
        assert_eq!((div.particle, div.step), (1, 1));
        assert!(next.states()[1].is_nan());
        assert!(next.states()[0].is_finite());
    }

    #[test]
    fn identity_taming_is_plain_euler_maruyama() {
        let model = model_example_cubic();
        let grid = PathGrid::generate(31, 10, 0.5, 8, 1).unwrap();
        let h = grid.step_size();
        let mut xs: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
        let mut ens = Ensemble::from_values(xs.clone());
        let mut dw = vec![0.0; 8];
        let mut cursor = grid.cursor();
        while cursor.next_into(&mut dw) {
            ens = euler_step(&ens, &model, &SchemeConfig::euler_maruyama(), h, &dw).unwrap();
            // straight-line reference
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            xs = xs
                .iter()
                .zip(&dw)
                .map(|(&x, &w)| x + (x - x * x * x + mean) * h + 0.5 * (1.0 - x * x) * w)
                .collect();
            for (a, b) in ens.states().iter().zip(&xs) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert_eq!(ens.step_index(), 10);
    }

    #[test]
    fn measure_is_frozen_within_a_step() {
        let seen = Arc::new(Mutex::new(Vec::<(u64, u64)>::new()));
        let sink = seen.clone();
        let sink2 = seen.clone();
        let model = ModelSpec::builder("spy", 1, 1)
            .drift(move |t, x, mu, out| {
                sink.lock().unwrap().push((t.to_bits(), mu.fingerprint()));
                out[0] = -x[0] + mu.mean()[0];
            })
            .diffusion(move |t, _, mu, _, out| {
                sink2.lock().unwrap().push((t.to_bits(), mu.fingerprint()));
                out[0] = 0.3;
            })
            .build()
            .unwrap();
        let grid = PathGrid::generate(4, 5, 0.5, 300, 1).unwrap();
        let init = Ensemble::from_values((0..300).map(|i| (i as f64).sin()).collect());
        let init_fp = init.view().fingerprint();
        simulate_from(init, &model, &SchemeConfig::tamed(TamingOperator::modified()), &grid, &Recording::default()).unwrap();
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 5 * 300 * 2);
        let mut by_time = std::collections::BTreeMap::<u64, std::collections::BTreeSet<u64>>::new();
        for (t, fp) in seen.iter() {
            by_time.entry(*t).or_default().insert(*fp);
        }
        assert_eq!(by_time.len(), 5);
        assert!(by_time.values().all(|fps| fps.len() == 1));
        assert!(by_time[&0f64.to_bits()].contains(&init_fp));
    }

    #[test]
    fn permutation_equivariance() {
        let model = model_example_cubic();
        let n = 6;
        let perm = [3, 0, 5, 1, 4, 2];
        let grid = PathGrid::generate(77, 8, 1.0, n, 1).unwrap();
        let mut ens = Ensemble::from_values(vec![0.1, -0.4, 0.9, 0.0, 0.3, -0.7]);
        let mut pens = ens.permuted(&perm);
        let mut dw = vec![0.0; n];
        let mut cursor = grid.cursor();
        let cfg = SchemeConfig::tamed(TamingOperator::tanh(1.0).unwrap());
        while cursor.next_into(&mut dw) {
            let pdw: Vec<f64> = perm.iter().map(|&p| dw[p]).collect();
            ens = euler_step(&ens, &model, &cfg, grid.step_size(), &dw).unwrap();
            pens = euler_step(&pens, &model, &cfg, grid.step_size(), &pdw).unwrap();
            let expect = ens.permuted(&perm);
            // the measure is a symmetric function, but summation order may differ
            for (a, b) in pens.states().iter().zip(expect.states()) {
                assert!((a - b).abs() <= 1e-13, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn recording_uses_floor_grid_point() {
        let model = scalar_model("drift1", |_| 1.0, 0.0);
        let grid = PathGrid::generate(1, 4, 1.0, 2, 1).unwrap();
        let cfg = SchemeConfig::euler_maruyama();
        let traj = simulate(&model, &cfg, &grid, &Recording::at(vec![0.0, 0.6, 1.0])).unwrap();
        assert_eq!(traj.records.len(), 3);
        assert_eq!(traj.records[0].step_index(), 0);
        assert_eq!(traj.records[0].states(), &[0.0, 0.0]);
        assert_eq!(traj.records[1].step_index(), 2);
        assert_eq!(traj.records[1].time(), 0.5);
        assert_eq!(traj.records[2].step_index(), 4);
        assert_eq!(grid_index(0.6, 1.0, 4), 2);
        assert_eq!(grid_index(1.0, 10.0, 1000), 100);
        assert!(simulate(&model, &cfg, &grid, &Recording::at(vec![0.6, 0.2])).is_err());
        assert!(simulate(&model, &cfg, &grid, &Recording::at(vec![1.5])).is_err());
    }

    #[test]
    fn simulate_is_deterministic() {
        let model = model_example_cubic();
        let grid = PathGrid::generate(9, 64, 1.0, 50, 1).unwrap();
        let cfg = SchemeConfig::tamed(TamingOperator::modified());
        let rec = Recording { times: vec![0.25, 1.0], history: true };
        let a = simulate(&model, &cfg, &grid, &rec).unwrap();
        let b = simulate(&model, &cfg, &grid, &rec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.as_ref().unwrap().states.len(), 65);
    }

    #[test]
    fn simulation_stops_at_divergence() {
        let model = ModelSpec::builder("blowup", 1, 1)
            .drift(|_, x, _, out| out[0] = x[0] * x[0] * x[0] * x[0] * x[0])
            .initial_dirac(vec![3.0])
            .build()
            .unwrap();
        let grid = PathGrid::generate(2, 64, 0.5, 3, 1).unwrap();
        let traj = simulate(&model, &SchemeConfig::euler_maruyama(), &grid, &Recording::at(vec![0.0, 0.5])).unwrap();
        let div = traj.divergence.expect("explicit Euler on x^5 explodes");
        assert!(div.step < 64);
        assert_eq!(traj.records.len(), 1);
        assert!(traj.sup_second_moment.is_nan());
        assert!(traj.final_state.is_diverged());
    }

    #[test]
    fn empirical_measure_dirac_helper() {
        let mu = EmpiricalMeasure::dirac(&[2.0], 3);
        assert_eq!(mu.view().raw_moment(3, 0), 8.0);
    }
}
