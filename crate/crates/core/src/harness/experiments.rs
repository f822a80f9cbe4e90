//! The experiment drivers behind the CLI subcommands.
//!
//! Each driver returns an in-memory report; [`OutputFile`] builders turn the
//! reports into CSV and SVG documents. Independent cells (scheme × step size,
//! particle count × repetition) run in parallel and are collected in a fixed
//! order, so reports do not depend on the worker count.

use rayon::prelude::*;

use crate::brownian::PathGrid;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::stats::{fit_line, kde, norm_moment, rmse, w2_1d, DensityCurve, KdeGrid, LineFit, PathTable};
use crate::stepper::{initial_ensemble, simulate_from, simulate_observed, Ensemble, Recording, SchemeConfig, Trajectory};
use crate::taming::TamingKind;
use crate::verify::{
    check_fte_bound, check_model, check_taming, compare_equilibria, doublewell_equilibria_oracle,
    sweep_model_constant, AssumptionId, AssumptionReport, CheckConstants, EquilibriaComparison, SampleSpec,
    TheoryConstants,
};

use super::config::ExperimentConfig;
use super::csv::{Cell, Table};
use super::svg::{FitOverlay, Plot, Series, SeriesStyle};

/// Seed of repetition `rep`.
pub fn rep_seed(base: u64, rep: usize) -> u64 {
    base.wrapping_add(rep as u64)
}

/// Compact decimal form used in file names (`1`, `0.5`, `0.004`).
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

fn prepare(model: &ModelSpec, cfg: &ExperimentConfig) -> Result<Vec<SchemeConfig>> {
    cfg.validate()?;
    cfg.scheme_configs(model)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvRow {
    pub h: f64,
    /// NaN when a run diverged.
    pub rmse: f64,
    pub log2_h: f64,
    pub log2_rmse: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConvergence {
    pub scheme: String,
    /// Sorted by descending `h`.
    pub rows: Vec<ConvRow>,
    /// Least squares on `(log2_h, log2_rmse)` over usable rows; needs at least 3.
    pub fit: Option<LineFit>,
    /// Rows left out of the fit (diverged or zero error).
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub model: String,
    pub h_ref: f64,
    pub schemes: Vec<SchemeConvergence>,
}

impl ConvergenceReport {
    pub fn any_diverged(&self) -> bool {
        self.schemes.iter().any(|s| s.rows.iter().any(|r| r.diverged))
    }

    pub fn scheme(&self, label: &str) -> Option<&SchemeConvergence> {
        self.schemes.iter().find(|s| s.scheme == label)
    }
}

/// Fits a convergence line over rows with finite, positive error.
pub fn fit_rows(rows: &[ConvRow]) -> (Option<LineFit>, usize) {
    let usable: Vec<&ConvRow> = rows.iter().filter(|r| r.rmse.is_finite() && r.rmse > 0.0).collect();
    let excluded = rows.len() - usable.len();
    if usable.len() < 3 {
        return (None, excluded);
    }
    let xs: Vec<f64> = usable.iter().map(|r| r.log2_h).collect();
    let ys: Vec<f64> = usable.iter().map(|r| r.log2_rmse).collect();
    (fit_line(&xs, &ys).ok(), excluded)
}

/// Strong error study on common Brownian paths.
///
/// One reference grid at `h_ref` drives every scheme; each coarse run uses
/// the coarsened grid and the same initial ensemble, and the error at `T`
/// is the root-mean-square gap to the same scheme's reference run. With
/// several repetitions the squared errors are averaged before the root.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    run_convergence_for(&cfg.model.build()?, cfg)
}

/// As [`run_convergence`] with a caller-supplied model in place of `[model]`.
pub fn run_convergence_for(model: &ModelSpec, cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    let schemes = prepare(model, cfg)?;
    let n_ref = cfg.reference_steps()?;
    let factors: Vec<usize> = cfg.h_list.iter().map(|&h| cfg.factor_for(h)).collect::<Result<_>>()?;
    let mut sq = vec![vec![0.0f64; factors.len()]; schemes.len()];
    let mut diverged = vec![vec![false; factors.len()]; schemes.len()];
    for rep in 0..cfg.repetitions {
        let seed = rep_seed(cfg.seed, rep);
        let grid = PathGrid::generate(seed, n_ref, cfg.horizon, cfg.particles, model.noise_dim())?;
        let init = initial_ensemble(model, seed, cfg.particles);
        // cell (s, None) is the reference, (s, Some(j)) the coarse run at factors[j]
        let cells: Vec<(usize, Option<usize>)> = (0..schemes.len())
            .flat_map(|s| std::iter::once((s, None)).chain((0..factors.len()).map(move |j| (s, Some(j)))))
            .collect();
        let finals: Vec<Ensemble> = cells
            .par_iter()
            .map(|&(s, j)| {
                let g = match j {
                    None => grid.clone(),
                    Some(j) => grid.coarsen(factors[j])?,
                };
                Ok(simulate_from(init.clone(), model, &schemes[s], &g, &Recording::default())?.final_state)
            })
            .collect::<Result<_>>()?;
        let stride = factors.len() + 1;
        for s in 0..schemes.len() {
            let reference = &finals[s * stride];
            for j in 0..factors.len() {
                let coarse = &finals[s * stride + 1 + j];
                if reference.is_diverged() || coarse.is_diverged() {
                    diverged[s][j] = true;
                } else {
                    sq[s][j] += rmse(reference, coarse)?.powi(2);
                }
            }
        }
    }
    let reports = schemes
        .iter()
        .enumerate()
        .map(|(s, scheme)| {
            let mut rows: Vec<ConvRow> = cfg
                .h_list
                .iter()
                .enumerate()
                .map(|(j, &h)| {
                    let e = if diverged[s][j] { f64::NAN } else { (sq[s][j] / cfg.repetitions as f64).sqrt() };
                    ConvRow { h, rmse: e, log2_h: h.log2(), log2_rmse: e.log2(), diverged: diverged[s][j] }
                })
                .collect();
            rows.sort_by(|a, b| b.h.total_cmp(&a.h));
            let (fit, excluded) = fit_rows(&rows);
            SchemeConvergence { scheme: scheme.label(), rows, fit, excluded }
        })
        .collect();
    Ok(ConvergenceReport { model: model.name().to_string(), h_ref: cfg.h_ref, schemes: reports })
}

/// One simulated scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeRun {
    pub scheme: String,
    pub h: f64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEntry {
    pub scheme: String,
    pub t: f64,
    /// `None` when the run diverged before `t`.
    pub curve: Option<DensityCurve>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityBundle {
    pub runs: Vec<SchemeRun>,
    pub curves: Vec<DensityEntry>,
}

impl DensityBundle {
    pub fn any_diverged(&self) -> bool {
        self.runs.iter().any(|r| r.trajectory.divergence.is_some())
    }
}

/// Density study: every scheme at the first coarse step, plus an optional
/// split-step reference at `h_ref`, all on one coupled grid.
pub fn run_density(cfg: &ExperimentConfig) -> Result<DensityBundle> {
    run_density_for(&cfg.model.build()?, cfg)
}

/// As [`run_density`] with a caller-supplied model in place of `[model]`.
pub fn run_density_for(model: &ModelSpec, cfg: &ExperimentConfig) -> Result<DensityBundle> {
    let schemes = prepare(model, cfg)?;
    if model.dim() != 1 {
        return Err(Error::DimensionMismatch("density study needs d = 1".into()));
    }
    let n_ref = cfg.reference_steps()?;
    let grid = PathGrid::generate(cfg.seed, n_ref, cfg.horizon, cfg.particles, model.noise_dim())?;
    let init = initial_ensemble(model, cfg.seed, cfg.particles);
    let times = cfg.effective_record_times();
    let h = cfg.h_list[0];
    let factor = cfg.factor_for(h)?;
    let mut jobs: Vec<(String, SchemeConfig, usize)> = schemes.iter().map(|s| (s.label(), *s, factor)).collect();
    if cfg.ssm_reference {
        jobs.push(("ssm_ref".into(), SchemeConfig::split_step(cfg.newton), 1));
    }
    let runs: Vec<SchemeRun> = jobs
        .par_iter()
        .map(|(label, scheme, f)| {
            let g = grid.coarsen(*f)?;
            let trajectory = simulate_from(init.clone(), model, scheme, &g, &Recording::at(times.clone()))?;
            Ok(SchemeRun { scheme: label.clone(), h: g.step_size(), trajectory })
        })
        .collect::<Result<_>>()?;
    let mut curves = Vec::new();
    for run in &runs {
        for (j, &t) in times.iter().enumerate() {
            let curve = match run.trajectory.records.get(j) {
                Some(ens) if !ens.is_diverged() => Some(kde(ens, &KdeGrid::Auto, None)?),
                _ => None,
            };
            curves.push(DensityEntry { scheme: run.scheme.clone(), t, curve });
        }
    }
    Ok(DensityBundle { runs, curves })
}

/// Fraction of particles within `radius` of any of `points`.
pub fn fraction_near(ens: &Ensemble, points: &[f64], radius: f64) -> f64 {
    if ens.is_empty() {
        return 0.0;
    }
    let hits = ens.states().iter().filter(|x| points.iter().any(|p| (*x - p).abs() <= radius)).count();
    hits as f64 / ens.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilitySummary {
    /// Largest finite `|X|` among the traced particles.
    pub max_abs: f64,
    /// First time a traced particle was non-finite.
    pub first_non_finite: Option<f64>,
    /// Largest finite `|X|` over the whole ensemble.
    pub ensemble_max_abs: f64,
    /// First divergence anywhere in the ensemble.
    pub ensemble_divergence_time: Option<f64>,
}

impl StabilitySummary {
    pub fn all_finite(&self) -> bool {
        self.first_non_finite.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEntry {
    pub scheme: String,
    pub h: f64,
    pub table: PathTable,
    pub summary: StabilitySummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub entries: Vec<PathEntry>,
}

impl PathBundle {
    pub fn any_diverged(&self) -> bool {
        self.entries.iter().any(|e| e.summary.ensemble_divergence_time.is_some())
    }

    pub fn entry(&self, scheme: &str, h: f64) -> Option<&PathEntry> {
        self.entries.iter().find(|e| e.scheme == scheme && (e.h - h).abs() <= 1e-12 * h)
    }
}

/// Path study: every scheme at every coarse step, tracing the configured particles.
pub fn run_paths(cfg: &ExperimentConfig) -> Result<PathBundle> {
    run_paths_for(&cfg.model.build()?, cfg)
}

/// As [`run_paths`] with a caller-supplied model in place of `[model]`.
pub fn run_paths_for(model: &ModelSpec, cfg: &ExperimentConfig) -> Result<PathBundle> {
    let schemes = prepare(model, cfg)?;
    if model.dim() != 1 {
        return Err(Error::DimensionMismatch("path study needs d = 1".into()));
    }
    let n_ref = cfg.reference_steps()?;
    let grid = PathGrid::generate(cfg.seed, n_ref, cfg.horizon, cfg.particles, model.noise_dim())?;
    let init = initial_ensemble(model, cfg.seed, cfg.particles);
    let cells: Vec<(usize, usize)> =
        (0..schemes.len()).flat_map(|s| (0..cfg.h_list.len()).map(move |j| (s, j))).collect();
    let ids = cfg.trace_particles.clone();
    let entries = cells
        .par_iter()
        .map(|&(s, j)| {
            let g = grid.coarsen(cfg.factor_for(cfg.h_list[j])?)?;
            let steps = g.steps();
            let h = g.step_size();
            let mut times = Vec::new();
            let mut rows = Vec::new();
            let traj = simulate_observed(init.clone(), model, &schemes[s], &g, &Recording::default(), &mut |ens| {
                if ens.step_index() % cfg.path_stride == 0 {
                    times.push(ens.step_index() as f64 * h);
                    rows.push(ids.iter().map(|&i| ens.states()[i]).collect::<Vec<f64>>());
                }
            })?;
            // steps after divergence are NaN
            let mut k = times.len() * cfg.path_stride;
            while k <= steps {
                times.push(k as f64 * h);
                rows.push(vec![f64::NAN; ids.len()]);
                k += cfg.path_stride;
            }
            let table = PathTable { times, ids: ids.clone(), dim: 1, rows };
            let summary = StabilitySummary {
                max_abs: table.max_abs(),
                first_non_finite: table.first_non_finite(),
                ensemble_max_abs: traj.max_abs,
                ensemble_divergence_time: traj.divergence.map(|d| d.time),
            };
            Ok(PathEntry { scheme: schemes[s].label(), h, table, summary })
        })
        .collect::<Result<_>>()?;
    Ok(PathBundle { entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEntry {
    pub scheme: String,
    pub seed: u64,
    pub orders: Vec<usize>,
    /// `(t, moments in order)` every `moment_stride` steps.
    pub rows: Vec<(f64, Vec<f64>)>,
    /// Supremum over finite rows of each moment.
    pub sup: Vec<f64>,
    pub first_non_finite: Option<f64>,
    /// The second moment (or the first configured order) exceeded the ceiling.
    pub exceeded_ceiling: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentBundle {
    pub entries: Vec<MomentEntry>,
}

impl MomentBundle {
    pub fn any_diverged(&self) -> bool {
        self.entries.iter().any(|e| e.first_non_finite.is_some())
    }

    pub fn for_scheme<'a>(&'a self, scheme: &'a str) -> impl Iterator<Item = &'a MomentEntry> + 'a {
        self.entries.iter().filter(move |e| e.scheme == scheme)
    }
}

/// Moment study: every scheme at the first coarse step, once per repetition seed.
pub fn run_moments(cfg: &ExperimentConfig) -> Result<MomentBundle> {
    run_moments_for(&cfg.model.build()?, cfg)
}

/// As [`run_moments`] with a caller-supplied model in place of `[model]`.
pub fn run_moments_for(model: &ModelSpec, cfg: &ExperimentConfig) -> Result<MomentBundle> {
    let schemes = prepare(model, cfg)?;
    let h = cfg.h_list[0];
    let steps = (cfg.horizon / h).round() as usize;
    let orders = cfg.moment_orders.clone();
    let watch = orders.iter().position(|&k| k == 2).unwrap_or(0);
    let cells: Vec<(usize, usize)> =
        (0..schemes.len()).flat_map(|s| (0..cfg.repetitions).map(move |r| (s, r))).collect();
    let entries = cells
        .par_iter()
        .map(|&(s, rep)| {
            let seed = rep_seed(cfg.seed, rep);
            let grid = PathGrid::generate(seed, steps, cfg.horizon, cfg.particles, model.noise_dim())?;
            let init = initial_ensemble(model, seed, cfg.particles);
            let mut rows = Vec::new();
            simulate_observed(init, model, &schemes[s], &grid, &Recording::default(), &mut |ens| {
                if ens.step_index() % cfg.moment_stride == 0 || ens.step_index() == steps || ens.is_diverged() {
                    rows.push((ens.time(), orders.iter().map(|&k| norm_moment(ens, k)).collect::<Vec<f64>>()));
                }
            })?;
            let mut sup = vec![0.0f64; orders.len()];
            let mut first_non_finite = None;
            for (t, m) in &rows {
                for (a, v) in sup.iter_mut().zip(m) {
                    if v.is_finite() {
                        *a = a.max(*v);
                    } else if first_non_finite.is_none() {
                        first_non_finite = Some(*t);
                    }
                }
            }
            let exceeded_ceiling = first_non_finite.is_some() || sup[watch] > cfg.moment_ceiling;
            Ok(MomentEntry { scheme: schemes[s].label(), seed, orders: orders.clone(), rows, sup, first_non_finite, exceeded_ceiling })
        })
        .collect::<Result<_>>()?;
    Ok(MomentBundle { entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NRow {
    pub n: usize,
    pub mean_w2: f64,
    /// Sample standard deviation over repetitions divided by `√R`; NaN for `R = 1`.
    pub std_err: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NScalingReport {
    pub scheme: String,
    pub proxy_n: usize,
    pub rows: Vec<NRow>,
    /// Least squares on `(log2 N, log2 mean_w2)`.
    pub fit: Option<LineFit>,
}

/// Particle-count study: W2 at `T` between each N-particle run and a large-N
/// proxy, averaged over repetitions, for the first configured scheme at the
/// first coarse step. Repetition `r` uses seed `seed + r`; the proxy uses
/// `proxy_seed` (default `seed + 2^32`).
pub fn run_nscaling(cfg: &ExperimentConfig) -> Result<NScalingReport> {
    run_nscaling_for(&cfg.model.build()?, cfg)
}

/// As [`run_nscaling`] with a caller-supplied model in place of `[model]`.
pub fn run_nscaling_for(model: &ModelSpec, cfg: &ExperimentConfig) -> Result<NScalingReport> {
    let schemes = prepare(model, cfg)?;
    if model.dim() != 1 {
        return Err(Error::DimensionMismatch("N-scaling study needs d = 1".into()));
    }
    let scheme = schemes[0];
    let h = cfg.h_list[0];
    let steps = (cfg.horizon / h).round() as usize;
    let terminal = |seed: u64, n: usize| -> Result<Vec<f64>> {
        let grid = PathGrid::generate(seed, steps, cfg.horizon, n, model.noise_dim())?;
        let init = initial_ensemble(model, seed, n);
        let traj = simulate_from(init, model, &scheme, &grid, &Recording::default())?;
        Ok(if traj.divergence.is_some() { vec![f64::NAN] } else { traj.final_state.states().to_vec() })
    };
    let proxy_seed = cfg.proxy_seed.unwrap_or(cfg.seed.wrapping_add(1 << 32));
    let proxy = terminal(proxy_seed, cfg.proxy_n)?;
    let cells: Vec<(usize, usize)> =
        (0..cfg.n_list.len()).flat_map(|i| (0..cfg.repetitions).map(move |r| (i, r))).collect();
    let errors: Vec<f64> = cells
        .par_iter()
        .map(|&(i, r)| {
            let x = terminal(rep_seed(cfg.seed, r), cfg.n_list[i])?;
            if x.iter().any(|v| !v.is_finite()) || proxy.iter().any(|v| !v.is_finite()) {
                return Ok(f64::NAN);
            }
            w2_1d(&x, &proxy)
        })
        .collect::<Result<_>>()?;
    let reps = cfg.repetitions;
    let rows: Vec<NRow> = cfg
        .n_list
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let e = &errors[i * reps..(i + 1) * reps];
            let mean = e.iter().sum::<f64>() / reps as f64;
            let std_err = if reps > 1 {
                (e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt() / (reps as f64).sqrt()
            } else {
                f64::NAN
            };
            NRow { n, mean_w2: mean, std_err, reps }
        })
        .collect();
    let usable: Vec<&NRow> = rows.iter().filter(|r| r.mean_w2.is_finite() && r.mean_w2 > 0.0).collect();
    let fit = if usable.len() >= 3 {
        let xs: Vec<f64> = usable.iter().map(|r| (r.n as f64).log2()).collect();
        let ys: Vec<f64> = usable.iter().map(|r| r.mean_w2.log2()).collect();
        fit_line(&xs, &ys).ok()
    } else {
        None
    };
    Ok(NScalingReport { scheme: scheme.label(), proxy_n: cfg.proxy_n, rows, fit })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckBundle {
    pub reports: Vec<AssumptionReport>,
    pub theory: Vec<TheoryConstants>,
    pub equilibria: Option<EquilibriaComparison>,
}

/// Default `p̄` used when echoing `p_max` for the theory constants.
pub const DEFAULT_P_BAR: f64 = 100.0;

/// Assumption suite for the configured operators and model.
pub fn run_check(cfg: &ExperimentConfig) -> Result<CheckBundle> {
    run_check_for(&cfg.model.build()?, cfg)
}

/// As [`run_check`] with a caller-supplied model in place of `[model]`.
pub fn run_check_for(model: &ModelSpec, cfg: &ExperimentConfig) -> Result<CheckBundle> {
    let schemes = prepare(model, cfg)?;
    let spec = SampleSpec::default();
    let base = CheckConstants { rho: model.rho(), ..CheckConstants::default() };
    let mut ops = Vec::new();
    for s in schemes.iter().filter(|s| s.method == crate::stepper::Method::ModifiedEuler) {
        for op in [s.t1, s.t2] {
            if !ops.contains(&op) {
                ops.push(op);
            }
        }
    }
    let mut jobs: Vec<Box<dyn Fn() -> AssumptionReport + Send + Sync>> = Vec::new();
    for op in ops {
        let (r1, r2) = op.declared_h2().unwrap_or((base.r1, base.r2));
        let h3 = op.declared_h3().map(|e| (e.r1, e.r2, e.r3)).unwrap_or((base.r1, base.r2, base.r3));
        let spec1 = spec.clone();
        jobs.push(Box::new(move || check_taming(&op, AssumptionId::H1, &base, &spec1)));
        let spec2 = spec.clone();
        jobs.push(Box::new(move || check_taming(&op, AssumptionId::H2, &CheckConstants { r1, r2, ..base }, &spec2)));
        let spec3 = spec.clone();
        jobs.push(Box::new(move || {
            check_taming(&op, AssumptionId::H3, &CheckConstants { r1: h3.0, r2: h3.1, r3: h3.2, ..base }, &spec3)
        }));
        if let TamingKind::FullyTamed { .. } = op.kind() {
            let (spec4, m) = (spec.clone(), model.clone());
            jobs.push(Box::new(move || {
                (0..=10)
                    .map(|e| check_fte_bound(&op, &m, &base.with_l(2f64.powi(e)), &spec4))
                    .find(|r| r.passed())
                    .unwrap_or_else(|| check_fte_bound(&op, &m, &base.with_l(1024.0), &spec4))
            }));
        }
    }
    for a in [AssumptionId::A2, AssumptionId::A3, AssumptionId::A5, AssumptionId::A6] {
        let (spec5, m) = (spec.clone(), model.clone());
        jobs.push(Box::new(move || {
            sweep_model_constant(&m, a, &base, &spec5).unwrap_or_else(|| check_model(&m, a, &base.with_l(1024.0), &spec5))
        }));
    }
    let reports: Vec<AssumptionReport> = jobs.par_iter().map(|j| j()).collect();
    let theory = [(model.rho(), 1.0, 3.0), (model.rho(), 0.5, 2.0)]
        .into_iter()
        .map(|(rho, r1, r2)| TheoryConstants::new(rho, r1, r2, DEFAULT_P_BAR))
        .collect::<Result<_>>()?;
    let equilibria = (model.name() == "doublewell")
        .then(|| compare_equilibria(&doublewell_equilibria_oracle(), &[-2.0, 0.0, 2.0], 1e-3));
    Ok(CheckBundle { reports, theory, equilibria })
}

/// One output document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFile {
    pub name: String,
    pub contents: String,
}

fn csv_file(name: String, table: &Table) -> OutputFile {
    OutputFile { name, contents: table.to_csv() }
}

pub fn convergence_files(report: &ConvergenceReport, cfg: &ExperimentConfig) -> Result<Vec<OutputFile>> {
    let mut out = Vec::new();
    if cfg.formats.csv {
        let mut summary = Table::new(["scheme", "slope", "intercept", "r2"]);
        for s in &report.schemes {
            let mut t = Table::new(["h", "rmse", "log2_h", "log2_rmse"]);
            for r in &s.rows {
                t.push(vec![r.h.into(), r.rmse.into(), r.log2_h.into(), r.log2_rmse.into()]);
            }
            out.push(csv_file(format!("converge_{}_{}.csv", report.model, s.scheme), &t));
            let (slope, intercept, r2) = s.fit.map_or((f64::NAN, f64::NAN, f64::NAN), |f| (f.slope, f.intercept, f.r2));
            summary.push(vec![s.scheme.clone().into(), slope.into(), intercept.into(), r2.into()]);
        }
        out.push(csv_file("converge_summary.csv".into(), &summary));
    }
    if cfg.formats.svg {
        let mut plot = Plot {
            title: format!("strong error, {}", report.model),
            x_label: "log2 h".into(),
            y_label: "log2 RMSE".into(),
            series: Vec::new(),
            fits: Vec::new(),
            fingerprint: cfg.fingerprint(),
        };
        for (i, s) in report.schemes.iter().enumerate() {
            plot.series.push(Series {
                name: s.scheme.clone(),
                points: s.rows.iter().map(|r| (r.log2_h, r.log2_rmse)).collect(),
                style: SeriesStyle::Markers,
            });
            if let Some(fit) = s.fit {
                let xs: Vec<f64> = s.rows.iter().map(|r| r.log2_h).collect();
                let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                plot.fits.push(FitOverlay { fit, x_range: (lo, hi), series: i });
            }
        }
        if let Ok(svg) = plot.render() {
            out.push(OutputFile { name: format!("converge_{}.svg", report.model), contents: svg });
        }
    }
    Ok(out)
}

pub fn density_files(bundle: &DensityBundle, cfg: &ExperimentConfig) -> Result<Vec<OutputFile>> {
    let mut out = Vec::new();
    if cfg.formats.csv {
        for e in &bundle.curves {
            if let Some(c) = &e.curve {
                let mut t = Table::new(["x", "density"]);
                for (x, v) in c.grid.iter().zip(&c.values) {
                    t.push(vec![(*x).into(), (*v).into()]);
                }
                out.push(csv_file(format!("density_{}_T{}.csv", e.scheme, fmt_num(e.t)), &t));
            }
        }
        let mut meta = Table::new(["scheme", "t", "bandwidth", "n_source", "degenerate", "estimator"]);
        for e in &bundle.curves {
            match &e.curve {
                Some(c) => meta.push(vec![
                    e.scheme.clone().into(),
                    e.t.into(),
                    c.bandwidth.into(),
                    c.n_source.into(),
                    c.degenerate.into(),
                    "gaussian-kde-silverman".into(),
                ]),
                None => meta.push(vec![e.scheme.clone().into(), e.t.into(), f64::NAN.into(), 0usize.into(), false.into(), "diverged".into()]),
            }
        }
        out.push(csv_file("density_summary.csv".into(), &meta));
    }
    if cfg.formats.svg {
        for run in &bundle.runs {
            let series: Vec<Series> = bundle
                .curves
                .iter()
                .filter(|e| e.scheme == run.scheme)
                .filter_map(|e| {
                    e.curve.as_ref().map(|c| Series {
                        name: format!("t = {}", fmt_num(e.t)),
                        points: c.grid.iter().copied().zip(c.values.iter().copied()).collect(),
                        style: SeriesStyle::Line,
                    })
                })
                .collect();
            let plot = Plot {
                title: format!("density, {}", run.scheme),
                x_label: "x".into(),
                y_label: "density".into(),
                series,
                fits: vec![],
                fingerprint: cfg.fingerprint(),
            };
            if let Ok(svg) = plot.render() {
                out.push(OutputFile { name: format!("density_{}.svg", run.scheme), contents: svg });
            }
        }
    }
    Ok(out)
}

fn paths_name(e: &PathEntry, several: bool, ext: &str) -> String {
    if several {
        format!("paths_{}_h{}.{ext}", e.scheme, fmt_num(e.h))
    } else {
        format!("paths_{}.{ext}", e.scheme)
    }
}

pub fn paths_files(bundle: &PathBundle, cfg: &ExperimentConfig) -> Result<Vec<OutputFile>> {
    let several = cfg.h_list.len() > 1;
    let mut out = Vec::new();
    if cfg.formats.csv {
        let mut summary = Table::new(["scheme", "h", "max_abs", "all_finite", "first_non_finite", "ensemble_max_abs", "ensemble_divergence_time"]);
        for e in &bundle.entries {
            let mut header = vec!["t".to_string()];
            header.extend(e.table.column_names());
            let mut t = Table::new(header);
            for (time, row) in e.table.times.iter().zip(&e.table.rows) {
                let mut cells: Vec<Cell> = vec![(*time).into()];
                cells.extend(row.iter().map(|v| Cell::Real(*v)));
                t.push(cells);
            }
            out.push(csv_file(paths_name(e, several, "csv"), &t));
            let s = &e.summary;
            summary.push(vec![
                e.scheme.clone().into(),
                e.h.into(),
                s.max_abs.into(),
                s.all_finite().into(),
                s.first_non_finite.unwrap_or(f64::NAN).into(),
                s.ensemble_max_abs.into(),
                s.ensemble_divergence_time.unwrap_or(f64::NAN).into(),
            ]);
        }
        out.push(csv_file("paths_summary.csv".into(), &summary));
    }
    if cfg.formats.svg {
        for e in &bundle.entries {
            let series = e
                .table
                .ids
                .iter()
                .enumerate()
                .map(|(j, id)| Series {
                    name: format!("p{id}"),
                    points: e.table.times.iter().zip(&e.table.rows).map(|(t, r)| (*t, r[j])).collect(),
                    style: SeriesStyle::Line,
                })
                .collect();
            let plot = Plot {
                title: format!("paths, {} at h = {}", e.scheme, fmt_num(e.h)),
                x_label: "t".into(),
                y_label: "X".into(),
                series,
                fits: vec![],
                fingerprint: cfg.fingerprint(),
            };
            if let Ok(svg) = plot.render() {
                out.push(OutputFile { name: paths_name(e, several, "svg"), contents: svg });
            }
        }
    }
    Ok(out)
}

pub fn moments_files(bundle: &MomentBundle, cfg: &ExperimentConfig) -> Result<Vec<OutputFile>> {
    let mut out = Vec::new();
    let first_seed = rep_seed(cfg.seed, 0);
    if cfg.formats.csv {
        let mut summary = Table::new(["scheme", "seed", "order", "sup", "first_non_finite", "exceeded_ceiling"]);
        for e in &bundle.entries {
            if e.seed == first_seed {
                let mut header = vec!["t".to_string()];
                header.extend(e.orders.iter().map(|k| format!("m{k}")));
                let mut t = Table::new(header);
                for (time, m) in &e.rows {
                    let mut cells: Vec<Cell> = vec![(*time).into()];
                    cells.extend(m.iter().map(|v| Cell::Real(*v)));
                    t.push(cells);
                }
                out.push(csv_file(format!("moments_{}.csv", e.scheme), &t));
            }
            for (k, s) in e.orders.iter().zip(&e.sup) {
                summary.push(vec![
                    e.scheme.clone().into(),
                    Cell::Int(e.seed),
                    (*k).into(),
                    (*s).into(),
                    e.first_non_finite.unwrap_or(f64::NAN).into(),
                    e.exceeded_ceiling.into(),
                ]);
            }
        }
        out.push(csv_file("moments_summary.csv".into(), &summary));
    }
    if cfg.formats.svg {
        for e in bundle.entries.iter().filter(|e| e.seed == first_seed) {
            let series = e
                .orders
                .iter()
                .enumerate()
                .map(|(j, k)| Series {
                    name: format!("log10 m{k}"),
                    points: e.rows.iter().map(|(t, m)| (*t, m[j].log10())).collect(),
                    style: SeriesStyle::Line,
                })
                .collect();
            let plot = Plot {
                title: format!("moments, {}", e.scheme),
                x_label: "t".into(),
                y_label: "log10 moment".into(),
                series,
                fits: vec![],
                fingerprint: cfg.fingerprint(),
            };
            if let Ok(svg) = plot.render() {
                out.push(OutputFile { name: format!("moments_{}.svg", e.scheme), contents: svg });
            }
        }
    }
    Ok(out)
}

pub fn nscaling_files(report: &NScalingReport, cfg: &ExperimentConfig) -> Result<Vec<OutputFile>> {
    let mut out = Vec::new();
    if cfg.formats.csv {
        let mut t = Table::new(["N", "mean_w2", "std_err", "reps", "log2_N", "log2_w2"]);
        for r in &report.rows {
            t.push(vec![r.n.into(), r.mean_w2.into(), r.std_err.into(), r.reps.into(), (r.n as f64).log2().into(), r.mean_w2.log2().into()]);
        }
        out.push(csv_file("nscaling.csv".into(), &t));
        let mut s = Table::new(["scheme", "proxy_n", "slope", "intercept", "r2"]);
        let (slope, intercept, r2) = report.fit.map_or((f64::NAN, f64::NAN, f64::NAN), |f| (f.slope, f.intercept, f.r2));
        s.push(vec![report.scheme.clone().into(), report.proxy_n.into(), slope.into(), intercept.into(), r2.into()]);
        out.push(csv_file("nscaling_summary.csv".into(), &s));
    }
    if cfg.formats.svg {
        let xs: Vec<f64> = report.rows.iter().map(|r| (r.n as f64).log2()).collect();
        let plot = Plot {
            title: format!("W2 to proxy (N = {}), {}", report.proxy_n, report.scheme),
            x_label: "log2 N".into(),
            y_label: "log2 mean W2".into(),
            series: vec![Series {
                name: report.scheme.clone(),
                points: report.rows.iter().map(|r| ((r.n as f64).log2(), r.mean_w2.log2())).collect(),
                style: SeriesStyle::Markers,
            }],
            fits: report
                .fit
                .map(|fit| FitOverlay {
                    fit,
                    x_range: (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                    series: 0,
                })
                .into_iter()
                .collect(),
            fingerprint: cfg.fingerprint(),
        };
        if let Ok(svg) = plot.render() {
            out.push(OutputFile { name: "nscaling.svg".into(), contents: svg });
        }
    }
    Ok(out)
}

pub fn check_files(bundle: &CheckBundle) -> Vec<OutputFile> {
    let mut t = Table::new(["subject", "assumption", "pass", "max_violation", "witness"]);
    for r in &bundle.reports {
        let mut witness = format!("{};{}", r.witness, r.constants);
        if let Some(c) = &r.caveat {
            witness.push_str(&format!(";caveat={c}"));
        }
        t.push(vec![r.subject.clone().into(), r.assumption.as_str().into(), r.passed().into(), r.max_violation.into(), witness.into()]);
    }
    if let Some(eq) = &bundle.equilibria {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        t.push(vec![
            "doublewell".into(),
            "EQUILIBRIA".into(),
            eq.matches().into(),
            ((eq.missing.len() + eq.extra.len()) as f64).into(),
            format!("found={};claimed={};missing={};extra={}", list(&eq.found), list(&eq.claimed), list(&eq.missing), list(&eq.extra)).into(),
        ]);
    }
    let mut g = Table::new(["rho", "r1", "r2", "G", "p_bar", "p_max"]);
    for c in &bundle.theory {
        g.push(vec![c.rho.into(), c.r1.into(), c.r2.into(), c.g.into(), DEFAULT_P_BAR.into(), c.p_max_lemma.into()]);
    }
    vec![csv_file("check_report.csv".into(), &t), csv_file("theory_constants.csv".into(), &g)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            particles: 20,
            h_ref: 2f64.powi(-8),
            h_list: vec![2f64.powi(-4), 2f64.powi(-5), 2f64.powi(-6)],
            formats: super::super::config::Formats { csv: true, svg: true },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn self_comparison_is_zero() {
        let cfg = ExperimentConfig { h_list: vec![2f64.powi(-8)], schemes: vec!["me".into(), "te1".into(), "ssm".into()], ..base() };
        let r = run_convergence(&cfg).unwrap();
        for s in &r.schemes {
            assert_eq!(s.rows[0].rmse, 0.0, "{}", s.scheme);
            assert!(s.fit.is_none());
            assert_eq!(s.excluded, 1);
        }
    }

    #[test]
    fn convergence_rows_descend_and_are_deterministic() {
        let cfg = ExperimentConfig { h_list: vec![2f64.powi(-6), 2f64.powi(-4), 2f64.powi(-5)], ..base() };
        let a = run_convergence(&cfg).unwrap();
        assert!(a.schemes[0].rows.windows(2).all(|w| w[0].h > w[1].h));
        assert!(a.schemes[0].fit.is_some());
        assert_eq!(a, run_convergence(&cfg).unwrap());
        let files = convergence_files(&a, &cfg).unwrap();
        let names: Vec<&str> = files.iter().map(|f| f.name.as_str()).collect();
        assert_eq!(names, vec!["converge_cubic_me.csv", "converge_summary.csv", "converge_cubic.svg"]);
        assert!(files[0].contents.starts_with("h,rmse,log2_h,log2_rmse\n"));
    }

    #[test]
    fn nscaling_with_proxy_equal_is_zero() {
        let cfg = ExperimentConfig {
            n_list: vec![40],
            proxy_n: 40,
            proxy_seed: Some(1),
            seed: 1,
            repetitions: 1,
            h_ref: 2f64.powi(-6),
            h_list: vec![2f64.powi(-6)],
            ..base()
        };
        let r = run_nscaling(&cfg).unwrap();
        assert_eq!(r.rows[0].mean_w2, 0.0);
    }

    #[test]
    fn deterministic_model_density_peaks_at_start() {
        let cfg = ExperimentConfig {
            model: super::super::config::ModelChoice { name: "doublewell".into(), mu0: 0.75, sigma0sq: 0.0 },
            record_times: vec![0.5],
            h_list: vec![2f64.powi(-4)],
            ..base()
        };
        // zero initial variance is a point mass
        let model = cfg.model.build().unwrap();
        let ens = initial_ensemble(&model, 3, 10);
        let c = kde(&ens, &KdeGrid::Auto, None).unwrap();
        assert!(c.degenerate);
        assert!((c.argmax() - 0.75).abs() < 1e-3);
        let bundle = run_density(&cfg).unwrap();
        assert_eq!(bundle.curves.len(), 1);
    }

    #[test]
    fn moments_of_still_model_are_constant() {
        let cfg = ExperimentConfig {
            model: super::super::config::ModelChoice { name: "doublewell".into(), mu0: 0.0, sigma0sq: 0.0 },
            h_list: vec![2f64.powi(-4)],
            ..base()
        };
        let b = run_moments(&cfg).unwrap();
        for (_, m) in &b.entries[0].rows {
            assert_eq!(m, &vec![0.0, 0.0]);
        }
        assert_eq!(b.entries[0].rows.len(), 17);
    }

    #[test]
    fn paths_table_shape() {
        let cfg = ExperimentConfig { path_stride: 4, trace_particles: vec![0, 3], h_list: vec![2f64.powi(-4)], ..base() };
        let b = run_paths(&cfg).unwrap();
        let e = &b.entries[0];
        assert_eq!(e.table.rows.len(), 16 / 4 + 1);
        assert_eq!(e.table.column_names(), vec!["p0", "p3"]);
        assert!(e.summary.all_finite());
        let files = paths_files(&b, &cfg).unwrap();
        assert!(files[0].contents.starts_with("t,p0,p3\n"));
    }
}
