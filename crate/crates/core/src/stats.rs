//! Reductions over ensembles: errors, Wasserstein distances, moments,
//! density estimates and path tables.
//!
//! Every sum runs in ascending particle order.

use crate::error::{invalid, Error, Result};
use crate::stepper::{Ensemble, Trajectory};

fn same_shape(a: &Ensemble, b: &Ensemble) -> Result<()> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "ensembles of shape {}x{} and {}x{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    Ok(())
}

/// Root-mean-square gap between index-paired particles, `sqrt((1/N) Σ_i |a_i − b_i|²)`.
/// Also the coupled upper bound on `W2` between the two empirical measures.
pub fn rmse(a: &Ensemble, b: &Ensemble) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::EmptyData);
    }
    let sum: f64 = a.states().iter().zip(b.states()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// `(1/N) Σ_i |x_i|²`, the squared W2 distance to the Dirac mass at the origin.
pub fn w2sq_dirac0(ens: &Ensemble) -> f64 {
    if ens.is_empty() {
        return 0.0;
    }
    ens.states().iter().map(|x| x * x).sum::<f64>() / ens.len() as f64
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Exact W2 between two equal-size one-dimensional empirical measures (sorted pairing).
pub fn w2_1d_exact(a: &Ensemble, b: &Ensemble) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::DimensionMismatch("exact W2 is one-dimensional only".into()));
    }
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(Error::EmptyData);
    }
    let (xa, xb) = (sorted(a.states()), sorted(b.states()));
    let sum: f64 = xa.iter().zip(&xb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Exact W2 between one-dimensional empirical measures of any sizes.
///
/// Integrates `(F_a^{-1}(u) − F_b^{-1}(u))²` over `u ∈ (0, 1)`; both quantile
/// functions are step functions, so the integral is a finite sum over the
/// merged breakpoints `i/n` and `j/m`.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyData);
    }
    let (xa, xb) = (sorted(a), sorted(b));
    let (n, m) = (xa.len() as u128, xb.len() as u128);
    // breakpoints compared as integers: i/n < j/m  <=>  i*m < j*n
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0f64;
    let mut sum = 0.0;
    while i < xa.len() && j < xb.len() {
        let (ni, nj) = ((i as u128 + 1) * m, (j as u128 + 1) * n);
        let end = if ni <= nj { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        let gap = xa[i] - xb[j];
        sum += gap * gap * (end - prev);
        prev = end;
        if ni <= nj {
            i += 1;
        }
        if nj <= ni {
            j += 1;
        }
    }
    Ok(sum.max(0.0).sqrt())
}

/// Per-coordinate raw moments `(1/N) Σ_i (x_i^c)^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTable {
    pub orders: Vec<usize>,
    /// `values[j][c]` is the order `orders[j]` moment of coordinate `c`.
    pub values: Vec<Vec<f64>>,
}

pub fn raw_moments(ens: &Ensemble, orders: &[usize]) -> Result<MomentTable> {
    if orders.is_empty() || orders.contains(&0) {
        return Err(invalid("moment orders must be a nonempty list of positive integers"));
    }
    if ens.is_empty() {
        return Err(Error::EmptyData);
    }
    let d = ens.dim();
    let n = ens.len() as f64;
    let values = orders
        .iter()
        .map(|&k| {
            let mut acc = vec![0.0; d];
            for row in ens.states().chunks_exact(d) {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a += x.powi(k as i32);
                }
            }
            acc.into_iter().map(|s| s / n).collect()
        })
        .collect();
    Ok(MomentTable { orders: orders.to_vec(), values })
}

/// `(1/N) Σ_i |x_i|^k` with the Euclidean norm; equals the raw moment for even `k` when `d = 1`.
pub fn norm_moment(ens: &Ensemble, k: usize) -> f64 {
    if ens.is_empty() {
        return 0.0;
    }
    let d = ens.dim();
    let mut acc = 0.0;
    for row in ens.states().chunks_exact(d) {
        let r2: f64 = row.iter().map(|x| x * x).sum();
        acc += if k.is_multiple_of(2) { r2.powi(k as i32 / 2) } else { r2.sqrt().powi(k as i32) };
    }
    acc / ens.len() as f64
}

/// Gaussian kernel density estimate on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    /// Finite particles that contributed.
    pub n_source: usize,
    /// Set when the sample had zero spread and the bandwidth fell back to [`BANDWIDTH_FLOOR`].
    pub degenerate: bool,
}

impl DensityCurve {
    /// Trapezoid rule over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Grid point of the largest value (first on ties).
    pub fn argmax(&self) -> f64 {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        self.grid[best]
    }
}

pub const BANDWIDTH_FLOOR: f64 = 1e-3;
pub const DEFAULT_KDE_POINTS: usize = 512;

/// Evaluation grid for [`kde`].
#[derive(Debug, Clone, PartialEq, Default)]
pub enum KdeGrid {
    /// 512 points from `min − 4 bw` to `max + 4 bw`.
    #[default]
    Auto,
    Span { lo: f64, hi: f64, points: usize },
    Points(Vec<f64>),
}

/// Gaussian KDE of a one-dimensional ensemble. The default bandwidth is
/// Silverman's rule `1.06 σ̂ N^{-1/5}`. Non-finite particles are skipped.
pub fn kde(ens: &Ensemble, grid: &KdeGrid, bandwidth: Option<f64>) -> Result<DensityCurve> {
    if ens.dim() != 1 {
        return Err(Error::DimensionMismatch("density estimates need d = 1".into()));
    }
    kde_values(ens.states(), grid, bandwidth)
}

pub fn kde_values(values: &[f64], grid: &KdeGrid, bandwidth: Option<f64>) -> Result<DensityCurve> {
    let xs: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if xs.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = xs.len() as f64;
    let mut degenerate = false;
    let bw = match bandwidth {
        Some(b) if b > 0.0 && b.is_finite() => b,
        Some(b) => return Err(invalid(format!("bandwidth must be positive, got {b}"))),
        None => {
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let b = 1.06 * var.sqrt() * n.powf(-0.2);
            if b < BANDWIDTH_FLOOR {
                degenerate = var == 0.0;
                BANDWIDTH_FLOOR
            } else {
                b
            }
        }
    };
    let points = match grid {
        KdeGrid::Auto => {
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * bw;
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bw;
            linspace(lo, hi, DEFAULT_KDE_POINTS)
        }
        KdeGrid::Span { lo, hi, points } => {
            if !(lo < hi) || *points < 2 {
                return Err(invalid("kde span needs lo < hi and at least 2 points"));
            }
            linspace(*lo, *hi, *points)
        }
        KdeGrid::Points(p) => {
            if p.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(invalid("kde grid must be strictly ascending"));
            }
            p.clone()
        }
    };
    let norm = 1.0 / (n * bw * (2.0 * std::f64::consts::PI).sqrt());
    let density = points
        .iter()
        .map(|&g| {
            let s: f64 = xs.iter().map(|&x| (-0.5 * ((g - x) / bw).powi(2)).exp()).sum();
            s * norm
        })
        .collect();
    Ok(DensityCurve { grid: points, values: density, bandwidth: bw, n_source: xs.len(), degenerate })
}

pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| if i + 1 == points { hi } else { lo + step * i as f64 }).collect()
}

/// Values of selected particles at strided grid steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PathTable {
    pub times: Vec<f64>,
    pub ids: Vec<usize>,
    pub dim: usize,
    /// `rows[k]` holds `dim` values per id, ids in the order given.
    pub rows: Vec<Vec<f64>>,
}

impl PathTable {
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.ids.len() * self.dim);
        for id in &self.ids {
            if self.dim == 1 {
                names.push(format!("p{id}"));
            } else {
                names.extend((0..self.dim).map(|c| format!("p{id}_{c}")));
            }
        }
        names
    }

    /// Largest finite `|value|` in the table.
    pub fn max_abs(&self) -> f64 {
        self.rows.iter().flatten().filter(|v| v.is_finite()).fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// Time of the first row with a non-finite value.
    pub fn first_non_finite(&self) -> Option<f64> {
        self.rows.iter().zip(&self.times).find(|(r, _)| r.iter().any(|v| !v.is_finite())).map(|(_, &t)| t)
    }
}

/// Rows `(t_k, X_k^{id})` for `k = 0, stride, 2 stride, … ≤ n`. Steps after a
/// divergence stopped the simulation are filled with NaN.
pub fn path_trace(traj: &Trajectory, ids: &[usize], stride: usize) -> Result<PathTable> {
    if stride == 0 {
        return Err(invalid("stride must be positive"));
    }
    let hist = traj.history.as_ref().ok_or(Error::MissingHistory)?;
    let n = traj.final_state.len();
    let d = traj.final_state.dim();
    if let Some(&id) = ids.iter().find(|&&id| id >= n) {
        return Err(Error::ParticleOutOfRange { id, n });
    }
    let mut times = Vec::new();
    let mut rows = Vec::new();
    if ids.is_empty() {
        return Ok(PathTable { times, ids: vec![], dim: d, rows });
    }
    for k in (0..=traj.steps).step_by(stride) {
        times.push(k as f64 * traj.step_size);
        let row = match hist.states.get(k) {
            Some(s) => ids.iter().flat_map(|&id| s[id * d..(id + 1) * d].iter().copied()).collect(),
            None => vec![f64::NAN; ids.len() * d],
        };
        rows.push(row);
    }
    Ok(PathTable { times, ids: ids.to_vec(), dim: d, rows })
}

/// Ordinary least squares line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch("fit needs equally many x and y values".into()));
    }
    if xs.len() < 2 {
        return Err(Error::EmptyData);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("fit needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LineFit { slope, intercept, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::{NormalStream, PathGrid};
    use crate::model::ModelSpec;
    use crate::stepper::{simulate, Recording, SchemeConfig};
    use proptest::prelude::*;

    fn ens(v: &[f64]) -> Ensemble {
        Ensemble::from_values(v.to_vec())
    }

    /// Brute force over all N! pairings.
    fn w2_brute(a: &[f64], b: &[f64]) -> f64 {
        fn rec(a: &[f64], b: &mut Vec<f64>, k: usize, best: &mut f64) {
            if k == a.len() {
                let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                *best = best.min(s);
                return;
            }
            for j in k..b.len() {
                b.swap(k, j);
                rec(a, b, k + 1, best);
                b.swap(k, j);
            }
        }
        let mut best = f64::INFINITY;
        rec(a, &mut b.to_vec(), 0, &mut best);
        (best / a.len() as f64).sqrt()
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&ens(&[1.0, 2.0]), &ens(&[1.0, 2.0])).unwrap(), 0.0);
        let r = rmse(&ens(&[0.0, 0.0]), &ens(&[3.0, 4.0])).unwrap();
        assert_eq!(r, 12.5f64.sqrt());
        assert_eq!(r, rmse(&ens(&[3.0, 4.0]), &ens(&[0.0, 0.0])).unwrap());
        assert!(matches!(rmse(&ens(&[0.0]), &ens(&[0.0, 1.0])), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn w2_dirac_examples() {
        assert_eq!(w2sq_dirac0(&ens(&[0.0, 0.0])), 0.0);
        assert_eq!(w2sq_dirac0(&ens(&[1.0, -1.0])), 1.0);
        let e = ens(&[0.3, -1.7, 2.5]);
        let zero = ens(&[0.0; 3]);
        assert!((w2sq_dirac0(&e) - rmse(&e, &zero).unwrap().powi(2)).abs() < 1e-15);
    }

    #[test]
    fn w2_dirac_matches_summed_second_moments() {
        let mut s = NormalStream::for_initial(5, 0);
        for _ in 0..100 {
            let d = 3;
            let v: Vec<f64> = (0..d * 7).map(|_| s.next_normal() * 4.0).collect();
            let e = Ensemble::new(v, d, 0.0, 0, 2).unwrap();
            let m = raw_moments(&e, &[2]).unwrap();
            let total: f64 = m.values[0].iter().sum();
            let w = w2sq_dirac0(&e);
            assert!((w - total).abs() <= 1e-12 * w.max(1.0));
            assert!((w - e.view().w2sq_to_dirac0()).abs() <= 1e-12 * w.max(1.0));
        }
    }

    #[test]
    fn exact_w2_examples() {
        assert_eq!(w2_1d_exact(&ens(&[3.0, 1.0, 2.0]), &ens(&[2.0, 3.0, 1.0])).unwrap(), 0.0);
        assert_eq!(w2_1d_exact(&ens(&[0.0, 1.0]), &ens(&[1.0, 2.0])).unwrap(), 1.0);
        assert_eq!(w2_brute(&[0.0, 1.0], &[2.0, 1.0]), 1.0);
        let two_d = Ensemble::new(vec![0.0, 1.0], 2, 0.0, 0, 2).unwrap();
        assert!(w2_1d_exact(&two_d, &two_d).is_err());
    }

    #[test]
    fn exact_w2_matches_brute_force_and_coupled_bound() {
        let mut s = NormalStream::for_initial(11, 3);
        for trial in 0..100 {
            let n = 1 + trial % 6;
            let a: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
            let b: Vec<f64> = (0..n).map(|_| 2.0 * s.next_normal() + 0.5).collect();
            let exact = w2_1d_exact(&ens(&a), &ens(&b)).unwrap();
            assert!((exact - w2_brute(&a, &b)).abs() < 1e-12);
            assert!(exact <= rmse(&ens(&a), &ens(&b)).unwrap() + 1e-15);
            assert!((w2_1d(&a, &b).unwrap() - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn unequal_size_w2() {
        // {0} vs {-1, 1}: each half of the mass moves distance 1
        assert!((w2_1d(&[0.0], &[-1.0, 1.0]).unwrap() - 1.0).abs() < 1e-15);
        // replicating every atom leaves the measure unchanged
        let a = [0.2, -1.0, 3.0];
        let a3: Vec<f64> = a.iter().flat_map(|&x| [x, x, x]).collect();
        assert!(w2_1d(&a, &a3).unwrap() < 1e-15);
        let b = [1.0, 0.0];
        let lhs = w2_1d(&a, &b).unwrap();
        // equals the equal-size formula after replication to a common size
        let a2: Vec<f64> = a.iter().flat_map(|&x| [x, x]).collect();
        let b3b: Vec<f64> = b.iter().flat_map(|&x| [x, x, x]).collect();
        assert!((lhs - w2_1d_exact(&ens(&a2), &ens(&b3b)).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn moment_examples() {
        assert_eq!(raw_moments(&ens(&[1.0, -1.0]), &[2]).unwrap().values[0][0], 1.0);
        let m = raw_moments(&ens(&[2.0]), &[1, 2, 3]).unwrap();
        assert_eq!(m.values, vec![vec![2.0], vec![4.0], vec![8.0]]);
        assert_eq!(raw_moments(&ens(&[0.0, 2.0]), &[3]).unwrap().values[0][0], 4.0);
        let e = ens(&[0.5, -2.0, 7.0]);
        assert_eq!(raw_moments(&e, &[1]).unwrap().values[0][0], e.view().mean()[0]);
        assert_eq!(norm_moment(&ens(&[-2.0]), 3), 8.0);
        assert!(raw_moments(&e, &[]).is_err());
    }

    #[test]
    fn kde_single_particle_is_symmetric() {
        let c = kde(&ens(&[0.0]), &KdeGrid::Span { lo: -5.0, hi: 5.0, points: 1001 }, Some(1.0)).unwrap();
        assert_eq!(c.argmax(), 0.0);
        for i in 0..c.values.len() {
            assert!((c.values[i] - c.values[c.values.len() - 1 - i]).abs() < 1e-12);
        }
        let auto = kde(&ens(&[0.0]), &KdeGrid::Auto, Some(1.0)).unwrap();
        assert!((auto.integral() - 1.0).abs() < 0.02);
    }

    #[test]
    fn kde_degenerate_sample_uses_floor() {
        let c = kde(&ens(&[1.5; 10]), &KdeGrid::Auto, None).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.bandwidth, BANDWIDTH_FLOOR);
        assert!((c.argmax() - 1.5).abs() < 1e-4);
        assert!((c.integral() - 1.0).abs() < 0.02);
    }

    #[test]
    fn kde_recovers_standard_normal() {
        let xs: Vec<f64> = (0..10_000).map(|i| NormalStream::for_initial(2024, i).next_normal()).collect();
        let c = kde(&ens(&xs), &KdeGrid::Auto, None).unwrap();
        assert!(!c.degenerate);
        assert!((c.integral() - 1.0).abs() < 0.02);
        let sup = c
            .grid
            .iter()
            .zip(&c.values)
            .map(|(x, v)| (v - (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()).abs())
            .fold(0.0, f64::max);
        assert!(sup < 0.02, "sup distance {sup}");
    }

    fn constant_traj(c: f64, n_steps: usize) -> Trajectory {
        let model = ModelSpec::builder("still", 1, 1).initial_dirac(vec![c]).build().unwrap();
        let grid = PathGrid::generate(3, n_steps, 1.0, 4, 1).unwrap();
        simulate(&model, &SchemeConfig::euler_maruyama(), &grid, &Recording { times: vec![], history: true }).unwrap()
    }

    #[test]
    fn path_trace_examples() {
        let traj = constant_traj(2.5, 12);
        let t = path_trace(&traj, &[0, 3], 12).unwrap();
        assert_eq!(t.times, vec![0.0, 1.0]);
        let t = path_trace(&traj, &[1], 5).unwrap();
        assert_eq!(t.rows.len(), 12 / 5 + 1);
        assert!(t.rows.iter().all(|r| r == &vec![2.5]));
        assert_eq!(t.column_names(), vec!["p1"]);
        assert!(path_trace(&traj, &[], 1).unwrap().rows.is_empty());
        assert!(matches!(path_trace(&traj, &[4], 1), Err(Error::ParticleOutOfRange { id: 4, n: 4 })));
    }

    #[test]
    fn fit_line_recovers_exact_line() {
        let xs = [-7.0, -8.0, -9.0, -10.0];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 1.25).collect();
        let f = fit_line(&xs, &ys).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-14 && (f.intercept - 1.25).abs() < 1e-13);
        assert!((f.r2 - 1.0).abs() < 1e-14);
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn exact_w2_never_exceeds_coupled_bound(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let exact = w2_1d_exact(&ens(&a), &ens(&b)).unwrap();
            let coupled = rmse(&ens(&a), &ens(&b)).unwrap();
            prop_assert!(exact * exact <= coupled * coupled * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn unequal_w2_is_symmetric(a in proptest::collection::vec(-50f64..50.0, 1..20), b in proptest::collection::vec(-50f64..50.0, 1..20)) {
            let ab = w2_1d(&a, &b).unwrap();
            let ba = w2_1d(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
        }
    }
}
