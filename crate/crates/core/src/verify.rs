//! Sampled refutation checks for the structural assumptions on taming
//! operators and model coefficients, plus the computable theory constants.
//!
//! A report passes when no sampled point violates the inequality. Violations
//! are `(lhs − rhs − tol) / (1 + rhs)`, where `tol` is a rounding allowance
//! proportional to the magnitudes that enter `lhs`.

use std::fmt;

use rayon::prelude::*;

use crate::brownian::NormalStream;
use crate::error::{invalid, Result};
use crate::model::{model_example_doublewell, EmpiricalMeasure, ModelSpec};
use crate::stats::w2_1d_exact;
use crate::stepper::Ensemble;
use crate::taming::{norm, TamingOperator};

/// Relative rounding allowance, in units of machine epsilon.
const ROUNDING_ULPS: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssumptionId {
    /// `|T1| ≤ min{L h^-2, |v|}` and `|T2| ≤ min{L h^-3/2, |v|}`.
    H1,
    /// `|T1(v) − v| ≤ L h^{r1} |v|^{r2}`.
    H2,
    /// H2 together with `|T2(v) − v| ≤ L h^{r3} |v|^{r2}`.
    H3,
    /// One-sided growth: `2⟨x, b⟩ + (2 p0 − 1)‖σ‖² ≤ L (1 + |x|² + W2²(μ, δ0))`.
    A2,
    /// One-sided Lipschitz: `2⟨x−y, b−b'⟩ + ‖σ−σ'‖² ≤ L (|x−y|² + W2²(μ, ν))`.
    A3,
    /// A3 with the diffusion term weighted by `2 p1 − 1`.
    A5,
    /// Polynomial Lipschitz: `|b − b'| ≤ L (1 + |x|^{2ρ} + |y|^{2ρ}) |x−y| + L W2(μ, ν)`.
    A6,
    /// Fully tamed bound: `|T1(b)| ≤ min{L h^-1/4 (1+|x|) + W2(μ, δ0), |b|}` and
    /// `|T2(σ_r)| ≤ min{L h^-1/8 (1+|x|) + W2(μ, δ0), |σ_r|}`.
    Ex35Bound,
}

impl AssumptionId {
    pub const ALL: [AssumptionId; 8] = [
        AssumptionId::H1,
        AssumptionId::H2,
        AssumptionId::H3,
        AssumptionId::A2,
        AssumptionId::A3,
        AssumptionId::A5,
        AssumptionId::A6,
        AssumptionId::Ex35Bound,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AssumptionId::H1 => "H1",
            AssumptionId::H2 => "H2",
            AssumptionId::H3 => "H3",
            AssumptionId::A2 => "A2",
            AssumptionId::A3 => "A3",
            AssumptionId::A5 => "A5",
            AssumptionId::A6 => "A6",
            AssumptionId::Ex35Bound => "EX35_BOUND",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
    }

    fn is_operator_check(&self) -> bool {
        matches!(self, AssumptionId::H1 | AssumptionId::H2 | AssumptionId::H3 | AssumptionId::Ex35Bound)
    }
}

impl fmt::Display for AssumptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Constants plugged into the inequalities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConstants {
    pub l: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub p0: f64,
    pub p1: f64,
    pub rho: f64,
}

impl Default for CheckConstants {
    fn default() -> Self {
        Self { l: 1.0, r1: 0.5, r2: 2.0, r3: 0.5, p0: 2.0, p1: 2.0, rho: 1.0 }
    }
}

impl CheckConstants {
    pub fn with_l(self, l: f64) -> Self {
        Self { l, ..self }
    }
}

impl fmt::Display for CheckConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "L={} r1={} r2={} r3={} p0={} p1={} rho={}",
            self.l, self.r1, self.r2, self.r3, self.p0, self.p1, self.rho
        )
    }
}

/// Deterministic sampling grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub seed: u64,
    /// Largest sampled `|x|`.
    pub max_magnitude: f64,
    /// Log-spaced magnitudes per decade for operator checks, starting at 1e-6.
    pub per_decade: usize,
    /// Log-spaced magnitudes per decade for model checks.
    pub model_per_decade: usize,
    /// Step sizes `2^-e` for `e` in this range.
    pub h_exponents: std::ops::RangeInclusive<i32>,
    /// Vector dimensions for operator checks. Componentwise operators (tanh, sin)
    /// meet the H1 caps only up to a factor `√d`.
    pub operator_dims: Vec<usize>,
    /// Random unit directions per magnitude when the dimension exceeds 1.
    pub directions: usize,
    /// Synthetic empirical measures, the first being the Dirac mass at 0.
    pub measures: usize,
    /// Particles per synthetic measure (at most 8).
    pub measure_size: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            seed: 0x5eed_c4ec,
            max_magnitude: 1e6,
            per_decade: 4,
            model_per_decade: 2,
            h_exponents: 1..=20,
            operator_dims: vec![1],
            directions: 4,
            measures: 6,
            measure_size: 8,
        }
    }
}

impl SampleSpec {
    fn magnitudes(&self, per_decade: usize) -> Vec<f64> {
        let top = (self.max_magnitude.log10() * per_decade as f64).round() as i64;
        let mut out = vec![0.0];
        out.extend((-6 * per_decade as i64..=top).map(|k| 10f64.powf(k as f64 / per_decade as f64)));
        out
    }

    fn step_sizes(&self) -> Vec<f64> {
        self.h_exponents.clone().map(|e| 2f64.powi(-e)).collect()
    }

    fn unit_directions(&self, d: usize, tag: usize) -> Vec<Vec<f64>> {
        if d == 1 {
            return vec![vec![1.0], vec![-1.0]];
        }
        let mut stream = NormalStream::for_initial(self.seed, 1_000_000 + tag);
        (0..self.directions)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| stream.next_normal()).collect();
                let n = norm(&v);
                v.into_iter().map(|c| c / n).collect()
            })
            .collect()
    }

    fn points(&self, d: usize, per_decade: usize) -> Vec<Vec<f64>> {
        let dirs = self.unit_directions(d, d);
        let mut out = Vec::new();
        for m in self.magnitudes(per_decade) {
            if m == 0.0 {
                out.push(vec![0.0; d]);
                continue;
            }
            out.extend(dirs.iter().map(|u| u.iter().map(|c| c * m).collect()));
        }
        out
    }

    fn synthetic_measures(&self, d: usize, max_order: usize) -> Vec<EmpiricalMeasure> {
        const SCALES: [f64; 6] = [0.0, 0.5, 1.0, 3.0, 10.0, 100.0];
        let size = self.measure_size.clamp(1, 8);
        (0..self.measures.max(1))
            .map(|j| {
                let scale = SCALES[j % SCALES.len()] * (1 + j / SCALES.len()) as f64;
                let mut stream = NormalStream::for_initial(self.seed, 2_000_000 + j);
                let shift = if j % 2 == 0 { 0.0 } else { scale };
                let states = (0..size * d).map(|_| scale * stream.next_normal() + shift).collect();
                EmpiricalMeasure::new(states, d, max_order)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Operator label or model name.
    pub subject: String,
    pub assumption: AssumptionId,
    pub constants: CheckConstants,
    pub samples: usize,
    /// `≤ 0` means no sampled violation.
    pub max_violation: f64,
    /// Input of the worst sample, as `key=value` pairs.
    pub witness: String,
    /// Set when the check had to weaken an ingredient (for example W2 in d > 1).
    pub caveat: Option<String>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.max_violation <= 0.0
    }
}

struct Eval {
    lhs: f64,
    rhs: f64,
    tol: f64,
}

impl Eval {
    fn violation(&self) -> f64 {
        let v = (self.lhs - self.rhs - self.tol) / (1.0 + self.rhs);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    /// Worst of several inequalities checked at one point.
    fn worst(evals: impl IntoIterator<Item = Eval>) -> f64 {
        evals.into_iter().map(|e| e.violation()).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the largest violation; earliest sample wins ties.
fn argmax(violations: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in violations.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|c| format!("{c:e}")).collect();
    parts.join(" ")
}

fn tol(scale: f64) -> f64 {
    ROUNDING_ULPS * f64::EPSILON * scale
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Checks H1, H2 or H3 for an operator on the sampled `(h, v)` grid in each
/// of `spec.operator_dims`. State-dependent operators are evaluated at state `x = 0`.
///
/// [`AssumptionId::Ex35Bound`] is checked against the canonical coefficients
/// `b(x) = −x|x|^{2ρ}`, `σ(x) = x|x|^ρ` with the operator's own `ρ` (or `constants.rho`).
pub fn check_taming(op: &TamingOperator, assumption: AssumptionId, c: &CheckConstants, spec: &SampleSpec) -> AssumptionReport {
    if assumption == AssumptionId::Ex35Bound {
        let rho = match op.kind() {
            crate::taming::TamingKind::FullyTamed { rho } => rho,
            _ => c.rho,
        };
        return check_fte_bound(op, &canonical_growth_model(rho), c, spec);
    }
    if !assumption.is_operator_check() {
        return AssumptionReport {
            subject: op.label(),
            assumption,
            constants: *c,
            samples: 0,
            max_violation: f64::INFINITY,
            witness: format!("{assumption} is a model assumption"),
            caveat: Some("not applicable to taming operators".into()),
        };
    }
    let hs = spec.step_sizes();
    let vs: Vec<Vec<f64>> = spec.operator_dims.iter().flat_map(|&d| spec.points(d.max(1), spec.per_decade)).collect();
    let samples: Vec<(f64, &Vec<f64>)> = hs.iter().flat_map(|&h| vs.iter().map(move |v| (h, v))).collect();
    let violations: Vec<f64> = samples
        .par_iter()
        .map(|&(h, v)| {
            let x = vec![0.0; v.len()];
            let t1 = op.apply_t1(v, &x, h).unwrap_or_else(|_| vec![f64::NAN; v.len()]);
            let t2 = op.apply_t2(v, &x, h).unwrap_or_else(|_| vec![f64::NAN; v.len()]);
            let nv = norm(v);
            let (n1, n2) = (norm(&t1), norm(&t2));
            match assumption {
                AssumptionId::H1 => Eval::worst([
                    Eval { lhs: n1, rhs: (c.l * h.powi(-2)).min(nv), tol: tol(n1) },
                    Eval { lhs: n2, rhs: (c.l * h.powf(-1.5)).min(nv), tol: tol(n2) },
                ]),
                AssumptionId::H2 => Eval::worst([Eval {
                    lhs: diff_norm(&t1, v),
                    rhs: c.l * h.powf(c.r1) * nv.powf(c.r2),
                    tol: tol(n1 + nv),
                }]),
                _ => Eval::worst([
                    Eval { lhs: diff_norm(&t1, v), rhs: c.l * h.powf(c.r1) * nv.powf(c.r2), tol: tol(n1 + nv) },
                    Eval { lhs: diff_norm(&t2, v), rhs: c.l * h.powf(c.r3) * nv.powf(c.r2), tol: tol(n2 + nv) },
                ]),
            }
        })
        .collect();
    let (i, worst) = argmax(&violations);
    let (h, v) = samples[i];
    let dep = matches!(op.kind(), crate::taming::TamingKind::FullyTamed { .. });
    AssumptionReport {
        subject: op.label(),
        assumption,
        constants: *c,
        samples: samples.len(),
        max_violation: worst,
        witness: format!("h={h:e};v={}", fmt_vec(v)),
        caveat: dep.then(|| "state-dependent operator evaluated at x=0".to_string()),
    }
}

/// `b(x) = −x|x|^{2ρ}`, `σ(x) = x|x|^ρ`: the fastest growth admitted for exponent `ρ`.
pub fn canonical_growth_model(rho: f64) -> ModelSpec {
    ModelSpec::builder(format!("growth_rho{rho}"), 1, 1)
        .rho(rho)
        .drift(move |_, x, _, out| out[0] = -x[0] * x[0].abs().powf(2.0 * rho))
        .diffusion(move |_, x, _, _, out| out[0] = x[0] * x[0].abs().powf(rho))
        .build()
        .expect("valid canonical model")
}

/// Checks the fully tamed growth bound of `op` applied to `model`'s coefficients.
pub fn check_fte_bound(op: &TamingOperator, model: &ModelSpec, c: &CheckConstants, spec: &SampleSpec) -> AssumptionReport {
    let d = model.dim();
    let xs = spec.points(d, spec.model_per_decade);
    let measures = spec.synthetic_measures(d, model.moment_order().max(2));
    let hs = spec.step_sizes();
    let mut samples = Vec::new();
    for (hi, _) in hs.iter().enumerate() {
        for xi in 0..xs.len() {
            for mi in 0..measures.len() {
                samples.push((hi, xi, mi));
            }
        }
    }
    let violations: Vec<f64> = samples
        .par_iter()
        .map(|&(hi, xi, mi)| {
            let (h, x, mu) = (hs[hi], &xs[xi], measures[mi].view());
            let w2 = mu.w2sq_to_dirac0().sqrt();
            let nx = norm(x);
            let b = model.drift(0.0, x, &mu);
            let t1 = op.apply_t1(&b, x, h).unwrap_or_else(|_| vec![f64::NAN; d]);
            let mut evals = vec![Eval {
                lhs: norm(&t1),
                rhs: (c.l * h.powf(-0.25) * (1.0 + nx) + w2).min(norm(&b)),
                tol: tol(norm(&t1)),
            }];
            for r in 0..model.noise_dim() {
                let s = model.diffusion_col(0.0, x, &mu, r);
                let t2 = op.apply_t2(&s, x, h).unwrap_or_else(|_| vec![f64::NAN; d]);
                evals.push(Eval {
                    lhs: norm(&t2),
                    rhs: (c.l * h.powf(-0.125) * (1.0 + nx) + w2).min(norm(&s)),
                    tol: tol(norm(&t2)),
                });
            }
            Eval::worst(evals)
        })
        .collect();
    let (i, worst) = argmax(&violations);
    let (hi, xi, mi) = samples[i];
    AssumptionReport {
        subject: format!("{}@{}", op.label(), model.name()),
        assumption: AssumptionId::Ex35Bound,
        constants: *c,
        samples: samples.len(),
        max_violation: worst,
        witness: format!("h={:e};x={};mu={mi}", hs[hi], fmt_vec(&xs[xi])),
        caveat: None,
    }
}

/// Checks A2, A3, A5 or A6 for a model on sampled points and synthetic measures.
pub fn check_model(model: &ModelSpec, assumption: AssumptionId, c: &CheckConstants, spec: &SampleSpec) -> AssumptionReport {
    let d = model.dim();
    let m = model.noise_dim();
    let xs = spec.points(d, spec.model_per_decade);
    let measures = spec.synthetic_measures(d, model.moment_order().max(2));
    let k = measures.len();
    let caveat = (d > 1).then(|| "W2 replaced by the index-coupled upper bound".to_string());
    // W2 between synthetic measures, exact in d = 1
    let mut w2 = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            let ea = Ensemble::new(measures[a].states().to_vec(), d, 0.0, 0, 2).expect("rows of length d");
            let eb = Ensemble::new(measures[b].states().to_vec(), d, 0.0, 0, 2).expect("rows of length d");
            w2[a * k + b] = if d == 1 {
                w2_1d_exact(&ea, &eb).expect("equal sizes")
            } else {
                crate::stats::rmse(&ea, &eb).expect("equal sizes")
            };
        }
    }
    if !matches!(assumption, AssumptionId::A2 | AssumptionId::A3 | AssumptionId::A5 | AssumptionId::A6) {
        return AssumptionReport {
            subject: model.name().to_string(),
            assumption,
            constants: *c,
            samples: 0,
            max_violation: f64::INFINITY,
            witness: format!("{assumption} is an operator assumption"),
            caveat: Some("not applicable to models".into()),
        };
    }

    // coefficient values per (point, measure)
    let coeffs: Vec<(Vec<f64>, Vec<Vec<f64>>)> = (0..xs.len() * k)
        .into_par_iter()
        .map(|j| {
            let (x, mu) = (&xs[j / k], measures[j % k].view());
            let b = model.drift(0.0, x, &mu);
            let s = (0..m).map(|r| model.diffusion_col(0.0, x, &mu, r)).collect();
            (b, s)
        })
        .collect();
    let coef = |xi: usize, mi: usize| &coeffs[xi * k + mi];

    let samples: Vec<(usize, usize, usize, usize)> = if assumption == AssumptionId::A2 {
        (0..xs.len()).flat_map(|xi| (0..k).map(move |mi| (xi, xi, mi, mi))).collect()
    } else {
        let mut v = Vec::new();
        for xi in 0..xs.len() {
            for yi in 0..xs.len() {
                for mi in 0..k {
                    for ni in 0..k {
                        v.push((xi, yi, mi, ni));
                    }
                }
            }
        }
        v
    };
    let weight = match assumption {
        AssumptionId::A2 => 2.0 * c.p0 - 1.0,
        AssumptionId::A5 => 2.0 * c.p1 - 1.0,
        _ => 1.0,
    };
    let violations: Vec<f64> = samples
        .par_iter()
        .map(|&(xi, yi, mi, ni)| {
            let (x, y) = (&xs[xi], &xs[yi]);
            let (b, s) = coef(xi, mi);
            let e = match assumption {
                AssumptionId::A2 => {
                    let xb: f64 = x.iter().zip(b).map(|(p, q)| p * q).sum();
                    let ss: f64 = s.iter().flatten().map(|v| v * v).sum();
                    let w = measures[mi].view().w2sq_to_dirac0();
                    Eval {
                        lhs: 2.0 * xb + weight * ss,
                        rhs: c.l * (1.0 + norm(x).powi(2) + w),
                        tol: tol(2.0 * norm(x) * norm(b) + weight.abs() * ss),
                    }
                }
                AssumptionId::A3 | AssumptionId::A5 => {
                    let (b2, s2) = coef(yi, ni);
                    let mut inner = 0.0;
                    for cc in 0..d {
                        inner += (x[cc] - y[cc]) * (b[cc] - b2[cc]);
                    }
                    let mut ss = 0.0;
                    let mut smag = 0.0;
                    for (col, col2) in s.iter().zip(s2) {
                        ss += col.iter().zip(col2).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
                        smag += (norm(col) + norm(col2)).powi(2);
                    }
                    let dxy = diff_norm(x, y);
                    let w = w2[mi * k + ni];
                    Eval {
                        lhs: 2.0 * inner + weight * ss,
                        rhs: c.l * (dxy * dxy + w * w),
                        tol: tol(2.0 * dxy * (norm(b) + norm(b2)) + weight.abs() * smag),
                    }
                }
                _ => {
                    let (b2, _) = coef(yi, ni);
                    let two_rho = 2.0 * c.rho;
                    let envelope = 1.0 + norm(x).powf(two_rho) + norm(y).powf(two_rho);
                    Eval {
                        lhs: diff_norm(b, b2),
                        rhs: c.l * (envelope * diff_norm(x, y) + w2[mi * k + ni]),
                        tol: tol(norm(b) + norm(b2)),
                    }
                }
            };
            e.violation()
        })
        .collect();
    let (i, worst) = argmax(&violations);
    let (xi, yi, mi, ni) = samples[i];
    let witness = if assumption == AssumptionId::A2 {
        format!("x={};mu={mi}", fmt_vec(&xs[xi]))
    } else {
        format!("x={};y={};mu={mi};nu={ni}", fmt_vec(&xs[xi]), fmt_vec(&xs[yi]))
    };
    AssumptionReport {
        subject: model.name().to_string(),
        assumption,
        constants: *c,
        samples: samples.len(),
        max_violation: worst,
        witness,
        caveat,
    }
}

/// Smallest `L ∈ {2^0, …, 2^10}` for which [`check_model`] passes, with its report.
pub fn sweep_model_constant(
    model: &ModelSpec,
    assumption: AssumptionId,
    c: &CheckConstants,
    spec: &SampleSpec,
) -> Option<AssumptionReport> {
    (0..=10).map(|e| check_model(model, assumption, &c.with_l(2f64.powi(e)), spec)).find(|r| r.passed())
}

/// Sampled suprema of `|b| / (1 + |x|^{2ρ+1} + W2(μ, δ0))` and
/// `‖σ‖ / (1 + |x|^{ρ+1} + W2(μ, δ0))`.
pub fn growth_constants(model: &ModelSpec, rho: f64, spec: &SampleSpec) -> (f64, f64) {
    let d = model.dim();
    let xs = spec.points(d, spec.model_per_decade);
    let measures = spec.synthetic_measures(d, model.moment_order().max(2));
    let mut kb = 0.0f64;
    let mut ks = 0.0f64;
    for x in &xs {
        for mu in &measures {
            let v = mu.view();
            let w = v.w2sq_to_dirac0().sqrt();
            let nx = norm(x);
            let b = model.drift(0.0, x, &v);
            kb = kb.max(norm(&b) / (1.0 + nx.powf(2.0 * rho + 1.0) + w));
            let ss: f64 = (0..model.noise_dim()).map(|r| norm(&model.diffusion_col(0.0, x, &v, r)).powi(2)).sum();
            ks = ks.max(ss.sqrt() / (1.0 + nx.powf(rho + 1.0) + w));
        }
    }
    (kb, ks)
}

/// `G(ρ, r1, r2) = max{6ρ, ((2ρ+1) r2 − 1) / r1}`.
pub fn compute_g(rho: f64, r1: f64, r2: f64) -> Result<f64> {
    if !(rho >= 0.0) || !(r1 > 0.0) || !(r2 > 0.0) || !rho.is_finite() || !r1.is_finite() || !r2.is_finite() {
        return Err(invalid(format!("G needs rho >= 0, r1 > 0, r2 > 0; got ({rho}, {r1}, {r2})")));
    }
    Ok((6.0 * rho).max(((2.0 * rho + 1.0) * r2 - 1.0) / r1))
}

/// Largest admissible moment order `(2 p̄ − G) / (2 + 4 G)` for a given `p̄`.
pub fn p_max_lemma(p_bar: f64, g: f64) -> f64 {
    (2.0 * p_bar - g) / (2.0 + 4.0 * g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConstants {
    pub g: f64,
    pub p_max_lemma: f64,
    pub rho: f64,
    pub r1: f64,
    pub r2: f64,
}

impl TheoryConstants {
    pub fn new(rho: f64, r1: f64, r2: f64, p_bar: f64) -> Result<Self> {
        let g = compute_g(rho, r1, r2)?;
        Ok(Self { g, p_max_lemma: p_max_lemma(p_bar, g), rho, r1, r2 })
    }
}

/// Roots of `c ↦ b(c, δ_c)` for the double-well drift on `[−5, 5]`, found by a
/// scan at resolution `1e-3` followed by bisection. Sorted ascending.
pub fn doublewell_equilibria_oracle() -> Vec<f64> {
    let model = model_example_doublewell(0.0, 1.0).expect("valid parameters");
    let f = |c: f64| {
        let mu = EmpiricalMeasure::dirac(&[c], model.moment_order());
        model.drift(0.0, &[c], &mu.view())[0]
    };
    const STEPS: i64 = 10_000;
    let grid = |i: i64| (i - STEPS / 2) as f64 / 1000.0;
    let mut roots: Vec<f64> = Vec::new();
    let mut prev = (grid(0), f(grid(0)));
    if prev.1 == 0.0 {
        roots.push(prev.0);
    }
    for i in 1..=STEPS {
        let c = grid(i);
        let v = f(c);
        if v == 0.0 {
            roots.push(c);
        } else if prev.1 != 0.0 && (prev.1 < 0.0) != (v < 0.0) {
            let (mut lo, mut hi) = (prev.0, c);
            let neg_lo = prev.1 < 0.0;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let fm = f(mid);
                if fm == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if (fm < 0.0) == neg_lo {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev = (c, v);
    }
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    roots
}

/// The oracle's roots against a claimed set of equilibria.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriaComparison {
    pub found: Vec<f64>,
    pub claimed: Vec<f64>,
    pub missing: Vec<f64>,
    pub extra: Vec<f64>,
}

impl EquilibriaComparison {
    pub fn matches(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty()
    }
}

pub fn compare_equilibria(found: &[f64], claimed: &[f64], tol: f64) -> EquilibriaComparison {
    let near = |a: f64, set: &[f64]| set.iter().any(|b| (a - b).abs() <= tol);
    EquilibriaComparison {
        found: found.to_vec(),
        claimed: claimed.to_vec(),
        missing: claimed.iter().copied().filter(|c| !near(*c, found)).collect(),
        extra: found.iter().copied().filter(|c| !near(*c, claimed)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{model_example_cubic, model_example_quintic};

    fn quick() -> SampleSpec {
        SampleSpec { h_exponents: 1..=20, ..SampleSpec::default() }
    }

    #[test]
    fn g_examples() {
        assert_eq!(compute_g(1.0, 1.0, 3.0).unwrap(), 8.0);
        assert_eq!(compute_g(1.0, 0.5, 2.0).unwrap(), 10.0);
        assert_eq!(compute_g(2.0, 1.0, 1.0).unwrap(), 12.0);
        assert!(compute_g(1.0, 0.0, 2.0).is_err());
        assert!(compute_g(-1.0, 1.0, 2.0).is_err());
        let t = TheoryConstants::new(1.0, 1.0, 3.0, 100.0).unwrap();
        assert_eq!(t.p_max_lemma, (200.0 - 8.0) / 34.0);
        assert!(t.g >= 6.0 * t.rho && t.g >= ((2.0 * t.rho + 1.0) * t.r2 - 1.0) / t.r1);
    }

    #[test]
    fn g_is_monotone_on_a_grid() {
        let vals: Vec<f64> = (0..10).map(|i| 0.1 + 0.35 * i as f64).collect();
        for &rho in &vals {
            for &r1 in &vals {
                for &r2 in &vals {
                    let g = compute_g(rho, r1, r2).unwrap();
                    assert!(compute_g(rho + 0.1, r1, r2).unwrap() >= g);
                    assert!(compute_g(rho, r1, r2 + 0.1).unwrap() >= g);
                    assert!(compute_g(rho, r1 + 0.1, r2).unwrap() <= g);
                }
            }
        }
    }

    #[test]
    fn modified_passes_h1_h2_h3() {
        let op = TamingOperator::modified();
        let c = CheckConstants::default();
        assert!(check_taming(&op, AssumptionId::H1, &c, &quick()).passed());
        let h2 = CheckConstants { r1: 1.0, r2: 3.0, ..c };
        assert!(check_taming(&op, AssumptionId::H2, &h2, &quick()).passed());
        assert!(check_taming(&op, AssumptionId::H3, &c, &quick()).passed());
    }

    #[test]
    fn bounded_operators_pass_h1_and_h3() {
        let c = CheckConstants::default();
        for op in [TamingOperator::tanh(1.0).unwrap(), TamingOperator::sin(1.0).unwrap()] {
            for a in [AssumptionId::H1, AssumptionId::H3] {
                let r = check_taming(&op, a, &c, &quick());
                assert!(r.passed(), "{} {a}: {} at {}", op.label(), r.max_violation, r.witness);
            }
        }
    }

    #[test]
    fn componentwise_operators_in_higher_dimension() {
        let spec = SampleSpec { operator_dims: vec![3], ..quick() };
        let op = TamingOperator::tanh(1.0).unwrap();
        let c = CheckConstants::default();
        assert!(!check_taming(&op, AssumptionId::H1, &c, &spec).passed());
        assert!(check_taming(&op, AssumptionId::H1, &c.with_l(3f64.sqrt()), &spec).passed());
        assert!(check_taming(&TamingOperator::modified(), AssumptionId::H1, &c, &spec).passed());
    }

    #[test]
    fn identity_and_fully_tamed_fail_h1() {
        let c = CheckConstants::default();
        let r = check_taming(&TamingOperator::identity(), AssumptionId::H1, &c, &quick());
        assert!(!r.passed() && r.witness.starts_with("h="));
        let huge = SampleSpec { max_magnitude: 1e6 * 2f64.powi(40), h_exponents: 20..=20, ..quick() };
        let r = check_taming(&TamingOperator::identity(), AssumptionId::H1, &c.with_l(1e3), &huge);
        assert!(!r.passed());
        let r = check_taming(&TamingOperator::fully_tamed(1.0).unwrap(), AssumptionId::H1, &c, &quick());
        assert!(!r.passed());
        assert!(r.caveat.is_some());
    }

    #[test]
    fn fully_tamed_bound_holds_for_some_constant() {
        let op = TamingOperator::fully_tamed(1.0).unwrap();
        let c = CheckConstants::default();
        let found = (0..=10).map(|e| check_fte_bound(&op, &model_example_cubic(), &c.with_l(2f64.powi(e)), &quick())).find(|r| r.passed());
        assert!(found.is_some());
        assert!(check_taming(&op, AssumptionId::Ex35Bound, &c.with_l(4.0), &quick()).passed());
    }

    #[test]
    fn cubic_a6_constant_is_found() {
        let r = sweep_model_constant(&model_example_cubic(), AssumptionId::A6, &CheckConstants::default(), &quick()).unwrap();
        assert!(r.constants.l <= 4.0, "{}", r.constants.l);
        assert!(!check_model(&model_example_cubic(), AssumptionId::A6, &CheckConstants::default().with_l(0.5), &quick()).passed());
    }

    #[test]
    fn quintic_a6_with_small_rho_fails() {
        let c = CheckConstants { l: 1024.0, rho: 1.0, ..CheckConstants::default() };
        let r = check_model(&model_example_quintic(), AssumptionId::A6, &c, &quick());
        assert!(!r.passed());
        let c2 = CheckConstants { rho: 2.0, ..c };
        assert!(check_model(&model_example_quintic(), AssumptionId::A6, &c2, &quick()).passed());
    }

    #[test]
    fn one_sided_conditions_hold_for_builtins() {
        let c = CheckConstants::default();
        for model in [model_example_cubic(), model_example_quintic()] {
            for a in [AssumptionId::A2, AssumptionId::A3, AssumptionId::A5] {
                let r = sweep_model_constant(&model, a, &c, &quick());
                assert!(r.is_some(), "{} {a}", model.name());
            }
        }
        // the double-well drift couples x to the first three moments, so the
        // one-sided bounds hold only while the measures stay moderate
        let dw = model_example_doublewell(3.0, 9.0).unwrap();
        let moderate = SampleSpec { measures: 4, ..quick() };
        for a in [AssumptionId::A2, AssumptionId::A3, AssumptionId::A5] {
            assert!(sweep_model_constant(&dw, a, &c, &moderate).is_some(), "{a}");
            assert!(sweep_model_constant(&dw, a, &c, &quick()).is_none(), "{a}");
        }
    }

    #[test]
    fn doublewell_measure_dependence_is_not_lipschitz_uniformly() {
        // 3x²(E X − E Y) outgrows L·W2 as |x| grows
        let dw = model_example_doublewell(3.0, 9.0).unwrap();
        let c = CheckConstants { l: 1024.0, ..CheckConstants::default() };
        let r = check_model(&dw, AssumptionId::A6, &c, &quick());
        assert!(!r.passed());
        assert!(r.witness.starts_with("x=-1e6;y=-1e6") || r.witness.starts_with("x=1e6;y=1e6"), "{}", r.witness);
    }

    #[test]
    fn degenerate_pair_has_zero_violation() {
        let spec = SampleSpec { max_magnitude: 1.0, measures: 1, ..quick() };
        let model = model_example_cubic();
        let xs = spec.points(1, spec.model_per_decade);
        let mu = spec.synthetic_measures(1, 2);
        let v = mu[0].view();
        for x in &xs {
            let b = model.drift(0.0, x, &v);
            let e = Eval { lhs: 2.0 * 0.0 * b[0], rhs: 0.0, tol: 0.0 };
            assert_eq!(e.violation(), 0.0);
        }
    }

    #[test]
    fn reports_are_deterministic() {
        let c = CheckConstants::default();
        let a = check_model(&model_example_quintic(), AssumptionId::A3, &c, &quick());
        let b = check_model(&model_example_quintic(), AssumptionId::A3, &c, &quick());
        assert_eq!(a, b);
    }

    #[test]
    fn doublewell_equilibria() {
        let roots = doublewell_equilibria_oracle();
        assert!(roots.iter().any(|r| r.abs() < 1e-9));
        for r in &roots {
            assert!(roots.iter().any(|s| (s + r).abs() < 1e-9));
        }
        let cmp = compare_equilibria(&roots, &[-2.0, 0.0, 2.0], 1e-3);
        // self-consistent drift is −c³/4: the only root is 0
        assert_eq!(roots.len(), 1);
        assert_eq!(cmp.missing, vec![-2.0, 2.0]);
        assert!(!cmp.matches());
    }

    #[test]
    fn assumption_ids_round_trip() {
        for a in AssumptionId::ALL {
            assert_eq!(AssumptionId::parse(a.as_str()), Some(a));
        }
    }
}
