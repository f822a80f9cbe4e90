//! Taming maps `T1` (drift) and `T2` (diffusion columns) of the modified Euler scheme
//!
//! ```text
//! X_{k+1} = X_k + T1(b(t_k, X_k, μ_k), h) h + Σ_r T2(σ_r(t_k, X_k, μ_k), h) ΔW_r
//! ```
//!
//! | kind        | T1(v, h)                    | T2(v, h)              |
//! |-------------|-----------------------------|-----------------------|
//! | Identity    | v                           | v                     |
//! | DriftTamed  | v / (1 + h^λ \|v\|)         | v                     |
//! | Modified    | v / (1 + h \|v\|²)          | v / (1 + h \|v\|²)    |
//! | Tanh        | h^-α tanh(h^α v)            | h^-α tanh(h^α v)      |
//! | Sin         | h^-α sin(h^α v)             | h^-α sin(h^α v)       |
//! | FullyTamed  | v / (1 + h^½ \|x\|^{4ρ})    | v / (1 + h^½ \|x\|^{4ρ}) |
//!
//! Norm-based maps use the Euclidean norm of the whole vector; `tanh` and
//! `sin` act componentwise. In one dimension the two readings coincide.

use std::fmt;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TamingKind {
    Identity,
    DriftTamed { lambda: f64 },
    Modified,
    Tanh { alpha: f64 },
    Sin { alpha: f64 },
    FullyTamed { rho: f64 },
}

/// Exponents `(r1, r2, r3)` of the consistency bounds
/// `|T1(v,h) − v| ≤ L h^{r1} |v|^{r2}` and `|T2(v,h) − v| ≤ L h^{r3} |v|^{r2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyExponents {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TamingOperator {
    kind: TamingKind,
}

impl TamingOperator {
    pub fn identity() -> Self {
        Self { kind: TamingKind::Identity }
    }

    /// `λ ∈ (0, 1/2]`.
    pub fn drift_tamed(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 0.5) {
            return Err(invalid(format!("drift-tamed lambda must lie in (0, 1/2], got {lambda}")));
        }
        Ok(Self { kind: TamingKind::DriftTamed { lambda } })
    }

    pub fn modified() -> Self {
        Self { kind: TamingKind::Modified }
    }

    /// `α ∈ (0, 3/2)`.
    pub fn tanh(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { kind: TamingKind::Tanh { alpha } })
    }

    /// `α ∈ (0, 3/2)`.
    pub fn sin(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { kind: TamingKind::Sin { alpha } })
    }

    /// `ρ` is the model's growth exponent.
    pub fn fully_tamed(rho: f64) -> Result<Self> {
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(invalid(format!("fully-tamed rho must be finite and >= 0, got {rho}")));
        }
        Ok(Self { kind: TamingKind::FullyTamed { rho } })
    }

    pub fn kind(&self) -> TamingKind {
        self.kind
    }

    /// Exponents for which the consistency bound holds with `L = 1`, where known.
    pub fn declared_h3(&self) -> Option<ConsistencyExponents> {
        match self.kind {
            TamingKind::Modified | TamingKind::Tanh { .. } | TamingKind::Sin { .. } => {
                Some(ConsistencyExponents { r1: 0.5, r2: 2.0, r3: 0.5 })
            }
            _ => None,
        }
    }

    /// `(r1, r2)` of the drift-only consistency bound.
    pub fn declared_h2(&self) -> Option<(f64, f64)> {
        match self.kind {
            TamingKind::Identity => Some((1.0, 1.0)),
            TamingKind::DriftTamed { lambda } => Some((lambda, 2.0)),
            TamingKind::Modified => Some((1.0, 3.0)),
            TamingKind::Tanh { alpha } => Some((alpha, 2.0)),
            TamingKind::Sin { alpha } => Some((alpha / 2.0, 2.0)),
            TamingKind::FullyTamed { .. } => None,
        }
    }

    /// Short label used in file names, e.g. `te1`, `dte0.5`.
    pub fn label(&self) -> String {
        match self.kind {
            TamingKind::Identity => "identity".into(),
            TamingKind::DriftTamed { lambda } => format!("dte{lambda}"),
            TamingKind::Modified => "me".into(),
            TamingKind::Tanh { alpha } => format!("te{alpha}"),
            TamingKind::Sin { alpha } => format!("se{alpha}"),
            TamingKind::FullyTamed { .. } => "fte".into(),
        }
    }

    /// `T1(v, h)`; `x` is the particle state and only matters for `FullyTamed`.
    pub fn apply_t1(&self, v: &[f64], x: &[f64], h: f64) -> Result<Vec<f64>> {
        self.apply(v, x, h, false)
    }

    /// `T2(v, h)` for one diffusion column.
    pub fn apply_t2(&self, v: &[f64], x: &[f64], h: f64) -> Result<Vec<f64>> {
        self.apply(v, x, h, true)
    }

    fn apply(&self, v: &[f64], x: &[f64], h: f64, diffusion: bool) -> Result<Vec<f64>> {
        if !(h > 0.0 && h < 1.0) {
            return Err(invalid(format!("step size must lie in (0, 1), got {h}")));
        }
        if !v.iter().chain(x).all(|c| c.is_finite()) {
            return Err(Error::NonFiniteCoefficient { what: "taming input", t: f64::NAN, x: x.to_vec() });
        }
        let mut out = v.to_vec();
        if diffusion {
            self.tame_diffusion(&mut out, x, h);
        } else {
            self.tame_drift(&mut out, x, h);
        }
        Ok(out)
    }

    /// In-place `T1` without argument checks.
    #[inline]
    pub fn tame_drift(&self, v: &mut [f64], x: &[f64], h: f64) {
        self.tame(v, x, h, false)
    }

    /// In-place `T2` without argument checks.
    #[inline]
    pub fn tame_diffusion(&self, v: &mut [f64], x: &[f64], h: f64) {
        self.tame(v, x, h, true)
    }

    #[inline]
    fn tame(&self, v: &mut [f64], x: &[f64], h: f64, diffusion: bool) {
        match self.kind {
            TamingKind::Identity => {}
            TamingKind::DriftTamed { lambda } => {
                if !diffusion {
                    let denom = 1.0 + h.powf(lambda) * norm(v);
                    v.iter_mut().for_each(|c| *c /= denom);
                }
            }
            TamingKind::Modified => {
                let denom = 1.0 + h * norm_sq(v);
                v.iter_mut().for_each(|c| *c /= denom);
            }
            TamingKind::Tanh { alpha } => {
                let ha = h.powf(alpha);
                v.iter_mut().for_each(|c| *c = (ha * *c).tanh() / ha);
            }
            TamingKind::Sin { alpha } => {
                let ha = h.powf(alpha);
                v.iter_mut().for_each(|c| *c = (ha * *c).sin() / ha);
            }
            TamingKind::FullyTamed { rho } => {
                let denom = 1.0 + h.sqrt() * norm(x).powf(4.0 * rho);
                v.iter_mut().for_each(|c| *c /= denom);
            }
        }
    }
}

impl fmt::Display for TamingOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TamingKind::Identity => write!(f, "identity"),
            TamingKind::DriftTamed { lambda } => write!(f, "dte({lambda})"),
            TamingKind::Modified => write!(f, "me"),
            TamingKind::Tanh { alpha } => write!(f, "te({alpha})"),
            TamingKind::Sin { alpha } => write!(f, "se({alpha})"),
            TamingKind::FullyTamed { rho } => write!(f, "fte(rho={rho})"),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.5) {
        return Err(invalid(format!("alpha must lie in (0, 3/2), got {alpha}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum()
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        norm_sq(v).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_ops() -> Vec<TamingOperator> {
        vec![
            TamingOperator::identity(),
            TamingOperator::drift_tamed(0.5).unwrap(),
            TamingOperator::modified(),
            TamingOperator::tanh(1.0).unwrap(),
            TamingOperator::sin(1.0).unwrap(),
            TamingOperator::fully_tamed(1.0).unwrap(),
        ]
    }

    #[test]
    fn constructor_ranges() {
        assert!(TamingOperator::drift_tamed(0.0).is_err());
        assert!(TamingOperator::drift_tamed(0.51).is_err());
        assert!(TamingOperator::drift_tamed(0.5).is_ok());
        assert!(TamingOperator::tanh(1.5).is_err());
        assert!(TamingOperator::tanh(0.0).is_err());
        assert!(TamingOperator::sin(1.49).is_ok());
        assert!(TamingOperator::fully_tamed(-1.0).is_err());
    }

    #[test]
    fn modified_example() {
        let v = TamingOperator::modified().apply_t1(&[2.0], &[0.0], 0.25).unwrap();
        assert_eq!(v, vec![1.0]);
    }

    #[test]
    fn origin_is_fixed() {
        for op in all_ops() {
            for h in [0.5, 0.01, 1e-6] {
                assert_eq!(op.apply_t1(&[0.0], &[3.0], h).unwrap(), vec![0.0], "{op}");
                assert_eq!(op.apply_t2(&[0.0, 0.0], &[3.0, 1.0], h).unwrap(), vec![0.0, 0.0], "{op}");
            }
        }
    }

    #[test]
    fn tanh_saturates() {
        let h = 0.01;
        let v = TamingOperator::tanh(1.0).unwrap().apply_t1(&[1e6], &[0.0], h).unwrap()[0];
        assert!(v.abs() <= 1.0 / h + 1e-12);
        assert!((v - 100.0).abs() < 1e-9);
    }

    #[test]
    fn t2_examples() {
        let dte = TamingOperator::drift_tamed(0.5).unwrap();
        assert_eq!(dte.apply_t2(&[3.0, -4.0], &[9.0, 9.0], 0.3).unwrap(), vec![3.0, -4.0]);

        let h = 0.125;
        let se = TamingOperator::sin(1.0).unwrap();
        let v = se.apply_t2(&[std::f64::consts::FRAC_PI_2 / h], &[0.0], h).unwrap()[0];
        assert!((v - 1.0 / h).abs() < 1e-12);

        let fte = TamingOperator::fully_tamed(1.0).unwrap();
        for h in [0.5, 0.01] {
            assert_eq!(fte.apply_t2(&[1.0], &[0.0], h).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn vector_maps_use_norm_or_components() {
        let h = 0.25;
        let me = TamingOperator::modified().apply_t1(&[3.0, 4.0], &[0.0, 0.0], h).unwrap();
        let denom = 1.0 + h * 25.0;
        assert_eq!(me, vec![3.0 / denom, 4.0 / denom]);
        let te = TamingOperator::tanh(1.0).unwrap().apply_t1(&[3.0, 4.0], &[0.0, 0.0], h).unwrap();
        assert_eq!(te, vec![(0.75f64).tanh() / h, (1.0f64).tanh() / h]);
        let fte = TamingOperator::fully_tamed(0.5).unwrap().apply_t1(&[1.0, 1.0], &[3.0, 4.0], h).unwrap();
        let denom = 1.0 + 0.5 * 25.0;
        assert_eq!(fte, vec![1.0 / denom, 1.0 / denom]);
    }

    #[test]
    fn errors() {
        let op = TamingOperator::modified();
        assert!(matches!(op.apply_t1(&[f64::NAN], &[0.0], 0.1), Err(Error::NonFiniteCoefficient { .. })));
        assert!(matches!(op.apply_t1(&[1.0], &[f64::INFINITY], 0.1), Err(Error::NonFiniteCoefficient { .. })));
        assert!(op.apply_t1(&[1.0], &[0.0], 1.0).is_err());
        assert!(op.apply_t1(&[1.0], &[0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn maps_are_odd(v in -1e8f64..1e8, e in 1u32..20) {
            let h = 2f64.powi(-(e as i32));
            for op in all_ops() {
                if matches!(op.kind(), TamingKind::DriftTamed { .. } | TamingKind::FullyTamed { .. }) {
                    continue;
                }
                let a = op.apply_t1(&[v], &[0.0], h).unwrap()[0];
                let b = op.apply_t1(&[-v], &[0.0], h).unwrap()[0];
                prop_assert_eq!(a, -b);
                let a = op.apply_t2(&[v], &[0.0], h).unwrap()[0];
                let b = op.apply_t2(&[-v], &[0.0], h).unwrap()[0];
                prop_assert_eq!(a, -b);
            }
        }

        #[test]
        fn bounded_taming_never_exceeds_input(v in -1e8f64..1e8, e in 1u32..20) {
            let h = 2f64.powi(-(e as i32));
            for op in [TamingOperator::modified(), TamingOperator::drift_tamed(0.5).unwrap()] {
                let t = op.apply_t1(&[v], &[0.0], h).unwrap()[0];
                prop_assert!(t.abs() <= v.abs());
                prop_assert!(t.abs() <= h.powi(-2));
            }
        }
    }
}
