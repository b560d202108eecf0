//! Generator catalog for `D_f(P || Q) = Σ Q f(P / Q)`.
//!
//! `t = P/Q` is the density ratio seen by `f`; `w = Q/P` is the ratio seen by
//! a sample drawn from `P`. For every member this module carries `f`, `f'`,
//! the extended inverse of `f'`, the sampling form `g(w) = w f(1/w)` and the
//! policy-gradient weights `φ(w) = f'(1/w)` and `ψ(w) = f(w) - w f'(w)`.

use std::fmt;

use crate::error::{Error, Result};
use crate::tape::{sign, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FName {
    /// `f(t) = -log t`, giving `KL(Q || P)`.
    ForwardKl,
    /// `f(t) = t log t`, giving `KL(P || Q)`.
    ReverseKl,
    Pearson,
    Neyman,
    Hellinger,
    JensenShannon,
    TotalVariation,
    Alpha(f64),
}

/// One named f-divergence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FGenerator {
    name: FName,
}

pub const DEFAULT_ALPHA: f64 = 3.0;

impl FName {
    pub fn tag(&self) -> &'static str {
        match self {
            FName::ForwardKl => "fkl",
            FName::ReverseKl => "rkl",
            FName::Pearson => "pearson",
            FName::Neyman => "neyman",
            FName::Hellinger => "hellinger",
            FName::JensenShannon => "js",
            FName::TotalVariation => "tv",
            FName::Alpha(_) => "alpha",
        }
    }
}

impl fmt::Display for FGenerator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name {
            FName::Alpha(a) => write!(f, "alpha({a})"),
            n => f.write_str(n.tag()),
        }
    }
}

/// Look up a generator. `α ∈ {-1, 0, 1}` is rejected.
pub fn catalog(name: FName) -> Result<FGenerator> {
    if let FName::Alpha(a) = name {
        if !a.is_finite() || a == 0.0 || a == 1.0 || a == -1.0 {
            return Err(Error::Argument(format!(
                "alpha-divergence needs alpha outside {{-1, 0, 1}}, got {a}"
            )));
        }
    }
    Ok(FGenerator { name })
}

/// The eight catalog members, α-divergence at `alpha`.
pub fn all_generators(alpha: f64) -> Result<Vec<FGenerator>> {
    [
        FName::ForwardKl,
        FName::ReverseKl,
        FName::Pearson,
        FName::Neyman,
        FName::Hellinger,
        FName::JensenShannon,
        FName::TotalVariation,
        FName::Alpha(alpha),
    ]
    .into_iter()
    .map(catalog)
    .collect()
}

impl FGenerator {
    pub fn name(&self) -> FName {
        self.name
    }

    pub fn f(&self, t: f64) -> f64 {
        match self.name {
            FName::ForwardKl => -t.ln(),
            FName::ReverseKl => {
                if t == 0.0 {
                    0.0
                } else {
                    t * t.ln()
                }
            }
            FName::Pearson => (t - 1.0).powi(2),
            FName::Neyman => (t - 1.0).powi(2) / t,
            FName::Hellinger => 0.5 * (t.sqrt() - 1.0).powi(2),
            FName::JensenShannon => {
                let tlt = if t == 0.0 { 0.0 } else { t * t.ln() };
                0.5 * (tlt - (t + 1.0) * ((t + 1.0) / 2.0).ln())
            }
            FName::TotalVariation => 0.5 * (t - 1.0).abs(),
            FName::Alpha(a) => (t.powf(a) - 1.0 - a * (t - 1.0)) / (a * (a - 1.0)),
        }
    }

    pub fn f_prime(&self, t: f64) -> f64 {
        match self.name {
            FName::ForwardKl => -1.0 / t,
            FName::ReverseKl => t.ln() + 1.0,
            FName::Pearson => 2.0 * (t - 1.0),
            FName::Neyman => 1.0 - 1.0 / (t * t),
            FName::Hellinger => 0.5 * (1.0 - 1.0 / t.sqrt()),
            FName::JensenShannon => 0.5 * (2.0 * t / (t + 1.0)).ln(),
            FName::TotalVariation => 0.5 * sign(t - 1.0),
            FName::Alpha(a) => (t.powf(a - 1.0) - 1.0) / (a - 1.0),
        }
    }

    /// `lim f'(t)` as `t -> 0+` and as `t -> ∞`.
    pub fn f_prime_range(&self) -> (f64, f64) {
        let inf = f64::INFINITY;
        match self.name {
            FName::ForwardKl => (-inf, 0.0),
            FName::ReverseKl => (-inf, inf),
            FName::Pearson => (-2.0, inf),
            FName::Neyman => (-inf, 1.0),
            FName::Hellinger => (-inf, 0.5),
            FName::JensenShannon => (-inf, 0.5 * std::f64::consts::LN_2),
            FName::TotalVariation => (-0.5, 0.5),
            FName::Alpha(a) if a > 1.0 => (-1.0 / (a - 1.0), inf),
            FName::Alpha(a) if a > 0.0 => (-inf, 1.0 / (1.0 - a)),
            // α < 0: t^{α-1} runs from ∞ down to 0
            FName::Alpha(a) => (-inf, 1.0 / (1.0 - a)),
        }
    }

    pub fn has_inverse(&self) -> bool {
        self.name != FName::TotalVariation
    }

    /// `(f')⁻¹(s)` extended to the whole line: 0 below `f'(0+)` and `+∞` at or
    /// above `f'(∞)`. `None` for total variation.
    pub fn f_prime_inv(&self, s: f64) -> Option<f64> {
        let (lo, hi) = self.f_prime_range();
        if !self.has_inverse() {
            return None;
        }
        if s <= lo {
            return Some(0.0);
        }
        if s >= hi {
            return Some(f64::INFINITY);
        }
        Some(match self.name {
            FName::ForwardKl => -1.0 / s,
            FName::ReverseKl => (s - 1.0).exp(),
            FName::Pearson => 1.0 + 0.5 * s,
            FName::Neyman => 1.0 / (1.0 - s).sqrt(),
            FName::Hellinger => 1.0 / (1.0 - 2.0 * s).powi(2),
            FName::JensenShannon => {
                let e = (2.0 * s).exp();
                e / (2.0 - e)
            }
            FName::Alpha(a) => (1.0 + (a - 1.0) * s).powf(1.0 / (a - 1.0)),
            FName::TotalVariation => unreachable!(),
        })
    }

    /// Sampling form `g(w) = w f(1/w)`.
    pub fn g(&self, w: f64) -> f64 {
        match self.name {
            FName::ForwardKl => w * w.ln(),
            FName::ReverseKl => -w.ln(),
            FName::Pearson => (1.0 - w).powi(2) / w,
            FName::Neyman => (1.0 - w).powi(2),
            FName::Hellinger => 0.5 * (1.0 - w.sqrt()).powi(2),
            FName::JensenShannon => {
                0.5 * (-w.ln() - (1.0 + w) * ((1.0 + w) / (2.0 * w)).ln())
            }
            FName::TotalVariation => 0.5 * (1.0 - w).abs(),
            FName::Alpha(a) => (w.powf(1.0 - a) + (a - 1.0) * w - a) / (a * (a - 1.0)),
        }
    }

    /// `φ(w) = f'(1/w)`, the score weight for `D_f(π_θ || π*)`.
    pub fn phi(&self, w: f64) -> f64 {
        match self.name {
            FName::ForwardKl => -w,
            FName::ReverseKl => 1.0 - w.ln(),
            FName::Pearson => 2.0 * (1.0 / w - 1.0),
            FName::Neyman => 1.0 - w * w,
            FName::Hellinger => 0.5 * (1.0 - w.sqrt()),
            FName::JensenShannon => 0.5 * (2.0 / (1.0 + w)).ln(),
            FName::TotalVariation => 0.5 * sign(1.0 - w),
            FName::Alpha(a) => (w.powf(1.0 - a) - 1.0) / (a - 1.0),
        }
    }

    /// `ψ(w) = f(w) - w f'(w)`, the score weight for `D_f(π* || π_θ)`.
    pub fn psi(&self, w: f64) -> f64 {
        match self.name {
            FName::ForwardKl => 1.0 - w.ln(),
            FName::ReverseKl => -w,
            FName::Pearson => 1.0 - w * w,
            FName::Neyman => 2.0 / w - 2.0,
            FName::Hellinger => 0.5 * (1.0 - w.sqrt()),
            FName::JensenShannon => 0.5 * (2.0 / (1.0 + w)).ln(),
            FName::TotalVariation => -0.5 * sign(w - 1.0),
            FName::Alpha(a) => (1.0 - w.powf(a)) / a,
        }
    }

    /// `f(t)` on the tape.
    pub fn f_var<'t>(&self, t: Var<'t>) -> Var<'t> {
        match self.name {
            FName::ForwardKl => -t.ln(),
            FName::ReverseKl => t * t.ln(),
            FName::Pearson => (t - 1.0).square(),
            FName::Neyman => (t - 1.0).square() / t,
            FName::Hellinger => 0.5 * (t.sqrt() - 1.0).square(),
            FName::JensenShannon => 0.5 * (t * t.ln() - (t + 1.0) * ((t + 1.0) * 0.5).ln()),
            FName::TotalVariation => 0.5 * (t - 1.0).abs(),
            FName::Alpha(a) => (t.powf(a) - 1.0 - a * (t - 1.0)) / (a * (a - 1.0)),
        }
    }

    /// `g(w)` on the tape.
    pub fn g_var<'t>(&self, w: Var<'t>) -> Var<'t> {
        match self.name {
            FName::ForwardKl => w * w.ln(),
            FName::ReverseKl => -w.ln(),
            FName::Pearson => (1.0 - w).square() / w,
            FName::Neyman => (1.0 - w).square(),
            FName::Hellinger => 0.5 * (1.0 - w.sqrt()).square(),
            FName::JensenShannon => 0.5 * (-w.ln() - (1.0 + w) * ((1.0 + w) / (2.0 * w)).ln()),
            FName::TotalVariation => 0.5 * (1.0 - w).abs(),
            FName::Alpha(a) => (w.powf(1.0 - a) + (a - 1.0) * w - a) / (a * (a - 1.0)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gens() -> Vec<FGenerator> {
        all_generators(DEFAULT_ALPHA).unwrap()
    }

    #[test]
    fn catalog_values() {
        let rkl = catalog(FName::ReverseKl).unwrap();
        assert_relative_eq!(rkl.f(2.0), 2.0 * 2f64.ln(), epsilon = 1e-15);
        assert_eq!(catalog(FName::Pearson).unwrap().f(3.0), 4.0);
        for g in gens() {
            assert!(g.f(1.0).abs() < 1e-12, "{g}");
        }
        assert!(catalog(FName::Alpha(1.0)).is_err());
        assert!(catalog(FName::Alpha(0.0)).is_err());
        assert!(catalog(FName::Alpha(-1.0)).is_err());
        assert!(catalog(FName::Alpha(0.5)).is_ok());
    }

    #[test]
    fn derived_forms_match_f() {
        let points = [0.1, 0.35, 0.8, 1.7, 2.0, 4.5];
        for g in gens().into_iter().chain([catalog(FName::Alpha(0.5)).unwrap(), catalog(FName::Alpha(-2.0)).unwrap()]) {
            for &w in &points {
                assert_relative_eq!(g.g(w), w * g.f(1.0 / w), epsilon = 1e-12, max_relative = 1e-10);
                assert_relative_eq!(g.phi(w), g.f_prime(1.0 / w), epsilon = 1e-12, max_relative = 1e-10);
                assert_relative_eq!(g.psi(w), g.f(w) - w * g.f_prime(w), epsilon = 1e-12, max_relative = 1e-10);
                // φ = g - w g'
                let h = 1e-6;
                let dg = (g.g(w + h) - g.g(w - h)) / (2.0 * h);
                assert_relative_eq!(g.phi(w), g.g(w) - w * dg, epsilon = 1e-6);
                let df = (g.f(w + h) - g.f(w - h)) / (2.0 * h);
                assert_relative_eq!(g.f_prime(w), df, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn convex_on_audit_points() {
        for g in gens() {
            for i in 1..200 {
                let t = i as f64 * 0.05;
                let h = 0.01;
                let d2 = g.f(t + h) - 2.0 * g.f(t) + g.f(t - h);
                assert!(d2 >= -1e-12, "{g} at {t}");
            }
        }
    }

    #[test]
    fn inverse_roundtrip() {
        for g in gens().into_iter().filter(|g| g.has_inverse()) {
            for &t in &[0.2, 0.9, 1.0, 1.3, 3.0] {
                let s = g.f_prime(t);
                assert_relative_eq!(g.f_prime_inv(s).unwrap(), t, max_relative = 1e-10);
            }
            let (lo, hi) = g.f_prime_range();
            if lo.is_finite() {
                assert_eq!(g.f_prime_inv(lo - 1.0), Some(0.0));
            }
            if hi.is_finite() {
                assert_eq!(g.f_prime_inv(hi), Some(f64::INFINITY));
            }
        }
        assert!(catalog(FName::TotalVariation).unwrap().f_prime_inv(0.0).is_none());
    }

    #[test]
    fn weight_examples() {
        // f(t) = -log t: φ(w) = -w
        assert_eq!(catalog(FName::ForwardKl).unwrap().phi(2.0), -2.0);
        // f(t) = t log t: ψ(w) = -w
        assert_eq!(catalog(FName::ReverseKl).unwrap().psi(1.0), -1.0);
        let tv = catalog(FName::TotalVariation).unwrap();
        assert_eq!(tv.psi(2.0), -0.5);
        assert_eq!(tv.psi(1.0), 0.0);
    }
}
