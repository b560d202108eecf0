//! Lag dynamics of a policy anchored to its own exponential moving average.
//!
//! With a frozen gradient `g` and Fisher matrix `F`, one optimizer step on
//! `-J + β KL(θ || θ_ema)` followed by an EMA update moves the pair
//! `(θ, δ = θ - θ_ema)` by
//!
//! ```text
//! θ' = θ + α g - α β F δ
//! δ' = (η I - α β F) δ + α g
//! ```
//!
//! Everything below works per Fisher eigenmode, where the lag obeys a scalar
//! recursion with multiplier `χ = η - α β λ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg, Error, Result};

/// Symmetric PSD matrix stored with its eigendecomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherSpec {
    eigenvalues: DVector<f64>,
    basis: DMatrix<f64>,
    matrix: DMatrix<f64>,
}

impl FisherSpec {
    /// `F = Σ λ_i v_i v_iᵀ` with `v_i` the columns of `basis`.
    pub fn new(eigenvalues: Vec<f64>, basis: DMatrix<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        if basis.nrows() != d || basis.ncols() != d {
            return arg(format!("basis is {}x{}, expected {d}x{d}", basis.nrows(), basis.ncols()));
        }
        if let Some(l) = eigenvalues.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return arg(format!("eigenvalue {l} is not a finite nonnegative number"));
        }
        let gram = basis.transpose() * &basis;
        let off = (gram - DMatrix::<f64>::identity(d, d)).amax();
        if off > 1e-10 {
            return arg(format!("basis is not orthonormal (deviation {off:e})"));
        }
        let eigenvalues = DVector::from_vec(eigenvalues);
        let matrix = &basis * DMatrix::from_diagonal(&eigenvalues) * basis.transpose();
        Ok(FisherSpec {
            eigenvalues,
            basis,
            matrix,
        })
    }

    pub fn diagonal(eigenvalues: Vec<f64>) -> Result<Self> {
        let d = eigenvalues.len();
        Self::new(eigenvalues, DMatrix::identity(d, d))
    }

    /// Random orthogonal basis (QR of a Gaussian matrix), eigenvalues
    /// log-uniform in `[lo, hi]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize, lo: f64, hi: f64) -> Result<Self> {
        if d == 0 || !(lo > 0.0 && hi >= lo) {
            return arg("need d >= 1 and 0 < lo <= hi");
        }
        let gauss = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        let basis = gauss.qr().q();
        let (a, b) = (lo.ln(), hi.ln());
        let eigenvalues = (0..d).map(|_| (a + (b - a) * rng.random::<f64>()).exp()).collect();
        Self::new(eigenvalues, basis)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.max()
    }

    /// Index of the largest eigenvalue (first on ties).
    pub fn argmax(&self) -> usize {
        self.eigenvalues.imax()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Coordinates of `x` in the eigenbasis.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis.transpose() * x
    }

    pub fn unproject(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.basis * y
    }

    /// Same basis, eigenvalues multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.eigenvalues.iter().map(|l| l * c).collect(), self.basis.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub g: DVector<f64>,
}

impl DynamicsConfig {
    pub fn new(alpha: f64, beta: f64, eta: f64, g: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0) || !(beta >= 0.0) || !(0.0..=1.0).contains(&eta) {
            return arg(format!("invalid dynamics config alpha={alpha} beta={beta} eta={eta}"));
        }
        Ok(DynamicsConfig {
            alpha,
            beta,
            eta,
            g: DVector::from_vec(g),
        })
    }

    /// Per-mode lag multiplier `η - αβλ`.
    pub fn chi(&self, lambda: f64) -> f64 {
        self.eta - self.alpha * self.beta * lambda
    }

    fn check(&self, fisher: &FisherSpec, state: Option<&DynamicsState>) -> Result<()> {
        let d = fisher.dim();
        if self.g.len() != d {
            return arg(format!("g has dimension {} but F is {d}x{d}", self.g.len()));
        }
        if let Some(s) = state {
            if s.theta.len() != d || s.delta.len() != d {
                return arg(format!(
                    "state has dimensions ({}, {}) but F is {d}x{d}",
                    s.theta.len(),
                    s.delta.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsState {
    pub theta: DVector<f64>,
    pub delta: DVector<f64>,
}

impl DynamicsState {
    pub fn new(theta: Vec<f64>, delta: Vec<f64>) -> Self {
        DynamicsState {
            theta: DVector::from_vec(theta),
            delta: DVector::from_vec(delta),
        }
    }

    pub fn zeros(d: usize) -> Self {
        DynamicsState {
            theta: DVector::zeros(d),
            delta: DVector::zeros(d),
        }
    }

    /// Largest relative deviation over both components.
    pub fn rel_diff(&self, other: &DynamicsState) -> f64 {
        let rel = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm() / b.norm().max(1e-300);
        rel(&self.theta, &other.theta).max(rel(&self.delta, &other.delta))
    }
}

/// One joint update with the full matrix `F`.
pub fn step(state: &DynamicsState, cfg: &DynamicsConfig, fisher: &FisherSpec) -> Result<DynamicsState> {
    cfg.check(fisher, Some(state))?;
    let pull = fisher.matrix() * &state.delta * (cfg.alpha * cfg.beta);
    let push = &cfg.g * cfg.alpha;
    Ok(DynamicsState {
        theta: &state.theta + &push - &pull,
        delta: &state.delta * cfg.eta - &pull + &push,
    })
}

/// `k` iterated [`step`] calls.
pub fn iterate(state: &DynamicsState, cfg: &DynamicsConfig, fisher: &FisherSpec, k: usize) -> Result<DynamicsState> {
    let mut s = state.clone();
    for _ in 0..k {
        s = step(&s, cfg, fisher)?;
    }
    Ok(s)
}

/// `(Σ_{j<k} χ^j, Σ_{j<k} S_j)`.
fn geometric_sums(chi: f64, k: usize) -> (f64, f64) {
    let kf = k as f64;
    let chi_k = powu(chi, k);
    let s = (1.0 - chi_k) / (1.0 - chi);
    let m = (kf - s) / (1.0 - chi);
    (s, m)
}

fn powu(x: f64, k: usize) -> f64 {
    match i32::try_from(k) {
        Ok(k) => x.powi(k),
        Err(_) => x.powf(k as f64),
    }
}

/// State after `k` steps, computed mode by mode.
pub fn closed_form(k: usize, cfg: &DynamicsConfig, fisher: &FisherSpec, init: &DynamicsState) -> Result<DynamicsState> {
    cfg.check(fisher, Some(init))?;
    if cfg.eta >= 1.0 {
        return arg("closed form needs eta < 1");
    }
    let d0 = fisher.project(&init.delta);
    let g = fisher.project(&cfg.g);
    let (a, ab) = (cfg.alpha, cfg.alpha * cfg.beta);
    let mut d_k = DVector::zeros(fisher.dim());
    let mut th_move = DVector::zeros(fisher.dim());
    for i in 0..fisher.dim() {
        let lambda = fisher.eigenvalues()[i];
        let chi = cfg.chi(lambda);
        let (s, m) = geometric_sums(chi, k);
        d_k[i] = powu(chi, k) * d0[i] + a * s * g[i];
        th_move[i] = -ab * lambda * s * d0[i] + (a * k as f64 - a * ab * lambda * m) * g[i];
    }
    Ok(DynamicsState {
        theta: &init.theta + fisher.unproject(&th_move),
        delta: fisher.unproject(&d_k),
    })
}

/// Lag of one eigenmode after `k` steps: `χ^k δ_0 + α (1 - χ^k)/(1 - χ) g`.
pub fn mode_solution(cfg: &DynamicsConfig, lambda: f64, delta0: f64, g: f64, k: usize) -> Result<f64> {
    if cfg.eta >= 1.0 {
        return arg("mode solution needs eta < 1");
    }
    let chi = cfg.chi(lambda);
    let (s, _) = geometric_sums(chi, k);
    Ok(powu(chi, k) * delta0 + cfg.alpha * s * g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    StableMonotone,
    StableOscillatory,
    Unstable,
}

impl Regime {
    pub fn tag(self) -> &'static str {
        match self {
            Regime::StableMonotone => "stable_monotone",
            Regime::StableOscillatory => "stable_oscillatory",
            Regime::Unstable => "unstable",
        }
    }
}

/// Regime of the stiffest mode given `x = αβλ_max`. `x = η` is monotone and
/// `x = 1 + η` is unstable.
pub fn regime_of(eta: f64, x: f64) -> Regime {
    if x <= eta {
        Regime::StableMonotone
    } else if x < 1.0 + eta {
        Regime::StableOscillatory
    } else {
        Regime::Unstable
    }
}

pub fn classify_regime(cfg: &DynamicsConfig, lambda_max: f64) -> Regime {
    regime_of(cfg.eta, cfg.alpha * cfg.beta * lambda_max)
}

/// Regime read off a simulated trajectory of the stiffest-mode lag. A trace
/// that neither blows up nor falls below half its start (a marginal mode) is
/// not asymptotically stable and is reported unstable.
pub fn observed_regime(trace: &[f64], blowup: f64) -> Regime {
    let start = trace.first().map(|x| x.abs()).unwrap_or(0.0);
    if trace.iter().any(|x| !x.is_finite() || x.abs() > blowup * start) {
        return Regime::Unstable;
    }
    if trace.len() > 1 && trace.last().is_some_and(|x| x.abs() >= 0.5 * start) && start > 0.0 {
        return Regime::Unstable;
    }
    // ignore the roundoff floor once the mode has decayed
    let floor = 1e-200 * start.max(1e-300);
    let live: Vec<f64> = trace.iter().copied().take_while(|x| x.abs() > floor).collect();
    let alternates = live.windows(2).any(|w| w[0] * w[1] < 0.0);
    if alternates {
        Regime::StableOscillatory
    } else {
        Regime::StableMonotone
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SteadyState {
    pub delta_star: DVector<f64>,
    pub kl_star: f64,
    pub norm_bound: f64,
}

/// Fixed point `δ* = α((1-η)I + αβF)⁻¹ g`, its quadratic KL, and the bound
/// `α‖g‖/(1-η)`.
pub fn steady_state(cfg: &DynamicsConfig, fisher: &FisherSpec) -> Result<SteadyState> {
    cfg.check(fisher, None)?;
    if cfg.eta >= 1.0 {
        return arg("steady state needs eta < 1");
    }
    if classify_regime(cfg, fisher.lambda_max()) == Regime::Unstable {
        return Err(Error::State(format!(
            "unstable configuration: alpha*beta*lambda_max = {} >= 1 + eta",
            cfg.alpha * cfg.beta * fisher.lambda_max()
        )));
    }
    let g = fisher.project(&cfg.g);
    let ab = cfg.alpha * cfg.beta;
    let mut d = DVector::zeros(fisher.dim());
    let mut kl = 0.0;
    for i in 0..fisher.dim() {
        let lambda = fisher.eigenvalues()[i];
        let denom = (1.0 - cfg.eta) + ab * lambda;
        d[i] = cfg.alpha * g[i] / denom;
        kl += lambda * g[i] * g[i] / (denom * denom);
    }
    Ok(SteadyState {
        delta_star: fisher.unproject(&d),
        kl_star: 0.5 * cfg.alpha * cfg.alpha * kl,
        norm_bound: cfg.alpha * cfg.g.norm() / (1.0 - cfg.eta),
    })
}

/// `½ δᵀ F δ`.
pub fn quadratic_kl(fisher: &FisherSpec, delta: &DVector<f64>) -> f64 {
    0.5 * delta.dot(&(fisher.matrix() * delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn step_examples() {
        let f = FisherSpec::diagonal(vec![2.0]).unwrap();
        let cfg = DynamicsConfig::new(0.1, 1.0, 0.9, vec![0.0]).unwrap();
        let s = step(&DynamicsState::new(vec![0.0], vec![1.0]), &cfg, &f).unwrap();
        assert!((s.delta[0] - 0.7).abs() < 1e-15);

        let f0 = FisherSpec::diagonal(vec![0.0, 0.0]).unwrap();
        let cfg = DynamicsConfig::new(0.1, 1.0, 0.9, vec![1.0, -2.0]).unwrap();
        let s0 = DynamicsState::new(vec![1.0, 1.0], vec![0.5, 0.5]);
        let s = step(&s0, &cfg, &f0).unwrap();
        assert_eq!(s.delta, &s0.delta * 0.9 + &cfg.g * 0.1);
        assert_eq!(s.theta, &s0.theta + &cfg.g * 0.1);

        let cfg = DynamicsConfig::new(0.1, 1.0, 0.9, vec![0.0, 0.0]).unwrap();
        let still = DynamicsState::new(vec![0.3, 0.4], vec![0.0, 0.0]);
        assert_eq!(step(&still, &cfg, &f0).unwrap(), still);
        assert!(step(&DynamicsState::zeros(3), &cfg, &f0).is_err());
    }

    #[test]
    fn closed_form_matches_iteration() {
        let mut r = rng::stream(2, 0, rng::purpose::FISHER);
        let f = FisherSpec::random(&mut r, 16, 1e-3, 10.0).unwrap();
        let g: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut r)).collect();
        let cfg = DynamicsConfig::new(0.05, 1.0, 0.9, g).unwrap();
        let init = DynamicsState::new(vec![0.1; 16], (0..16).map(|i| (i as f64).sin()).collect());
        let one = closed_form(1, &cfg, &f, &init).unwrap();
        assert!(one.rel_diff(&step(&init, &cfg, &f).unwrap()) < 1e-12);
        let hundred = closed_form(100, &cfg, &f, &init).unwrap();
        assert!(hundred.rel_diff(&iterate(&init, &cfg, &f, 100).unwrap()) < 1e-10);
        assert!(closed_form(0, &cfg, &f, &init).unwrap().rel_diff(&init) < 1e-14);
    }

    #[test]
    fn mode_examples() {
        let cfg = DynamicsConfig::new(0.1, 1.0, 0.5, vec![0.0]).unwrap();
        assert_eq!(mode_solution(&cfg, 3.0, 0.7, 2.0, 0).unwrap(), 0.7);
        // αβλ = η  =>  χ = 0
        let v = mode_solution(&cfg, 5.0, 0.7, 2.0, 4).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn regimes() {
        assert_eq!(regime_of(0.9, 0.5), Regime::StableMonotone);
        assert_eq!(regime_of(0.9, 1.2), Regime::StableOscillatory);
        assert_eq!(regime_of(0.9, 1.9), Regime::Unstable);
        assert_eq!(regime_of(0.9, 0.9), Regime::StableMonotone);
        assert_eq!(regime_of(0.5, 1.5), Regime::Unstable);
    }

    #[test]
    fn steady_state_examples() {
        let f = FisherSpec::diagonal(vec![0.0, 0.0]).unwrap();
        let cfg = DynamicsConfig::new(0.1, 1.0, 0.9, vec![1.0, 2.0]).unwrap();
        let ss = steady_state(&cfg, &f).unwrap();
        assert!((ss.delta_star[0] - 1.0).abs() < 1e-12);
        assert!((ss.delta_star[1] - 2.0).abs() < 1e-12);
        assert_eq!(ss.kl_star, 0.0);
        let f = FisherSpec::diagonal(vec![100.0]).unwrap();
        let cfg = DynamicsConfig::new(0.1, 1.0, 0.9, vec![1.0]).unwrap();
        assert!(matches!(steady_state(&cfg, &f), Err(Error::State(_))));
    }
}
