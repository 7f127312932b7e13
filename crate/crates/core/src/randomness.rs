//! Random Fourier perturbations `Q_ω` with independent complex Gaussian
//! coefficients, sampled from an addressable counter-based stream.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RandomnessError {
    #[error("sigma rule violates its bound at alpha = {alpha}, k = {k}, h = {h}: sigma = {sigma:e}, bound = {bound:e}")]
    BoundViolation { alpha: usize, k: i64, h: f64, sigma: f64, bound: f64 },
    #[error("invalid law: {0}")]
    InvalidLaw(String),
    #[error("draw file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `⟨k⟩ = (1 + k²)^{1/2}`.
pub fn japanese_bracket(k: i64) -> f64 {
    (1.0 + (k as f64).powi(2)).sqrt()
}

/// Standard deviation of `q_{α,k}^{ij}(h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaRule {
    /// `scale · ⟨k⟩^{-ρ}`.
    Decay { scale: f64 },
    /// `scale · h^{power} · ⟨k⟩^{-ρ}`.
    HDependent { scale: f64, power: f64 },
    /// Degenerate law: every coefficient is zero.
    Zero,
}

impl Default for SigmaRule {
    fn default() -> Self {
        SigmaRule::Decay { scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientLaw {
    pub alpha_min: usize,
    pub alpha_max: usize,
    pub n: usize,
    pub rho: f64,
    pub c_tilde: f64,
    pub rule: SigmaRule,
    /// Coefficients with `|k| > k_q` are not sampled.
    pub k_q: usize,
}

impl CoefficientLaw {
    /// Validated law; both bounds `C̃^{-1}⟨k⟩^{-ρ} ≤ σ_{α₁} ` and
    /// `σ ≤ C̃⟨k⟩^{-ρ}` are checked on a lattice of `(k, h)`.
    pub fn new(
        alpha_min: usize,
        alpha_max: usize,
        n: usize,
        rho: f64,
        c_tilde: f64,
        rule: SigmaRule,
        k_q: usize,
    ) -> Result<Self, RandomnessError> {
        let law = Self::unchecked(alpha_min, alpha_max, n, rho, c_tilde, rule, k_q)?;
        law.validate_bounds()?;
        Ok(law)
    }

    /// Shape checks only; use for the degenerate zero law.
    pub fn unchecked(
        alpha_min: usize,
        alpha_max: usize,
        n: usize,
        rho: f64,
        c_tilde: f64,
        rule: SigmaRule,
        k_q: usize,
    ) -> Result<Self, RandomnessError> {
        if alpha_min > alpha_max {
            return Err(RandomnessError::InvalidLaw("alpha_min exceeds alpha_max".into()));
        }
        if n == 0 {
            return Err(RandomnessError::InvalidLaw("n must be at least 1".into()));
        }
        if !(rho > 1.0) {
            return Err(RandomnessError::InvalidLaw(format!("rho must exceed 1, got {rho}")));
        }
        if !(c_tilde >= 1.0) {
            return Err(RandomnessError::InvalidLaw(format!("c_tilde must be at least 1, got {c_tilde}")));
        }
        Ok(Self { alpha_min, alpha_max, n, rho, c_tilde, rule, k_q })
    }

    /// `⟨k⟩^{-ρ}` with `C̃ = 1`, orders `alpha_min..=alpha_max`.
    pub fn standard(alpha_min: usize, alpha_max: usize, n: usize, rho: f64, k_q: usize) -> Result<Self, RandomnessError> {
        Self::new(alpha_min, alpha_max, n, rho, 1.0, SigmaRule::Decay { scale: 1.0 }, k_q)
    }

    pub fn with_k_q(&self, k_q: usize) -> Self {
        Self { k_q, ..self.clone() }
    }

    fn validate_bounds(&self) -> Result<(), RandomnessError> {
        let hs = [1.0, 0.5, 0.1, 0.05, 0.01];
        let ks = (0..=self.k_q as i64).chain([1_000, 100_000]);
        for k in ks {
            let base = japanese_bracket(k).powf(-self.rho);
            for &h in &hs {
                for alpha in self.alpha_min..=self.alpha_max {
                    let s = sigma_of(self, alpha, 0, 0, k, h);
                    let upper = self.c_tilde * base;
                    if s > upper * (1.0 + 1e-12) {
                        return Err(RandomnessError::BoundViolation { alpha, k, h, sigma: s, bound: upper });
                    }
                    if alpha == self.alpha_max {
                        let lower = base / self.c_tilde;
                        if s < lower * (1.0 - 1e-12) {
                            return Err(RandomnessError::BoundViolation { alpha, k, h, sigma: s, bound: lower });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of sampled coefficients.
    pub fn support_size(&self) -> usize {
        (self.alpha_max - self.alpha_min + 1) * self.n * self.n * (2 * self.k_q + 1)
    }

    /// `Σ_{|k| > K_q} σ` over all `(α, i, j)`, from the rule.
    pub fn tail_mass(&self, h: f64) -> f64 {
        let per_k = |k: i64| -> f64 {
            let mut s = 0.0;
            for alpha in self.alpha_min..=self.alpha_max {
                s += sigma_of(self, alpha, 0, 0, k, h);
            }
            s * (self.n * self.n) as f64
        };
        if matches!(self.rule, SigmaRule::Zero) {
            return 0.0;
        }
        // every rule is a multiple of ⟨k⟩^{-ρ}; factor it out
        let factor = per_k(0);
        2.0 * factor * decay_tail(self.k_q as i64, self.rho)
    }
}

/// `Σ_{k > K} ⟨k⟩^{-ρ}`: direct sum to a cutoff, then Euler–Maclaurin.
fn decay_tail(k_q: i64, rho: f64) -> f64 {
    let f = |k: f64| (1.0 + k * k).powf(-rho / 2.0);
    let cutoff = (k_q + 1).max(20_000);
    let mut direct = 0.0;
    for k in (k_q + 1)..cutoff {
        direct += f(k as f64);
    }
    let n = cutoff as f64;
    // ∫_N^∞ (1+k²)^{-ρ/2} dk by the asymptotic series in 1/k²
    let integral = n.powf(1.0 - rho) / (rho - 1.0) - (rho / 2.0) * n.powf(-1.0 - rho) / (rho + 1.0)
        + (rho * (rho + 2.0) / 8.0) * n.powf(-3.0 - rho) / (rho + 3.0);
    let fprime = -rho * n * (1.0 + n * n).powf(-rho / 2.0 - 1.0);
    direct + integral + f(n) / 2.0 - fprime / 12.0
}

/// `σ_{α,k}^{ij}(h)`.
pub fn sigma_of(law: &CoefficientLaw, _alpha: usize, _i: usize, _j: usize, k: i64, h: f64) -> f64 {
    let base = japanese_bracket(k).powf(-law.rho);
    match law.rule {
        SigmaRule::Decay { scale } => scale * base,
        SigmaRule::HDependent { scale, power } => scale * h.powf(power) * base,
        SigmaRule::Zero => 0.0,
    }
}

/// Seed plus stream labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub seed: u64,
    pub experiment: String,
    pub trial: u64,
}

impl SeedSpec {
    pub fn new(seed: u64, experiment: impl Into<String>, trial: u64) -> Self {
        Self { seed, experiment: experiment.into(), trial }
    }

    fn key(&self, alpha: usize, i: usize, j: usize, k: i64) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(b"cweyl-coefficient-v1");
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.experiment.len() as u64).to_le_bytes());
        hasher.update(self.experiment.as_bytes());
        hasher.update(self.trial.to_le_bytes());
        hasher.update((alpha as u64).to_le_bytes());
        hasher.update((i as u64).to_le_bytes());
        hasher.update((j as u64).to_le_bytes());
        hasher.update(k.to_le_bytes());
        hasher.finalize().into()
    }

    /// Standard complex Gaussian `(g₁ + i g₂)/√2` addressed by `(α, i, j, k)`.
    pub fn unit_gaussian(&self, alpha: usize, i: usize, j: usize, k: i64) -> Complex64 {
        let mut rng = ChaCha8Rng::from_seed(self.key(alpha, i, j, k));
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    }
}

pub type CoefficientKey = (usize, usize, usize, i64);

/// One realization `ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDraw {
    coeffs: BTreeMap<CoefficientKey, Complex64>,
    pub seed: Option<SeedSpec>,
    n: usize,
    pub k_q: usize,
    /// `Σ_{|k| > K_q} σ` bookkeeping from the law.
    pub tail_mass: f64,
}

impl PerturbationDraw {
    pub fn from_coefficients(n: usize, coeffs: BTreeMap<CoefficientKey, Complex64>) -> Self {
        let k_q = coeffs.keys().map(|k| k.3.unsigned_abs() as usize).max().unwrap_or(0);
        Self { coeffs, seed: None, n, k_q, tail_mass: 0.0 }
    }

    pub fn coefficients(&self) -> &BTreeMap<CoefficientKey, Complex64> {
        &self.coeffs
    }

    pub fn get(&self, alpha: usize, i: usize, j: usize, k: i64) -> Complex64 {
        self.coeffs.get(&(alpha, i, j, k)).copied().unwrap_or_default()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `Σ |q|`.
    pub fn abs_sum(&self) -> f64 {
        self.coeffs.values().map(|q| q.norm()).sum()
    }

    /// `Q_α^{ij}(x) = Σ_k q_{α,k}^{ij} e^{ikx}/√(2π)`.
    pub fn eval(&self, alpha: usize, i: usize, j: usize, x: f64) -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for (&(a, ii, jj, k), &q) in self.coeffs.range((alpha, i, j, i64::MIN)..=(alpha, i, j, i64::MAX)) {
            debug_assert!(a == alpha && ii == i && jj == j);
            s += q * Complex64::from_polar(1.0, k as f64 * x);
        }
        s / std::f64::consts::TAU.sqrt()
    }

    /// Orders present in the draw.
    pub fn orders(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.coeffs.keys().map(|k| k.0).collect();
        v.dedup();
        v
    }
}

/// Sample every coefficient of the law's support.
pub fn sample_draw(law: &CoefficientLaw, seed: &SeedSpec, h: f64) -> PerturbationDraw {
    let kq = law.k_q as i64;
    let mut keys = Vec::with_capacity(law.support_size());
    for alpha in law.alpha_min..=law.alpha_max {
        for i in 0..law.n {
            for j in 0..law.n {
                for k in -kq..=kq {
                    keys.push((alpha, i, j, k));
                }
            }
        }
    }
    let values: Vec<Complex64> = keys
        .par_iter()
        .map(|&(alpha, i, j, k)| {
            let s = sigma_of(law, alpha, i, j, k, h);
            if s == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                seed.unit_gaussian(alpha, i, j, k) * s
            }
        })
        .collect();
    PerturbationDraw {
        coeffs: keys.into_iter().zip(values).collect(),
        seed: Some(seed.clone()),
        n: law.n,
        k_q: law.k_q,
        tail_mass: law.tail_mass(h),
    }
}

/// `Σ |q| / √(2π)`, which dominates `Σ_{α,i,j} sup_x |Q_α^{ij}(x)|`.
pub fn sup_norm_estimate(draw: &PerturbationDraw) -> f64 {
    draw.abs_sum() / std::f64::consts::TAU.sqrt()
}

/// `(‖σ‖₁, ‖σ‖_∞)` over the sampled support.
pub fn sigma_norms(law: &CoefficientLaw, h: f64) -> (f64, f64) {
    let kq = law.k_q as i64;
    let mut l1 = 0.0;
    let mut linf: f64 = 0.0;
    for alpha in law.alpha_min..=law.alpha_max {
        for i in 0..law.n {
            for j in 0..law.n {
                for k in -kq..=kq {
                    let s = sigma_of(law, alpha, i, j, k, h);
                    l1 += s;
                    linf = linf.max(s);
                }
            }
        }
    }
    (l1, linf)
}

/// `exp[C₀‖σ‖₁/(2‖σ‖_∞) - x²/(2‖σ‖_∞‖σ‖₁)]`.
pub fn tail_bound(c0: f64, l1: f64, linf: f64, x: f64) -> f64 {
    (c0 * l1 / (2.0 * linf) - x * x / (2.0 * linf * l1)).exp()
}

/// Smallest constant for which [`tail_bound`] always holds.
pub const RIGOROUS_C0: f64 = 2.0 * std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
    pub statistics: Vec<f64>,
    pub sigma_l1: f64,
    pub sigma_linf: f64,
    pub trials: usize,
}

impl TailReport {
    pub fn bound(&self, c0: f64, x: f64) -> f64 {
        tail_bound(c0, self.sigma_l1, self.sigma_linf, x)
    }

    pub fn mean_statistic(&self) -> f64 {
        self.statistics.iter().sum::<f64>() / self.statistics.len().max(1) as f64
    }

    /// Least `C₀` for which the bound dominates every nonzero fraction.
    pub fn fitted_c0(&self) -> f64 {
        fit_c0(&self.thresholds, &self.fractions, self.sigma_l1, self.sigma_linf)
    }

    /// Binomial standard error of the fraction at threshold index `t`.
    pub fn standard_error(&self, t: usize) -> f64 {
        let p = self.fractions[t];
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }
}

pub fn fit_c0(thresholds: &[f64], fractions: &[f64], l1: f64, linf: f64) -> f64 {
    thresholds
        .iter()
        .zip(fractions)
        .filter(|(_, f)| **f > 0.0)
        .map(|(x, f)| 2.0 * linf / l1 * (f.ln() + x * x / (2.0 * linf * l1)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Exceedance fractions of `Σ|q|` over `trials` independent draws.
pub fn empirical_tail(law: &CoefficientLaw, seed: u64, trials: usize, thresholds: &[f64], h: f64) -> TailReport {
    let statistics: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| sample_draw(law, &SeedSpec::new(seed, "tail", t), h).abs_sum())
        .collect();
    let fractions = exceedance(&statistics, thresholds);
    let (sigma_l1, sigma_linf) = sigma_norms(law, h);
    TailReport { thresholds: thresholds.to_vec(), fractions, statistics, sigma_l1, sigma_linf, trials }
}

pub fn exceedance(stats: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&x| stats.iter().filter(|&&s| s >= x).count() as f64 / stats.len().max(1) as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// Text draw files: one "alpha i j k re im" line per coefficient.

pub fn write_draw<W: Write>(draw: &PerturbationDraw, mut out: W) -> Result<(), RandomnessError> {
    writeln!(out, "# n {}", draw.n)?;
    for (&(alpha, i, j, k), q) in &draw.coeffs {
        writeln!(out, "{alpha} {i} {j} {k} {:e} {:e}", q.re, q.im)?;
    }
    Ok(())
}

pub fn read_draw<R: BufRead>(input: R) -> Result<PerturbationDraw, RandomnessError> {
    let mut n = None;
    let mut coeffs = BTreeMap::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() == 2 && parts[0] == "n" {
                n = Some(parts[1].parse().map_err(|_| RandomnessError::Format(format!("bad n on line {}", lineno + 1)))?);
            }
            continue;
        }
        let p: Vec<&str> = line.split_whitespace().collect();
        let bad = || RandomnessError::Format(format!("bad coefficient on line {}", lineno + 1));
        if p.len() != 6 {
            return Err(bad());
        }
        let key = (
            p[0].parse().map_err(|_| bad())?,
            p[1].parse().map_err(|_| bad())?,
            p[2].parse().map_err(|_| bad())?,
            p[3].parse().map_err(|_| bad())?,
        );
        let q = Complex64::new(p[4].parse().map_err(|_| bad())?, p[5].parse().map_err(|_| bad())?);
        coeffs.insert(key, q);
    }
    let n = match n {
        Some(n) => n,
        None => coeffs.keys().map(|k: &CoefficientKey| k.1.max(k.2) + 1).max().unwrap_or(1),
    };
    Ok(PerturbationDraw::from_coefficients(n, coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_examples() {
        let law = CoefficientLaw::standard(0, 0, 1, 2.0, 4).unwrap();
        assert_eq!(sigma_of(&law, 0, 0, 0, 0, 0.1), 1.0);
        assert!((sigma_of(&law, 0, 0, 0, 1, 0.1) - 0.5).abs() < 1e-15);
        let law = CoefficientLaw::standard(0, 0, 1, 1.2, 4).unwrap();
        let s = sigma_of(&law, 0, 0, 0, 100, 0.1);
        assert!((s - 10001f64.powf(-0.6)).abs() < 1e-15);
        assert!((s - 3.98e-3).abs() < 1e-5);
    }

    #[test]
    fn bound_violations_are_rejected() {
        let too_big = CoefficientLaw::new(0, 0, 1, 1.5, 2.0, SigmaRule::Decay { scale: 3.0 }, 8);
        assert!(matches!(too_big, Err(RandomnessError::BoundViolation { .. })));
        let too_small = CoefficientLaw::new(0, 0, 1, 1.5, 2.0, SigmaRule::Decay { scale: 0.1 }, 8);
        assert!(matches!(too_small, Err(RandomnessError::BoundViolation { .. })));
        let h_dep = CoefficientLaw::new(0, 0, 1, 1.5, 2.0, SigmaRule::HDependent { scale: 1.0, power: 1.0 }, 8);
        assert!(h_dep.is_err());
        assert!(CoefficientLaw::new(0, 0, 1, 0.9, 1.0, SigmaRule::default(), 8).is_err());
    }

    #[test]
    fn zero_law_gives_zero_draw() {
        let law = CoefficientLaw::unchecked(0, 1, 2, 1.5, 1.0, SigmaRule::Zero, 5).unwrap();
        let d = sample_draw(&law, &SeedSpec::new(1, "t", 0), 0.1);
        assert_eq!(d.coefficients().len(), law.support_size());
        assert!(d.coefficients().values().all(|q| *q == Complex64::new(0.0, 0.0)));
        assert_eq!(sup_norm_estimate(&d), 0.0);
        assert_eq!(d.tail_mass, 0.0);
    }

    #[test]
    fn draws_are_reproducible_and_addressable() {
        let law = CoefficientLaw::standard(0, 1, 2, 1.2, 6).unwrap();
        let s = SeedSpec::new(42, "unit", 3);
        let a = sample_draw(&law, &s, 0.1);
        let b = sample_draw(&law, &s, 0.1);
        assert_eq!(a, b);
        let wide = sample_draw(&law.with_k_q(12), &s, 0.1);
        for (key, q) in a.coefficients() {
            assert_eq!(wide.get(key.0, key.1, key.2, key.3), *q);
        }
        let other = sample_draw(&law, &SeedSpec::new(42, "unit", 4), 0.1);
        assert_ne!(a, other);
    }

    #[test]
    fn single_coefficient_norm_estimate() {
        let mut m = BTreeMap::new();
        m.insert((0, 0, 0, 3), Complex64::new(0.6, -0.8));
        let d = PerturbationDraw::from_coefficients(1, m);
        assert!((sup_norm_estimate(&d) - 1.0 / std::f64::consts::TAU.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tail_sum_matches_long_direct_sum() {
        let rho = 1.5;
        let direct: f64 = (11..2_000_000).map(|k| japanese_bracket(k).powf(-rho)).sum();
        // remainder past 2e6 from the integral
        let rest = 2e6f64.powf(1.0 - rho) / (rho - 1.0);
        assert!((decay_tail(10, rho) - (direct + rest)).abs() < 1e-6 * (direct + rest));
    }

    #[test]
    fn draw_file_roundtrip() {
        let law = CoefficientLaw::standard(0, 0, 2, 1.3, 3).unwrap();
        let d = sample_draw(&law, &SeedSpec::new(9, "io", 0), 1.0);
        let mut buf = Vec::new();
        write_draw(&d, &mut buf).unwrap();
        let back = read_draw(&buf[..]).unwrap();
        assert_eq!(back.coefficients(), d.coefficients());
        assert_eq!(back.n(), 2);
    }

    #[test]
    fn tail_threshold_zero() {
        let law = CoefficientLaw::standard(0, 0, 1, 1.5, 4).unwrap();
        let r = empirical_tail(&law, 1, 100, &[0.0, 1e6], 1.0);
        assert_eq!(r.fractions, vec![1.0, 0.0]);
    }
}
