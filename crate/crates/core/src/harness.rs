//! Experiment configuration, the two Monte Carlo experiments and report
//! emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::{
    assemble_operator, assemble_perturbation, assemble_perturbation_weighted, count_in, eigenvalues, sort_spectrum,
    DiscretizeError, FourierTruncation, OperatorMatrix,
};
use crate::domains::{dyadic_decompose, weyl_measure, DomainError, RadialProfile, SpectralDomain, WeylOptions};
use crate::num::{periodic_diff, Cplx};
use crate::randomness::{sample_draw, CoefficientLaw, RandomnessError, SeedSpec, SigmaRule};
use crate::symbol::{find_roots, CoefficientOrder, MatrixSymbol, RootOptions, RootSign, SymbolError, TrigPolynomial};

type C64 = Cplx<f64>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("empty δ window: lower {lower:e} ≥ upper {upper:e}")]
    EmptyWindow { lower: f64, upper: f64 },
    #[error("hypothesis violated: {0}")]
    HypothesisViolation(String),
    #[error("window condition violated: {0}")]
    WindowViolation(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
    #[error(transparent)]
    Randomness(#[from] RandomnessError),
}

impl HarnessError {
    /// 2 for configuration and hypothesis problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::EmptyWindow { .. }
            | Self::HypothesisViolation(_)
            | Self::WindowViolation(_)
            | Self::Config(_)
            | Self::Io { .. }
            | Self::Json { .. } => 2,
            Self::Symbol(SymbolError::NotElliptic { .. } | SymbolError::InvalidShape(_)) => 2,
            Self::Domain(DomainError::InvalidDomain(_) | DomainError::InvalidProfile(_)) => 2,
            Self::Randomness(RandomnessError::InvalidLaw(_) | RandomnessError::BoundViolation { .. }) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrderSpec {
    #[default]
    Left,
    Right,
}

/// `coeffs[α]` lists `(i, j, k, Re, Im)` for the Fourier coefficient of
/// `e^{ikx}` in entry `(i, j)` of `A_α`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_true")]
    pub semiclassical: bool,
    #[serde(default)]
    pub order: OrderSpec,
    pub coeffs: Vec<Vec<(usize, usize, i64, f64, f64)>>,
}

fn default_true() -> bool {
    true
}

impl SymbolSpec {
    pub fn build(&self) -> Result<MatrixSymbol<f64>, HarnessError> {
        if self.coeffs.len() != self.m + 1 {
            return Err(HarnessError::Config(format!(
                "symbol of order m = {} needs {} coefficient lists, found {}",
                self.m,
                self.m + 1,
                self.coeffs.len()
            )));
        }
        let n = self.n;
        let mut layers = Vec::with_capacity(self.m + 1);
        for (alpha, list) in self.coeffs.iter().enumerate() {
            let mut terms: Vec<Vec<(i64, C64)>> = vec![Vec::new(); n * n];
            for &(i, j, k, re, im) in list {
                if i >= n || j >= n {
                    return Err(HarnessError::Config(format!("entry ({i}, {j}) of A_{alpha} is outside n = {n}")));
                }
                terms[i * n + j].push((k, C64::new(re, im)));
            }
            let mut layer = Vec::with_capacity(n * n);
            for entry in terms {
                let mut merged: Vec<(i64, C64)> = Vec::new();
                for (k, c) in entry {
                    match merged.iter_mut().find(|(kk, _)| *kk == k) {
                        Some(slot) => slot.1 += c,
                        None => merged.push((k, c)),
                    }
                }
                layer.push(TrigPolynomial::from_terms(&merged));
            }
            layers.push(layer);
        }
        let order = match self.order {
            OrderSpec::Left => CoefficientOrder::Left,
            OrderSpec::Right => CoefficientOrder::Right,
        };
        Ok(MatrixSymbol::with_order(n, layers, self.semiclassical, order)?)
    }

    pub fn from_symbol(s: &MatrixSymbol<f64>) -> Self {
        let n = s.dim();
        let coeffs = (0..=s.order())
            .map(|alpha| {
                let mut list = Vec::new();
                for i in 0..n {
                    for j in 0..n {
                        for (k, c) in s.coefficient(alpha, i, j).terms() {
                            if c != C64::new(0.0, 0.0) {
                                list.push((i, j, k, c.re, c.im));
                            }
                        }
                    }
                }
                list
            })
            .collect();
        let order = match s.coefficient_order() {
            CoefficientOrder::Left => OrderSpec::Left,
            CoefficientOrder::Right => OrderSpec::Right,
        };
        Self { n, m: s.order(), semiclassical: s.is_semiclassical(), order, coeffs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub alpha_min: usize,
    pub alpha_max: usize,
    pub rho: f64,
    #[serde(default = "default_c_tilde")]
    pub c_tilde: f64,
    /// Frequency cap of the draw; defaults to `2K`.
    #[serde(rename = "K_q", default)]
    pub k_q: Option<usize>,
    #[serde(default)]
    pub sigma: SigmaRule,
}

fn default_c_tilde() -> f64 {
    1.0
}

impl PerturbationSpec {
    pub fn law(&self, n: usize, k_q: usize) -> Result<CoefficientLaw, HarnessError> {
        let k_q = self.k_q.unwrap_or(k_q);
        Ok(match self.sigma {
            SigmaRule::Zero => {
                CoefficientLaw::unchecked(self.alpha_min, self.alpha_max, n, self.rho, self.c_tilde, self.sigma, k_q)?
            }
            rule => CoefficientLaw::new(self.alpha_min, self.alpha_max, n, self.rho, self.c_tilde, rule, k_q)?,
        })
    }
}

/// Constant radius or samples over the sector's angle range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Constant(f64),
    Samples(Vec<f64>),
}

impl ProfileSpec {
    fn build(&self, t0: f64, t1: f64) -> Result<RadialProfile<f64>, HarnessError> {
        Ok(match self {
            Self::Constant(r) => RadialProfile::constant(t0, t1, *r)?,
            Self::Samples(v) => RadialProfile::from_samples(t0, t1, v.clone())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DomainSpec {
    Rectangle { re_min: f64, re_max: f64, im_min: f64, im_max: f64 },
    Disk { center: [f64; 2], radius: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
    Sector {
        theta_min: f64,
        theta_max: f64,
        r_out: ProfileSpec,
        #[serde(default)]
        r_in: Option<ProfileSpec>,
    },
}

impl DomainSpec {
    pub fn build(&self) -> Result<SpectralDomain<f64>, HarnessError> {
        Ok(match self {
            Self::Rectangle { re_min, re_max, im_min, im_max } => {
                SpectralDomain::rectangle(*re_min, *re_max, *im_min, *im_max)
            }
            Self::Disk { center, radius } => {
                if !(*radius > 0.0) {
                    return Err(HarnessError::Config("disk radius must be positive".into()));
                }
                SpectralDomain::disk(C64::new(center[0], center[1]), *radius)
            }
            Self::Polygon { vertices } => {
                SpectralDomain::polygon(vertices.iter().map(|v| C64::new(v[0], v[1])).collect())?
            }
            Self::Sector { theta_min, theta_max, r_out, r_in } => {
                let outer = r_out.build(*theta_min, *theta_max)?;
                let inner = r_in.as_ref().map(|p| p.build(*theta_min, *theta_max)).transpose()?;
                SpectralDomain::sector(*theta_min, *theta_max, inner, outer)?
            }
        })
    }
}

fn default_gamma1() -> f64 {
    0.25
}
fn default_n0() -> f64 {
    10.0
}
fn default_c_k() -> f64 {
    2.0
}
fn default_quantile() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ExperimentSpec {
    Semiclassical {
        h_list: Vec<f64>,
        trials: usize,
        #[serde(default = "default_gamma1")]
        gamma1: f64,
        #[serde(default = "default_n0")]
        n0: f64,
        /// Fixed coupling; the window midpoint when absent.
        #[serde(default)]
        delta: Option<f64>,
        #[serde(default = "default_c_k")]
        c_k: f64,
        /// Quantile of `|N - W| / s(h)` at the coarsest `h` defining `Ĉ`.
        #[serde(default = "default_quantile")]
        envelope_quantile: f64,
    },
    Highenergy {
        lambda_list: Vec<f64>,
        trials: usize,
        /// Highest perturbation order; `alpha_max` of the law when absent.
        #[serde(default)]
        alpha1: Option<usize>,
        #[serde(default = "default_gamma1")]
        gamma1: f64,
        #[serde(default = "default_c_k")]
        c_k: f64,
        #[serde(default = "default_quantile")]
        envelope_quantile: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub symbol: SymbolSpec,
    pub perturbation: PerturbationSpec,
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|source| HarnessError::Json { path: path.to_path_buf(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Shape, law and mode-specific hypothesis checks that need no root search.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let s = self.symbol.build()?;
        for d in &self.domains {
            d.build()?;
        }
        let p = &self.perturbation;
        p.law(s.dim(), p.k_q.unwrap_or(0))?;
        match &self.experiment {
            None => {}
            Some(ExperimentSpec::Semiclassical { h_list, trials, gamma1, n0, delta, .. }) => {
                if !s.is_semiclassical() {
                    return Err(HarnessError::Config("semiclassical mode needs a semiclassical symbol".into()));
                }
                check_nonempty(h_list, *trials, "h_list")?;
                if p.alpha_max > s.order().saturating_sub(1) && s.order() > 0 {
                    return Err(HarnessError::Config("perturbation orders must stay below m".into()));
                }
                for &h in h_list {
                    if !(h > 0.0 && h < 1.0) {
                        return Err(HarnessError::Config(format!("h = {h} is outside (0, 1)")));
                    }
                    if delta.is_none() {
                        delta_window(h, p.rho, *gamma1, *n0)?;
                    }
                }
            }
            Some(ExperimentSpec::Highenergy { lambda_list, trials, alpha1, gamma1, .. }) => {
                if s.is_semiclassical() {
                    return Err(HarnessError::Config("highenergy mode needs a classical symbol".into()));
                }
                check_nonempty(lambda_list, *trials, "lambda_list")?;
                if lambda_list.iter().any(|&l| !(l >= 1.0)) {
                    return Err(HarnessError::Config("λ values must be at least 1".into()));
                }
                highenergy_conditions(s.order(), alpha1.unwrap_or(p.alpha_max), p.rho, *gamma1)?;
            }
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<SpectralDomain<f64>, HarnessError> {
        self.domains
            .first()
            .ok_or_else(|| HarnessError::Config("no domain given".into()))?
            .build()
    }
}

fn check_nonempty(list: &[f64], trials: usize, name: &str) -> Result<(), HarnessError> {
    if list.is_empty() {
        return Err(HarnessError::Config(format!("{name} is empty")));
    }
    if trials == 0 {
        return Err(HarnessError::Config("trials must be at least 1".into()));
    }
    Ok(())
}

/// `m - α₁ - ρ - 3/4 > 0`, and `m - α₁ > ρ + γ₁ + 1/2`.
pub fn highenergy_conditions(m: usize, alpha1: usize, rho: f64, gamma1: f64) -> Result<(), HarnessError> {
    let d = m as f64 - alpha1 as f64;
    if !(d - rho - 0.75 > 0.0) {
        return Err(HarnessError::HypothesisViolation(format!(
            "m - α₁ - ρ - 3/4 = {} must be positive (m = {m}, α₁ = {alpha1}, ρ = {rho})",
            d - rho - 0.75
        )));
    }
    if !(d > rho + gamma1 + 0.5) {
        return Err(HarnessError::WindowViolation(format!(
            "m - α₁ = {d} must exceed ρ + γ₁ + 1/2 = {}",
            rho + gamma1 + 0.5
        )));
    }
    Ok(())
}

/// `(h^{N₀}, h^{ρ+γ₁+1/2} (ln 1/h)^{-2})`.
pub fn delta_window(h: f64, rho: f64, gamma1: f64, n0: f64) -> Result<(f64, f64), HarnessError> {
    if !(h > 0.0 && h < 1.0) {
        return Err(HarnessError::Config(format!("h = {h} is outside (0, 1)")));
    }
    if !(gamma1 > 0.0) {
        return Err(HarnessError::Config(format!("γ₁ = {gamma1} must be positive")));
    }
    let lower = h.powf(n0);
    let upper = h.powf(rho + gamma1 + 0.5) / (1.0 / h).ln().powi(2);
    if lower >= upper {
        return Err(HarnessError::EmptyWindow { lower, upper });
    }
    Ok((lower, upper))
}

/// Geometric midpoint of [`delta_window`].
pub fn delta_midpoint(h: f64, rho: f64, gamma1: f64, n0: f64) -> Result<f64, HarnessError> {
    let (l, u) = delta_window(h, rho, gamma1, n0)?;
    Ok((l * u).sqrt())
}

// ---------------------------------------------------------------------------
// Fits and statistics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares of `log y` on `log s`.
pub fn fit_power_law(pairs: &[(f64, f64)]) -> Result<PowerFit, HarnessError> {
    if pairs.len() < 3 {
        return Err(HarnessError::DegenerateFit(format!("need at least 3 pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|&(s, y)| !(s > 0.0 && y > 0.0)) {
        return Err(HarnessError::DegenerateFit("all values must be positive".into()));
    }
    let pts: Vec<(f64, f64)> = pairs.iter().map(|&(s, y)| (s.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(HarnessError::DegenerateFit("all abscissae are equal".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerFit { slope, intercept, r_squared })
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// `h^{-1/2} |ln h|^{1/2}`.
pub fn semiclassical_scale(h: f64) -> f64 {
    h.powf(-0.5) * h.ln().abs().sqrt()
}

/// `λ^{1/(2m)} √(ln λ)`.
pub fn highenergy_scale(lambda: f64, m: usize) -> f64 {
    lambda.powf(0.5 / m as f64) * lambda.ln().max(0.0).sqrt()
}

// ---------------------------------------------------------------------------
// Records and reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub mode: String,
    pub h_or_lambda: f64,
    pub trial: u64,
    pub seed: u64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "W")]
    pub w: f64,
    pub residual: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub millis: u64,
    /// Count from the rescaled assembly (highenergy mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescaled_n: Option<usize>,
    #[serde(skip)]
    pub eigenvalues: Vec<C64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub h_or_lambda: f64,
    pub trials: usize,
    #[serde(rename = "W")]
    pub w: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub delta: f64,
    pub mean_n: f64,
    /// `mean N / W`.
    pub mean_ratio: f64,
    pub mean_abs_residual: f64,
    pub median_abs_residual: f64,
    pub q90_abs_residual: f64,
    /// Fraction of trials inside the fitted envelope.
    pub coverage: Option<f64>,
    /// Largest `Σ|q|` dropped by the truncation over the trials.
    pub dropped_mass: f64,
}

impl Aggregate {
    fn from_records(records: &[&TrialRecord], delta: f64, dropped_mass: f64) -> Self {
        let t = records.len();
        let abs: Vec<f64> = records.iter().map(|r| r.residual.abs()).collect();
        let w = records.first().map_or(0.0, |r| r.w);
        let mean_n = records.iter().map(|r| r.n as f64).sum::<f64>() / t as f64;
        Self {
            h_or_lambda: records.first().map_or(f64::NAN, |r| r.h_or_lambda),
            trials: t,
            w,
            k: records.first().map_or(0, |r| r.k),
            delta,
            mean_n,
            mean_ratio: mean_n / w,
            mean_abs_residual: abs.iter().sum::<f64>() / t as f64,
            median_abs_residual: quantile(&abs, 0.5),
            q90_abs_residual: quantile(&abs, 0.9),
            coverage: None,
            dropped_mass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// `Ĉ` with `|N - W| ≤ Ĉ · scale`.
    pub c_hat: f64,
    pub calibration: f64,
    pub quantile: f64,
    pub scale: String,
    /// Power fit of mean `|N - W|` against the parameter.
    pub exponent: Option<PowerFit>,
}

/// One `ω` followed along `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub trial: u64,
    pub relative_residuals: Vec<f64>,
    /// Non-increasing up to `monotone_tol`.
    pub non_increasing: bool,
    pub monotone_tol: f64,
    /// `C(ω)` with `|N - W| ≤ C(ω) + C̃ λ^{1/(2m)} √(ln λ)`.
    pub c_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicPiece {
    pub piece: String,
    #[serde(rename = "W")]
    pub w: f64,
    pub mean_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicSummary {
    pub lambda: f64,
    pub k0: u32,
    pub pieces: Vec<DyadicPiece>,
    /// `Σ W(piece) - W(λΓ)`.
    pub additivity_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: String,
    pub version: String,
    pub config: ExperimentConfig,
    /// Raw `∬ m_Γ dx dξ` per parameter point.
    pub measures: Vec<f64>,
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
    pub envelope: Option<Envelope>,
    #[serde(default)]
    pub trajectories: Vec<Trajectory>,
    #[serde(default)]
    pub c_tilde: Option<f64>,
    #[serde(default)]
    pub dyadic: Vec<DyadicSummary>,
    /// `(λ, trial)` pairs where the direct and rescaled counts differ.
    #[serde(default)]
    pub rescaling_mismatches: Vec<(f64, u64)>,
}

impl ExperimentReport {
    pub fn aggregate(&self, param: f64) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.h_or_lambda == param)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Record wall-clock per trial; off keeps `trials.csv` byte-stable.
    pub timing: bool,
    pub keep_eigenvalues: bool,
    pub weyl: WeylOptions<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { timing: false, keep_eigenvalues: false, weyl: WeylOptions::default() }
    }
}

fn elapsed(start: Option<Instant>) -> u64 {
    start.map_or(0, |t| t.elapsed().as_millis() as u64)
}

// ---------------------------------------------------------------------------
// Hypothesis checks

/// Sample points of `Γ` on a `grid × grid` lattice over its bounding box.
pub fn domain_samples(domain: &SpectralDomain<f64>, grid: usize, exclude_origin: f64) -> Vec<C64> {
    let (a, b, c, d) = domain.bounding_box();
    let mut out = Vec::new();
    for i in 0..grid {
        for j in 0..grid {
            let u = (i as f64 + 0.5) / grid as f64;
            let v = (j as f64 + 0.5) / grid as f64;
            let z = C64::new(a + (b - a) * u, c + (d - c) * v);
            if domain.contains(z) && z.norm() > exclude_origin {
                out.push(z);
            }
        }
    }
    out
}

/// Non-degenerate roots, `β = γ`, each plus-root paired with a minus-root at
/// the same base `x`, and `ξ ≠ 0`.
pub fn check_root_hypotheses(s: &MatrixSymbol<f64>, points: &[C64]) -> Result<(), HarnessError> {
    let opts = RootOptions::default();
    for &z in points {
        let inv = find_roots(s, z, &opts)?;
        if inv.degenerate {
            return Err(HarnessError::HypothesisViolation(format!("root inventory at z = {z} is degenerate")));
        }
        if inv.beta != inv.gamma {
            return Err(HarnessError::HypothesisViolation(format!(
                "β = {} differs from γ = {} at z = {z}",
                inv.beta, inv.gamma
            )));
        }
        for r in &inv.roots {
            if r.point.xi.abs() < 1e-8 {
                return Err(HarnessError::HypothesisViolation(format!("root with ξ = 0 at z = {z}, x = {}", r.point.x)));
            }
            let partner = inv
                .roots
                .iter()
                .any(|o| o.sign != r.sign && periodic_diff(o.point.x, r.point.x).abs() < 1e-6);
            if !partner {
                return Err(HarnessError::HypothesisViolation(format!(
                    "{} root at x = {} has no partner of opposite sign over the same x (z = {z})",
                    if r.sign == RootSign::Plus { "plus" } else { "minus" },
                    r.point.x
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Semiclassical experiment

/// Stream label of semiclassical trials at `h`.
pub fn semiclassical_label(h: f64) -> String {
    format!("semiclassical:h={h}")
}

pub const HIGHENERGY_LABEL: &str = "highenergy";

/// Counts of `P - δQ_ω` in `Γ` against `(1/2πh) ∬ m_Γ`, for each `h` and trial.
pub fn run_semiclassical(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport, HarnessError> {
    let Some(ExperimentSpec::Semiclassical { h_list, trials, gamma1, n0, delta, c_k, envelope_quantile }) =
        &cfg.experiment
    else {
        return Err(HarnessError::Config("experiment mode is not semiclassical".into()));
    };
    cfg.validate()?;
    let s = cfg.symbol.build()?;
    let domain = cfg.domain()?;
    check_root_hypotheses(&s, &domain_samples(&domain, 4, 0.0))?;

    let measure = weyl_measure(&s, &domain, &opts.weyl)?.value;
    let mut records = Vec::new();
    let mut aggregates = Vec::new();
    for &h in h_list {
        let d = match delta {
            Some(d) => *d,
            None => delta_midpoint(h, cfg.perturbation.rho, *gamma1, *n0)?,
        };
        let trunc = FourierTruncation::rule(&s, domain.sup_abs(), h, *c_k)?;
        let w = measure / (std::f64::consts::TAU * h);
        let p = assemble_operator(&s, &trunc)?;
        let law = cfg.perturbation.law(s.dim(), 2 * trunc.k_max)?;
        let label = semiclassical_label(h);
        let rows: Result<Vec<(TrialRecord, f64)>, HarnessError> = (0..*trials as u64)
            .into_par_iter()
            .map(|t| {
                let start = opts.timing.then(Instant::now);
                let (m, dropped) = if d == 0.0 {
                    (p.clone(), 0.0)
                } else {
                    let draw = sample_draw(&law, &SeedSpec::new(cfg.seed, label.clone(), t), h);
                    let q = assemble_perturbation(&draw, &trunc, d)?;
                    (p.minus_perturbation(&q)?, q.dropped_mass)
                };
                let (n, eigs) = count_spectrum(&m, &domain, opts.keep_eigenvalues)?;
                Ok((
                    TrialRecord {
                        mode: "semiclassical".into(),
                        h_or_lambda: h,
                        trial: t,
                        seed: cfg.seed,
                        n,
                        w,
                        residual: n as f64 - w,
                        k: trunc.k_max,
                        millis: elapsed(start),
                        rescaled_n: None,
                        eigenvalues: eigs,
                    },
                    dropped,
                ))
            })
            .collect();
        let rows = rows?;
        let dropped = rows.iter().map(|r| r.1).fold(0.0, f64::max);
        let recs: Vec<TrialRecord> = rows.into_iter().map(|r| r.0).collect();
        aggregates.push(Aggregate::from_records(&recs.iter().collect::<Vec<_>>(), d, dropped));
        records.extend(recs);
    }

    let envelope = fit_envelope(&records, &mut aggregates, *envelope_quantile, semiclassical_scale, "h^{-1/2}|ln h|^{1/2}", true);
    Ok(ExperimentReport {
        mode: "semiclassical".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        measures: vec![measure; h_list.len()],
        records,
        aggregates,
        envelope,
        trajectories: Vec::new(),
        c_tilde: None,
        dyadic: Vec::new(),
        rescaling_mismatches: Vec::new(),
    })
}

fn count_spectrum(
    m: &OperatorMatrix<f64>,
    domain: &SpectralDomain<f64>,
    keep: bool,
) -> Result<(usize, Vec<C64>), HarnessError> {
    let mut eigs = eigenvalues(m)?;
    let n = count_in(&eigs, domain);
    if keep {
        sort_spectrum(&mut eigs);
        Ok((n, eigs))
    } else {
        Ok((n, Vec::new()))
    }
}

/// `Ĉ` from the coarsest parameter (largest `h`, or smallest `λ` when
/// `coarse_is_max` is false), then coverage at every parameter point.
fn fit_envelope(
    records: &[TrialRecord],
    aggregates: &mut [Aggregate],
    q: f64,
    scale: impl Fn(f64) -> f64,
    name: &str,
    coarse_is_max: bool,
) -> Option<Envelope> {
    let params: Vec<f64> = aggregates.iter().map(|a| a.h_or_lambda).collect();
    let calibration = if coarse_is_max {
        params.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        params.iter().copied().fold(f64::INFINITY, f64::min)
    };
    if !calibration.is_finite() {
        return None;
    }
    let ratios: Vec<f64> = records
        .iter()
        .filter(|r| r.h_or_lambda == calibration)
        .map(|r| r.residual.abs() / scale(r.h_or_lambda))
        .collect();
    let c_hat = quantile(&ratios, q);
    for a in aggregates.iter_mut() {
        let s = scale(a.h_or_lambda);
        let inside = records
            .iter()
            .filter(|r| r.h_or_lambda == a.h_or_lambda)
            .filter(|r| r.residual.abs() <= c_hat * s)
            .count();
        a.coverage = Some(inside as f64 / a.trials as f64);
    }
    let pairs: Vec<(f64, f64)> = aggregates.iter().map(|a| (a.h_or_lambda, a.mean_abs_residual)).collect();
    Some(Envelope {
        c_hat,
        calibration,
        quantile: q,
        scale: name.into(),
        exponent: fit_power_law(&pairs).ok(),
    })
}

// ---------------------------------------------------------------------------
// High-energy experiment

/// `ω` drawn once per trajectory and reused for every `λ`; counts of the
/// truncated `P - Q_ω` in `λΓ` against `(1/2π) ∬ m_{λΓ}`.
pub fn run_highenergy(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport, HarnessError> {
    let Some(ExperimentSpec::Highenergy { lambda_list, trials, c_k, envelope_quantile, .. }) = &cfg.experiment else {
        return Err(HarnessError::Config("experiment mode is not highenergy".into()));
    };
    cfg.validate()?;
    let s = cfg.symbol.build()?;
    let m = s.order();
    let domain = cfg.domain()?;
    if !matches!(domain, SpectralDomain::AnnularSector { r_in: None, .. }) {
        return Err(HarnessError::Config("highenergy mode needs a sector Γ(0, r_out)".into()));
    }
    let principal = s.principal_part();
    check_root_hypotheses(&principal, &domain_samples(&domain, 4, 0.2))?;

    let mut lambdas = lambda_list.clone();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let base_window = principal.xi_window(domain.sup_abs());
    let inv_m = 1.0 / m as f64;

    // per-λ setup shared by all trajectories
    struct Level {
        lambda: f64,
        h: f64,
        k: usize,
        big: SpectralDomain<f64>,
        p1: OperatorMatrix<f64>,
        ph: OperatorMatrix<f64>,
        w: f64,
        measure: f64,
        pieces: Vec<(String, SpectralDomain<f64>, f64)>,
        k0: u32,
    }
    let mut levels = Vec::new();
    for &lambda in &lambdas {
        let h = lambda.powf(-inv_m);
        let rescaled = s.semiclassical_rescaling(h);
        let k = FourierTruncation::rule(&rescaled, domain.sup_abs(), h, *c_k)?.k_max;
        let t1 = FourierTruncation::new(k, s.dim(), 1.0)?;
        let th = FourierTruncation::new(k, s.dim(), h)?;
        let big = domain.dilate(lambda)?;
        let wopts = WeylOptions { xi_window: Some(base_window * lambda.powf(inv_m)), ..opts.weyl };
        let measure = weyl_measure(&principal, &big, &wopts)?.value;
        let dy = dyadic_decompose(lambda, &domain)?;
        let mut pieces = Vec::new();
        for (name, piece) in dy.descriptors().into_iter().zip(dy.pieces()) {
            let pm = weyl_measure(&principal, piece, &wopts)?.value;
            pieces.push((name, piece.clone(), pm / std::f64::consts::TAU));
        }
        levels.push(Level {
            lambda,
            h,
            k,
            big,
            p1: assemble_operator(&s, &t1)?,
            ph: assemble_operator(&rescaled, &th)?,
            w: measure / std::f64::consts::TAU,
            measure,
            pieces,
            k0: dy.k0,
        });
    }
    let k_top = levels.iter().map(|l| l.k).max().unwrap_or(0);
    let law = cfg.perturbation.law(s.dim(), 2 * k_top)?;

    type TrialOut = (Vec<TrialRecord>, Vec<Vec<usize>>, Vec<f64>);
    let per_trial: Result<Vec<TrialOut>, HarnessError> = (0..*trials as u64)
        .into_par_iter()
        .map(|t| {
            let draw = sample_draw(&law, &SeedSpec::new(cfg.seed, HIGHENERGY_LABEL, t), 1.0);
            let mut recs = Vec::new();
            let mut piece_counts = Vec::new();
            let mut dropped = Vec::new();
            for lv in &levels {
                let start = opts.timing.then(Instant::now);
                let q1 = assemble_perturbation(&draw, &lv.p1.trunc, 1.0)?;
                let m1 = lv.p1.minus_perturbation(&q1)?;
                let h = lv.h;
                let qh = assemble_perturbation_weighted(&draw, &lv.ph.trunc, |a| h.powi((m - a) as i32))?;
                let mh = lv.ph.minus_perturbation(&qh)?;
                let eig1 = eigenvalues(&m1)?;
                let n = count_in(&eig1, &lv.big);
                let nh = count_in(&eigenvalues(&mh)?, &domain);
                piece_counts.push(lv.pieces.iter().map(|(_, d, _)| count_in(&eig1, d)).collect());
                dropped.push(q1.dropped_mass);
                let mut eigs = Vec::new();
                if opts.keep_eigenvalues {
                    eigs = eig1;
                    sort_spectrum(&mut eigs);
                }
                recs.push(TrialRecord {
                    mode: "highenergy".into(),
                    h_or_lambda: lv.lambda,
                    trial: t,
                    seed: cfg.seed,
                    n,
                    w: lv.w,
                    residual: n as f64 - lv.w,
                    k: lv.k,
                    millis: elapsed(start),
                    rescaled_n: Some(nh),
                    eigenvalues: eigs,
                });
            }
            Ok((recs, piece_counts, dropped))
        })
        .collect();
    let per_trial = per_trial?;

    // records sorted by (λ, trial)
    let mut records = Vec::new();
    let mut aggregates = Vec::new();
    let mut dyadic = Vec::new();
    let mut mismatches = Vec::new();
    for (li, lv) in levels.iter().enumerate() {
        let recs: Vec<&TrialRecord> = per_trial.iter().map(|p| &p.0[li]).collect();
        let dropped = per_trial.iter().map(|p| p.2[li]).fold(0.0, f64::max);
        aggregates.push(Aggregate::from_records(&recs, 1.0, dropped));
        for r in &recs {
            if r.rescaled_n != Some(r.n) {
                mismatches.push((lv.lambda, r.trial));
            }
        }
        records.extend(recs.into_iter().cloned());
        let pieces: Vec<DyadicPiece> = lv
            .pieces
            .iter()
            .enumerate()
            .map(|(pi, (name, _, w))| DyadicPiece {
                piece: name.clone(),
                w: *w,
                mean_n: per_trial.iter().map(|p| p.1[li][pi] as f64).sum::<f64>() / per_trial.len() as f64,
            })
            .collect();
        let gap = pieces.iter().map(|p| p.w).sum::<f64>() - lv.w;
        dyadic.push(DyadicSummary { lambda: lv.lambda, k0: lv.k0, pieces, additivity_gap: gap });
    }

    let scale = |l: f64| highenergy_scale(l, m);
    let envelope =
        fit_envelope(&records, &mut aggregates, *envelope_quantile, scale, "λ^{1/(2m)}√(ln λ)", false);

    // one C̃ pooled over all trajectories, then C(ω) per trajectory
    let ratios: Vec<f64> = records
        .iter()
        .filter(|r| scale(r.h_or_lambda) > 0.0)
        .map(|r| r.residual.abs() / scale(r.h_or_lambda))
        .collect();
    let c_tilde = (!ratios.is_empty()).then(|| quantile(&ratios, *envelope_quantile));
    let monotone_tol = 2.0 * opts.weyl.tol_rel;
    let trajectories = per_trial
        .iter()
        .map(|(recs, _, _)| {
            let rel: Vec<f64> = recs.iter().map(|r| relative_residual(r.n, r.w)).collect();
            let non_increasing = rel.windows(2).all(|w| w[1] <= w[0] + monotone_tol);
            let c_omega = recs
                .iter()
                .map(|r| (r.residual.abs() - c_tilde.unwrap_or(0.0) * scale(r.h_or_lambda)).max(0.0))
                .fold(0.0, f64::max);
            Trajectory { trial: recs[0].trial, relative_residuals: rel, non_increasing, monotone_tol, c_omega }
        })
        .collect();

    Ok(ExperimentReport {
        mode: "highenergy".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        measures: levels.iter().map(|l| l.measure).collect(),
        records,
        aggregates,
        envelope,
        trajectories,
        c_tilde,
        dyadic,
        rescaling_mismatches: mismatches,
    })
}

/// `|N - W| / W`, infinite when `W = 0 < N`.
pub fn relative_residual(n: usize, w: f64) -> f64 {
    let d = (n as f64 - w).abs();
    if w > 0.0 {
        d / w
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Dispatch on the configured mode.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport, HarnessError> {
    match cfg.experiment {
        Some(ExperimentSpec::Semiclassical { .. }) => run_semiclassical(cfg, opts),
        Some(ExperimentSpec::Highenergy { .. }) => run_highenergy(cfg, opts),
        None => Err(HarnessError::Config("config has no experiment section".into())),
    }
}

// ---------------------------------------------------------------------------
// Output

pub const TRIALS_HEADER: [&str; 9] = ["mode", "h_or_lambda", "trial", "seed", "N", "W", "residual", "K", "millis"];

/// `trials.csv` with a fixed header, one row per record.
pub fn write_trials_csv<W: std::io::Write>(records: &[TrialRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRIALS_HEADER)?;
    for r in records {
        w.write_record([
            r.mode.clone(),
            r.h_or_lambda.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            r.n.to_string(),
            r.w.to_string(),
            r.residual.to_string(),
            r.k.to_string(),
            r.millis.to_string(),
        ])?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

/// `trials.csv`, `summary.json`, and `eigenvalues_<param>_<trial>.csv` per
/// record when `dump_eigs` is set.
pub fn write_report(report: &ExperimentReport, out_dir: &Path, dump_eigs: bool) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();

    let trials = out_dir.join("trials.csv");
    let mut buf = Vec::new();
    write_trials_csv(&report.records, &mut buf)?;
    fs::write(&trials, buf).map_err(io_err(&trials))?;
    written.push(trials);

    let summary = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|source| HarnessError::Json { path: summary.clone(), source })?;
    fs::write(&summary, json).map_err(io_err(&summary))?;
    written.push(summary);

    if dump_eigs {
        for r in &report.records {
            let path = out_dir.join(format!("eigenvalues_{}_{}.csv", r.h_or_lambda, r.trial));
            let mut text = String::from("re,im\n");
            for z in &r.eigenvalues {
                text.push_str(&format!("{},{}\n", z.re, z.im));
            }
            fs::write(&path, text).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn read_summary(path: &Path) -> Result<ExperimentReport, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json { path: path.to_path_buf(), source })
}
