//! Spectral domains `Γ ⊂ ℂ` and the phase-space measure `∬ m_Γ dx dξ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::num::{cx, Cplx, Real};
use crate::symbol::{MatrixSymbol, SymbolError};

/// Points within this distance of `∂Γ` count as inside.
pub const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("dilation factor must be positive and finite, got {0}")]
    NonPositiveLambda(f64),
    #[error("dyadic decomposition needs lambda >= 1, got {0}")]
    LambdaBelowOne(f64),
    #[error("invalid radial profile: {0}")]
    InvalidProfile(String),
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("Weyl quadrature did not settle after {doublings} doublings (last delta {last_delta:e})")]
    NoConvergence { doublings: usize, last_delta: f64 },
    #[error(transparent)]
    Symbol(#[from] SymbolError),
}

/// Natural cubic spline through uniform samples of `r(θ)` on
/// `[theta_min, theta_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile<T: Real> {
    theta_min: T,
    theta_max: T,
    samples: Vec<T>,
    second: Vec<T>,
}

pub const DEFAULT_PROFILE_NODES: usize = 257;

impl<T: Real> RadialProfile<T> {
    pub fn from_samples(theta_min: T, theta_max: T, samples: Vec<T>) -> Result<Self, DomainError> {
        if !(theta_min < theta_max) {
            return Err(DomainError::InvalidProfile("theta_min must be below theta_max".into()));
        }
        if samples.len() < 2 {
            return Err(DomainError::InvalidProfile("need at least two samples".into()));
        }
        if samples.iter().any(|r| !r.is_finite() || *r < T::zero()) {
            return Err(DomainError::InvalidProfile("samples must be finite and nonnegative".into()));
        }
        let second = natural_spline_second_derivatives(&samples, (theta_max - theta_min) / T::from_usize_lossy(samples.len() - 1));
        Ok(Self { theta_min, theta_max, samples, second })
    }

    pub fn from_fn(theta_min: T, theta_max: T, nodes: usize, f: impl Fn(T) -> T) -> Result<Self, DomainError> {
        let nodes = nodes.max(2);
        let step = (theta_max - theta_min) / T::from_usize_lossy(nodes - 1);
        let samples = (0..nodes).map(|k| f(theta_min + step * T::from_usize_lossy(k))).collect();
        Self::from_samples(theta_min, theta_max, samples)
    }

    pub fn constant(theta_min: T, theta_max: T, r: T) -> Result<Self, DomainError> {
        Self::from_samples(theta_min, theta_max, vec![r, r])
    }

    pub fn theta_range(&self) -> (T, T) {
        (self.theta_min, self.theta_max)
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    fn step(&self) -> T {
        (self.theta_max - self.theta_min) / T::from_usize_lossy(self.samples.len() - 1)
    }

    /// Spline value; `θ` is clamped into the profile's range.
    pub fn eval(&self, theta: T) -> T {
        let t = theta.max(self.theta_min).min(self.theta_max);
        let step = self.step();
        let last = self.samples.len() - 2;
        let pos = (t - self.theta_min) / step;
        let i = pos.floor().to_usize().unwrap_or(0).min(last);
        let a = T::from_usize_lossy(i + 1) - pos;
        let b = T::one() - a;
        let six = T::lit(6.0);
        a * self.samples[i]
            + b * self.samples[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * step * step / six
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            theta_min: self.theta_min,
            theta_max: self.theta_max,
            samples: self.samples.iter().map(|&r| r * s).collect(),
            second: self.second.iter().map(|&r| r * s).collect(),
        }
    }

    pub fn min_sample(&self) -> T {
        self.samples.iter().copied().fold(T::infinity(), T::min)
    }

    /// Upper bound for the spline on its range, from a dense scan.
    pub fn sup(&self) -> T {
        let n = 8 * self.samples.len();
        let (lo, hi) = self.theta_range();
        (0..=n)
            .map(|k| self.eval(lo + (hi - lo) * T::from_usize_lossy(k) / T::from_usize_lossy(n)))
            .fold(T::zero(), T::max)
    }
}

fn natural_spline_second_derivatives<T: Real>(y: &[T], step: T) -> Vec<T> {
    let n = y.len();
    let mut m = vec![T::zero(); n];
    if n < 3 {
        return m;
    }
    // tridiagonal system for interior nodes: m[i-1] + 4 m[i] + m[i+1] = 6 Δ²y / step²
    let six = T::lit(6.0);
    let four = T::lit(4.0);
    let k = n - 2;
    let mut diag = vec![four; k];
    let mut rhs: Vec<T> = (1..n - 1).map(|i| six * (y[i + 1] - y[i] - y[i] + y[i - 1]) / (step * step)).collect();
    for i in 1..k {
        let w = T::one() / diag[i - 1];
        diag[i] -= w;
        let prev = rhs[i - 1];
        rhs[i] -= w * prev;
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
    }
    m
}

/// A region of the spectral plane.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectralDomain<T: Real> {
    /// Empty when either side has nonpositive length.
    Rectangle { re_min: T, re_max: T, im_min: T, im_max: T },
    Polygon { vertices: Vec<Cplx<T>> },
    Disk { center: Cplx<T>, radius: T },
    /// `{r e^{iθ} : θ ∈ [θ_min, θ_max], r_in(θ) ≤ r ≤ r_out(θ)}`; a missing
    /// inner profile means `r_in ≡ 0`.
    AnnularSector { theta_min: T, theta_max: T, r_in: Option<RadialProfile<T>>, r_out: RadialProfile<T> },
    Dilated { lambda: T, base: Box<SpectralDomain<T>> },
}

impl<T: Real> SpectralDomain<T> {
    pub fn rectangle(re_min: T, re_max: T, im_min: T, im_max: T) -> Self {
        Self::Rectangle { re_min, re_max, im_min, im_max }
    }

    pub fn disk(center: Cplx<T>, radius: T) -> Self {
        Self::Disk { center, radius }
    }

    pub fn polygon(vertices: Vec<Cplx<T>>) -> Result<Self, DomainError> {
        if vertices.len() < 3 {
            return Err(DomainError::InvalidDomain("polygon needs at least three vertices".into()));
        }
        Ok(Self::Polygon { vertices })
    }

    pub fn sector(
        theta_min: T,
        theta_max: T,
        r_in: Option<RadialProfile<T>>,
        r_out: RadialProfile<T>,
    ) -> Result<Self, DomainError> {
        if !(theta_min < theta_max) || theta_max - theta_min > T::TAU() {
            return Err(DomainError::InvalidDomain("sector needs theta_min < theta_max <= theta_min + 2π".into()));
        }
        if r_out.theta_range() != (theta_min, theta_max) {
            return Err(DomainError::InvalidProfile("outer profile range differs from the sector".into()));
        }
        if r_out.min_sample() <= T::zero() {
            return Err(DomainError::InvalidProfile("outer profile must be strictly positive".into()));
        }
        if let Some(inner) = &r_in {
            if inner.theta_range() != (theta_min, theta_max) {
                return Err(DomainError::InvalidProfile("inner profile range differs from the sector".into()));
            }
            let n = 4 * (inner.samples().len().max(r_out.samples().len()));
            for k in 0..=n {
                let t = theta_min + (theta_max - theta_min) * T::from_usize_lossy(k) / T::from_usize_lossy(n);
                if !(inner.eval(t) < r_out.eval(t)) {
                    return Err(DomainError::InvalidProfile("inner profile must stay below the outer one".into()));
                }
            }
        }
        Ok(Self::AnnularSector { theta_min, theta_max, r_in, r_out })
    }

    /// `{θ ∈ [θ_min, θ_max], a ≤ r ≤ b}` with constant radii.
    pub fn constant_sector(theta_min: T, theta_max: T, a: T, b: T) -> Result<Self, DomainError> {
        let r_in = if a > T::zero() { Some(RadialProfile::constant(theta_min, theta_max, a)?) } else { None };
        Self::sector(theta_min, theta_max, r_in, RadialProfile::constant(theta_min, theta_max, b)?)
    }

    pub fn contains(&self, z: Cplx<T>) -> bool {
        let tol = T::lit(BOUNDARY_TOL);
        match self {
            Self::Rectangle { re_min, re_max, im_min, im_max } => {
                re_min < re_max
                    && im_min < im_max
                    && z.re >= *re_min - tol
                    && z.re <= *re_max + tol
                    && z.im >= *im_min - tol
                    && z.im <= *im_max + tol
            }
            Self::Disk { center, radius } => (z - center).norm() <= *radius + tol,
            Self::Polygon { vertices } => polygon_contains(vertices, z, tol),
            Self::AnnularSector { theta_min, theta_max, r_in, r_out } => {
                let r = z.norm();
                if r <= tol {
                    return r_in.is_none();
                }
                let Some(theta) = angle_in_range(z.arg(), *theta_min, *theta_max, tol / r) else {
                    return false;
                };
                let inner = r_in.as_ref().map_or(T::zero(), |p| p.eval(theta));
                r >= inner - tol && r <= r_out.eval(theta) + tol
            }
            Self::Dilated { lambda, base } => base.contains(z / *lambda),
        }
    }

    /// `λΓ`; nested dilations are flattened.
    pub fn dilate(&self, lambda: T) -> Result<Self, DomainError> {
        if !(lambda > T::zero()) || !lambda.is_finite() {
            return Err(DomainError::NonPositiveLambda(lambda.to_f64_lossy()));
        }
        Ok(match self {
            Self::Dilated { lambda: mu, base } => Self::Dilated { lambda: lambda * *mu, base: base.clone() },
            other => Self::Dilated { lambda, base: Box::new(other.clone()) },
        })
    }

    /// `sup_{z ∈ Γ} |z|`.
    pub fn sup_abs(&self) -> T {
        match self {
            Self::Rectangle { re_min, re_max, im_min, im_max } => {
                let re = re_min.abs().max(re_max.abs());
                let im = im_min.abs().max(im_max.abs());
                re.hypot(im)
            }
            Self::Disk { center, radius } => center.norm() + *radius,
            Self::Polygon { vertices } => vertices.iter().map(|v| v.norm()).fold(T::zero(), T::max),
            Self::AnnularSector { r_out, .. } => r_out.sup(),
            Self::Dilated { lambda, base } => *lambda * base.sup_abs(),
        }
    }

    /// Axis-aligned bounding box `(re_min, re_max, im_min, im_max)`.
    pub fn bounding_box(&self) -> (T, T, T, T) {
        match self {
            Self::Rectangle { re_min, re_max, im_min, im_max } => (*re_min, *re_max, *im_min, *im_max),
            Self::Disk { center, radius } => {
                (center.re - *radius, center.re + *radius, center.im - *radius, center.im + *radius)
            }
            Self::Polygon { vertices } => vertices.iter().fold(
                (T::infinity(), T::neg_infinity(), T::infinity(), T::neg_infinity()),
                |(a, b, c, d), v| (a.min(v.re), b.max(v.re), c.min(v.im), d.max(v.im)),
            ),
            Self::AnnularSector { .. } => {
                let r = self.sup_abs();
                (-r, r, -r, r)
            }
            Self::Dilated { lambda, base } => {
                let (a, b, c, d) = base.bounding_box();
                (a * *lambda, b * *lambda, c * *lambda, d * *lambda)
            }
        }
    }
}

/// Representative of `angle` in `[lo, lo + 2π)` if it lies in `[lo - tol, hi + tol]`.
fn angle_in_range<T: Real>(angle: T, lo: T, hi: T, tol: T) -> Option<T> {
    let tau = T::TAU();
    let mut a = lo + crate::num::wrap_two_pi(angle - lo);
    if a > hi + tol && a - tau >= lo - tol {
        a = a - tau;
    }
    if a >= lo - tol && a <= hi + tol {
        return Some(a);
    }
    // just below lo, wrapped to the top of the circle
    if (a - tau) >= lo - tol {
        return Some(lo);
    }
    None
}

fn polygon_contains<T: Real>(v: &[Cplx<T>], z: Cplx<T>, tol: T) -> bool {
    let n = v.len();
    let mut inside = false;
    for k in 0..n {
        let a = v[k];
        let b = v[(k + 1) % n];
        if segment_distance(a, b, z) <= tol {
            return true;
        }
        if (a.im > z.im) != (b.im > z.im) {
            let x = a.re + (z.im - a.im) * (b.re - a.re) / (b.im - a.im);
            if z.re < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn segment_distance<T: Real>(a: Cplx<T>, b: Cplx<T>, z: Cplx<T>) -> T {
    let d = b - a;
    let len2 = d.norm_sqr();
    if len2 == T::zero() {
        return (z - a).norm();
    }
    let t = (((z - a) * d.conj()).re / len2).max(T::zero()).min(T::one());
    (z - (a + d * t)).norm()
}

/// Decomposition of `Γ(0, λ r_out)` into `Γ(0,1)`, rings `2^k Γ(1,2)` and a cap.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadicPieces<T: Real> {
    pub core: SpectralDomain<T>,
    pub rings: Vec<SpectralDomain<T>>,
    pub cap: SpectralDomain<T>,
    pub k0: u32,
}

impl<T: Real> DyadicPieces<T> {
    pub fn pieces(&self) -> impl Iterator<Item = &SpectralDomain<T>> {
        std::iter::once(&self.core).chain(self.rings.iter()).chain(std::iter::once(&self.cap))
    }

    /// Short human-readable labels, one per piece, in [`Self::pieces`] order.
    pub fn descriptors(&self) -> Vec<String> {
        let mut out = vec!["G(0,1)".to_string()];
        for k in 0..self.k0 {
            out.push(format!("2^{k} G(1,2)"));
        }
        out.push(format!("2^{} G(1, lambda r_out / 2^{})", self.k0, self.k0));
        out
    }
}

/// Split the dilated sector `λ Γ(0, r_out)`; requires `r_in ≡ 0` and
/// `inf r_out = 1`.
pub fn dyadic_decompose<T: Real>(lambda: T, sector: &SpectralDomain<T>) -> Result<DyadicPieces<T>, DomainError> {
    if !(lambda >= T::one()) || !lambda.is_finite() {
        return Err(DomainError::LambdaBelowOne(lambda.to_f64_lossy()));
    }
    let SpectralDomain::AnnularSector { theta_min, theta_max, r_in: None, r_out } = sector else {
        return Err(DomainError::InvalidDomain("dyadic decomposition needs a sector with r_in = 0".into()));
    };
    if (r_out.min_sample() - T::one()).abs() > T::lit(1e-9) {
        return Err(DomainError::InvalidProfile("outer profile must have infimum 1".into()));
    }
    let (t0, t1) = (*theta_min, *theta_max);
    let mut k0 = lambda.log2().floor().to_u32().unwrap_or(0);
    // guard against log2 rounding at exact powers of two
    while T::lit(2.0).powi(k0 as i32 + 1) <= lambda {
        k0 += 1;
    }
    while k0 > 0 && T::lit(2.0).powi(k0 as i32) > lambda {
        k0 -= 1;
    }
    let two_k0 = T::lit(2.0).powi(k0 as i32);
    let core = SpectralDomain::constant_sector(t0, t1, T::zero(), T::one())?;
    let ring = SpectralDomain::constant_sector(t0, t1, T::one(), T::lit(2.0))?;
    let rings = (0..k0)
        .map(|k| ring.dilate(T::lit(2.0).powi(k as i32)))
        .collect::<Result<Vec<_>, _>>()?;
    let cap_base = SpectralDomain::AnnularSector {
        theta_min: t0,
        theta_max: t1,
        r_in: Some(RadialProfile::constant(t0, t1, T::one())?),
        r_out: r_out.scaled(lambda / two_k0),
    };
    let cap = cap_base.dilate(two_k0)?;
    Ok(DyadicPieces { core, rings, cap, k0 })
}

// ---------------------------------------------------------------------------
// Weyl measure

#[derive(Debug, Clone, Copy)]
pub struct WeylOptions<T> {
    pub initial_grid: usize,
    pub max_doublings: usize,
    pub tol_rel: T,
    pub tol_abs: T,
    /// Overrides the ellipticity-derived `ξ` window.
    pub xi_window: Option<T>,
}

impl<T: Real> Default for WeylOptions<T> {
    fn default() -> Self {
        Self { initial_grid: 128, max_doublings: 6, tol_rel: T::lit(1e-3), tol_abs: T::lit(1e-6), xi_window: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeylMeasure<T> {
    pub value: T,
    pub last_delta: T,
    pub grid: usize,
    pub xi_window: T,
    /// `|value(2n) - value(n)|` for each doubling performed.
    pub deltas: Vec<T>,
}

/// `∬ m_Γ dx dξ` over `[0, 2π] × [-Ξ, Ξ]` by a stratified lattice rule with grid
/// doubling.
pub fn weyl_measure<T: Real>(
    s: &MatrixSymbol<T>,
    domain: &SpectralDomain<T>,
    opts: &WeylOptions<T>,
) -> Result<WeylMeasure<T>, DomainError> {
    let window = opts.xi_window.unwrap_or_else(|| s.xi_window(domain.sup_abs()));
    let mut n = opts.initial_grid.max(2);
    let mut prev = lattice_count(s, domain, window, n)?;
    let mut deltas = Vec::new();
    for _ in 0..opts.max_doublings {
        n *= 2;
        let value = lattice_count(s, domain, window, n)?;
        let delta = (value - prev).abs();
        deltas.push(delta);
        if delta < opts.tol_abs.max(opts.tol_rel * value.abs()) {
            return Ok(WeylMeasure { value, last_delta: delta, grid: n, xi_window: window, deltas });
        }
        prev = value;
    }
    let last = deltas.last().copied().unwrap_or_else(T::nan);
    Err(DomainError::NoConvergence { doublings: opts.max_doublings, last_delta: last.to_f64_lossy() })
}

/// Sub-cell positions used per `x` row.
const STRATA: usize = 16;

/// Stratified lattice rule on an `n × n` cell grid; the integer counts are
/// summed exactly. Each cell is sampled once, at an `x` offset drawn from
/// `STRATA` fixed sub-positions and a `ξ` offset shifted per row, both by
/// Weyl sequences, so straight boundaries along grid lines do not bias the
/// sum coherently.
pub fn lattice_count<T: Real>(
    s: &MatrixSymbol<T>,
    domain: &SpectralDomain<T>,
    window: T,
    n: usize,
) -> Result<T, DomainError> {
    const A1: f64 = 0.618_033_988_749_894_8;
    const A2: f64 = 0.754_877_666_246_692_7;
    const A3: f64 = 0.569_840_290_998_053_2;
    let dx = T::TAU() / T::from_usize_lossy(n);
    let dxi = (window + window) / T::from_usize_lossy(n);
    let rows: Result<Vec<u64>, SymbolError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let fibers: Vec<_> = (0..STRATA)
                .map(|l| {
                    let u = (l as f64 + 0.5) / STRATA as f64;
                    s.fiber(dx * (T::from_usize_lossy(i) + T::lit(u)))
                })
                .collect();
            let v = T::lit((0.5 + i as f64 * A3).fract());
            let mut count = 0u64;
            for j in 0..n {
                let l = (((j as f64 * A1 + i as f64 * A2).fract()) * STRATA as f64) as usize;
                let xi = -window + dxi * (T::from_usize_lossy(j) + v);
                count += count_matrix_in(&fibers[l.min(STRATA - 1)].eval(xi), domain)? as u64;
            }
            Ok(count)
        })
        .collect();
    let total: u64 = rows?.iter().sum();
    Ok(T::from_u64(total).unwrap_or_else(T::nan) * dx * dxi)
}

/// Eigenvalues of a small matrix counted in `Γ`; closed forms for `n ≤ 2`.
pub(crate) fn count_matrix_in<T: Real>(
    p: &linalg::CMatrix<T>,
    domain: &SpectralDomain<T>,
) -> Result<usize, SymbolError> {
    match p.rows() {
        1 => Ok(domain.contains(p[(0, 0)]) as usize),
        2 => {
            let (a, b, c, d) = (p[(0, 0)], p[(0, 1)], p[(1, 0)], p[(1, 1)]);
            let half = T::lit(0.5);
            let mean = (a + d) * half;
            let disc = ((a - d) * (a - d) * cx(T::lit(0.25), T::zero()) + b * c).sqrt();
            Ok(domain.contains(mean + disc) as usize + domain.contains(mean - disc) as usize)
        }
        _ => Ok(linalg::eigenvalues(p)?.into_iter().filter(|z| domain.contains(*z)).count()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbol::fixtures::{f1, f4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI, TAU};

    fn c(re: f64, im: f64) -> Cplx<f64> {
        Cplx::new(re, im)
    }

    fn quarter_sector() -> SpectralDomain<f64> {
        SpectralDomain::constant_sector(0.0, FRAC_PI_2, 0.0, 1.0).unwrap()
    }

    #[test]
    fn contains_examples() {
        assert!(SpectralDomain::rectangle(-1.0, 1.0, -1.0, 1.0).contains(c(0.0, 0.0)));
        let s = quarter_sector();
        assert!(s.contains(Cplx::from_polar(0.5, FRAC_PI_4)));
        assert!(!s.contains(Cplx::from_polar(0.5, PI)));
        assert!(!s.contains(Cplx::from_polar(1.5, FRAC_PI_4)));
        let d = s.dilate(2.0).unwrap();
        let z = Cplx::from_polar(1.5, FRAC_PI_4);
        assert_eq!(d.contains(z), s.contains(z / 2.0));
        assert!(d.contains(z));
    }

    #[test]
    fn boundary_points_are_inside() {
        assert!(SpectralDomain::rectangle(-1.0, 1.0, -1.0, 1.0).contains(c(1.0, 0.3)));
        assert!(SpectralDomain::disk(c(0.0, 0.0), 1.0).contains(c(0.0, 1.0)));
        assert!(quarter_sector().contains(c(1.0, 0.0)));
        assert!(quarter_sector().contains(c(0.0, 0.0)));
        let tri = SpectralDomain::polygon(vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 1.0)]).unwrap();
        assert!(tri.contains(c(0.5, 0.5)));
        assert!(tri.contains(c(0.2, 0.2)));
        assert!(!tri.contains(c(0.6, 0.6)));
    }

    #[test]
    fn empty_rectangle_contains_nothing() {
        let e = SpectralDomain::rectangle(1.0, 1.0, 0.0, 1.0);
        assert!(!e.contains(c(1.0, 0.5)));
    }

    #[test]
    fn dilate_rules() {
        let g = SpectralDomain::polygon(vec![c(0.1, 0.0), c(1.0, 0.2), c(0.4, 0.9)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = g.dilate(1.0).unwrap();
        let six = g.dilate(6.0).unwrap();
        let two_three = g.dilate(2.0).unwrap().dilate(3.0).unwrap();
        for _ in 0..1000 {
            let z = c(rng.gen_range(-1.0..7.0), rng.gen_range(-1.0..7.0));
            assert_eq!(one.contains(z), g.contains(z));
            assert_eq!(six.contains(z), two_three.contains(z));
        }
        assert!(matches!(g.dilate(0.0), Err(DomainError::NonPositiveLambda(_))));
        assert!(matches!(g.dilate(-1.0), Err(DomainError::NonPositiveLambda(_))));
    }

    #[test]
    fn dilated_area_by_sampling() {
        let g = SpectralDomain::rectangle(0.0, 1.0, 0.0, 1.0).dilate(2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200_000;
        let hits = (0..n).filter(|_| g.contains(c(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)))).count();
        let area = 16.0 * hits as f64 / n as f64;
        assert!((area - 4.0).abs() < 0.05, "{area}");
    }

    #[test]
    fn spline_reproduces_smooth_profile() {
        let p = RadialProfile::from_fn(0.0, 1.0, DEFAULT_PROFILE_NODES, |t: f64| 1.0 + 0.3 * t.sin()).unwrap();
        for k in 0..100 {
            let t = k as f64 / 99.0;
            assert!((p.eval(t) - (1.0 + 0.3 * t.sin())).abs() < 1e-7);
        }
        assert!(RadialProfile::from_samples(1.0, 0.0, vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn dyadic_examples() {
        let s = quarter_sector();
        let d = dyadic_decompose(10.0, &s).unwrap();
        assert_eq!(d.k0, 3);
        assert_eq!(d.rings.len(), 3);
        assert_eq!(d.pieces().count(), 5);
        let d1 = dyadic_decompose(1.0, &s).unwrap();
        assert_eq!((d1.k0, d1.rings.len()), (0, 0));
        assert_eq!(dyadic_decompose(8.0, &s).unwrap().k0, 3);
        assert!(matches!(dyadic_decompose(0.5, &s), Err(DomainError::LambdaBelowOne(_))));
    }

    #[test]
    fn dyadic_pieces_partition() {
        let s = quarter_sector();
        let lambda = 10.0;
        let d = dyadic_decompose(lambda, &s).unwrap();
        let whole = s.dilate(lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 10_000 {
            let r = rng.gen_range(0.0..lambda);
            let t = rng.gen_range(0.0..FRAC_PI_2);
            let near_edge = [1.0, 2.0, 4.0, 8.0].iter().any(|e| (r - e).abs() < 1e-9);
            if near_edge {
                continue;
            }
            let z = Cplx::from_polar(r, t);
            assert!(whole.contains(z));
            assert_eq!(d.pieces().filter(|p| p.contains(z)).count(), 1, "r = {r}");
            checked += 1;
        }
    }

    #[test]
    fn weyl_measure_f1_square() {
        let g = SpectralDomain::rectangle(-0.5, 0.5, -0.5, 0.5);
        let w = weyl_measure(&f1::<f64>(), &g, &WeylOptions::default()).unwrap();
        let exact = TAU / 3.0;
        assert!((w.value - exact).abs() < 5e-3 * exact, "{} vs {exact}", w.value);
    }

    #[test]
    fn weyl_measure_empty_domain() {
        let g = SpectralDomain::rectangle(0.0, 0.0, 0.0, 0.0);
        assert_eq!(weyl_measure(&f1::<f64>(), &g, &WeylOptions::default()).unwrap().value, 0.0);
    }

    #[test]
    fn weyl_measure_f4_sector() {
        let (t1, t2) = (FRAC_PI_4, FRAC_PI_2);
        let g = SpectralDomain::constant_sector(t1, t2, 0.0, 1.0).unwrap();
        let opts = WeylOptions { xi_window: Some(1.5), ..WeylOptions::default() };
        let w = weyl_measure(&f4::<f64>(), &g, &opts).unwrap();
        assert!((w.value - 2.0 * (t2 - t1)).abs() < 1e-2 * 2.0 * (t2 - t1), "{}", w.value);
    }
}
