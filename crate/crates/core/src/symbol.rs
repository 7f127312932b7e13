//! Matrix symbols `p(x, ξ) = Σ_α A_α(x) ξ^α` on `T*S¹`, the scalarization
//! `q_z = det(p - z)`, and the classification of its real zeros by the sign of
//! the Poisson bracket `(1/2i){q_z, q̄_z}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domains::SpectralDomain;
use crate::linalg::{self, adjugate, det, CMatrix};
use crate::num::{cis, cone, cx, czero, periodic_diff, wrap_two_pi, Cplx, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymbolError {
    #[error("leading coefficient is not elliptic: smallest singular value {sigma_min:e} at x = {x}")]
    NotElliptic { x: f64, sigma_min: f64 },
    #[error("invalid symbol shape: {0}")]
    InvalidShape(String),
    #[error("Newton refinement failed to converge from seed (x = {x}, xi = {xi})")]
    NonConvergence { x: f64, xi: f64 },
    #[error("q_z vanishes on the contour near (x = {x}, xi = {xi}), |q| = {modulus:e}")]
    ZeroOnContour { x: f64, xi: f64, modulus: f64 },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

// ---------------------------------------------------------------------------

/// Finite Fourier series `Σ_{|j| ≤ J} c_j e^{ijx}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigPolynomial<T: Real> {
    bandwidth: usize,
    coeffs: Vec<Cplx<T>>,
}

impl<T: Real> TrigPolynomial<T> {
    pub fn zero() -> Self {
        Self { bandwidth: 0, coeffs: vec![czero()] }
    }

    pub fn constant(c: Cplx<T>) -> Self {
        Self { bandwidth: 0, coeffs: vec![c] }
    }

    /// `c e^{ijx}`.
    pub fn monomial(j: i64, c: Cplx<T>) -> Self {
        Self::from_terms(&[(j, c)])
    }

    /// Build from `(frequency, coefficient)` pairs; repeated frequencies add up.
    pub fn from_terms(terms: &[(i64, Cplx<T>)]) -> Self {
        let bw = terms.iter().map(|(j, _)| j.unsigned_abs() as usize).max().unwrap_or(0);
        let mut coeffs = vec![czero(); 2 * bw + 1];
        for &(j, c) in terms {
            coeffs[(j + bw as i64) as usize] += c;
        }
        Self { bandwidth: bw, coeffs }.trimmed()
    }

    fn trimmed(mut self) -> Self {
        while self.bandwidth > 0
            && self.coeffs[0] == czero()
            && self.coeffs[self.coeffs.len() - 1] == czero()
        {
            self.coeffs.remove(0);
            self.coeffs.pop();
            self.bandwidth -= 1;
        }
        self
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    pub fn coefficient(&self, j: i64) -> Cplx<T> {
        let bw = self.bandwidth as i64;
        if j.abs() > bw {
            czero()
        } else {
            self.coeffs[(j + bw) as usize]
        }
    }

    /// Nonzero `(j, c_j)` pairs in increasing `j`.
    pub fn terms(&self) -> impl Iterator<Item = (i64, Cplx<T>)> + '_ {
        let bw = self.bandwidth as i64;
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != czero())
            .map(move |(idx, &c)| (idx as i64 - bw, c))
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == czero())
    }

    pub fn eval(&self, x: T) -> Cplx<T> {
        let bw = self.bandwidth as i64;
        let mut acc = czero();
        for (idx, &c) in self.coeffs.iter().enumerate() {
            if c != czero() {
                let j = idx as i64 - bw;
                acc += c * cis(T::from_i64_lossy(j) * x);
            }
        }
        acc
    }

    /// Exact derivative: `c_j -> i j c_j`.
    pub fn derivative(&self) -> Self {
        let bw = self.bandwidth as i64;
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(idx, &c)| c * cx(T::zero(), T::from_i64_lossy(idx as i64 - bw)))
            .collect();
        Self { bandwidth: self.bandwidth, coeffs }
    }

    /// Pointwise complex conjugate: `c_j -> conj(c_{-j})`.
    pub fn conj_function(&self) -> Self {
        let coeffs = self.coeffs.iter().rev().map(|c| c.conj()).collect();
        Self { bandwidth: self.bandwidth, coeffs }
    }

    pub fn scale(&self, s: Cplx<T>) -> Self {
        Self { bandwidth: self.bandwidth, coeffs: self.coeffs.iter().map(|&c| c * s).collect() }.trimmed()
    }

    pub fn add(&self, other: &Self) -> Self {
        let bw = self.bandwidth.max(other.bandwidth) as i64;
        let terms: Vec<(i64, Cplx<T>)> =
            (-bw..=bw).map(|j| (j, self.coefficient(j) + other.coefficient(j))).collect();
        Self::from_terms(&terms)
    }

    /// `Σ_j |c_j|`, an upper bound for the sup norm.
    pub fn abs_sum(&self) -> T {
        self.coeffs.iter().map(|c| c.norm()).sum()
    }
}

// ---------------------------------------------------------------------------

/// Where the coefficient sits relative to the derivative in each term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoefficientOrder {
    /// `A_α(x) (hD)^α`
    Left,
    /// `(hD)^α A_α(x)`, which is how formal adjoints come out.
    Right,
}

/// Point of `T*S¹` with `x` reduced into `[0, 2π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpacePoint<T> {
    pub x: T,
    pub xi: T,
}

impl<T: Real> PhaseSpacePoint<T> {
    pub fn new(x: T, xi: T) -> Self {
        Self { x: wrap_two_pi(x), xi }
    }

    /// Distance with `x` measured on the circle.
    pub fn distance(&self, other: &Self) -> T {
        periodic_diff(self.x, other.x).hypot(self.xi - other.xi)
    }
}

/// `n×n` matrix-valued polynomial in `ξ` of degree `m` with trigonometric
/// polynomial coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSymbol<T: Real> {
    n: usize,
    m: usize,
    /// `coeffs[α][i * n + j]`
    coeffs: Vec<Vec<TrigPolynomial<T>>>,
    semiclassical: bool,
    order: CoefficientOrder,
    leading_sigma_min: T,
}

const ELLIPTICITY_GRID: usize = 1024;

impl<T: Real> MatrixSymbol<T> {
    /// `coeffs[α]` holds the `n*n` entries of `A_α` in row-major order.
    pub fn new(
        n: usize,
        coeffs: Vec<Vec<TrigPolynomial<T>>>,
        semiclassical: bool,
    ) -> Result<Self, SymbolError> {
        Self::with_order(n, coeffs, semiclassical, CoefficientOrder::Left)
    }

    pub fn with_order(
        n: usize,
        coeffs: Vec<Vec<TrigPolynomial<T>>>,
        semiclassical: bool,
        order: CoefficientOrder,
    ) -> Result<Self, SymbolError> {
        if n == 0 {
            return Err(SymbolError::InvalidShape("system dimension must be at least 1".into()));
        }
        if coeffs.is_empty() {
            return Err(SymbolError::InvalidShape("need at least one coefficient layer".into()));
        }
        if let Some(bad) = coeffs.iter().position(|layer| layer.len() != n * n) {
            return Err(SymbolError::InvalidShape(format!(
                "coefficient layer {bad} has {} entries, expected {}",
                coeffs[bad].len(),
                n * n
            )));
        }
        let m = coeffs.len() - 1;
        let mut sym = Self { n, m, coeffs, semiclassical, order, leading_sigma_min: T::zero() };
        let (x_worst, smin) = sym.scan_leading_sigma_min();
        let scale = sym.coeffs[m].iter().map(TrigPolynomial::abs_sum).fold(T::zero(), T::max);
        if !(smin > T::lit(1e-10) * scale.max(T::one())) {
            return Err(SymbolError::NotElliptic { x: x_worst.to_f64_lossy(), sigma_min: smin.to_f64_lossy() });
        }
        sym.leading_sigma_min = smin;
        Ok(sym)
    }

    /// Scalar symbol `Σ_α a_α(x) ξ^α`.
    pub fn scalar(coeffs: Vec<TrigPolynomial<T>>, semiclassical: bool) -> Result<Self, SymbolError> {
        Self::new(1, coeffs.into_iter().map(|c| vec![c]).collect(), semiclassical)
    }

    fn scan_leading_sigma_min(&self) -> (T, T) {
        let mut worst = (T::zero(), T::infinity());
        for k in 0..ELLIPTICITY_GRID {
            let x = T::TAU() * T::from_usize_lossy(k) / T::from_usize_lossy(ELLIPTICITY_GRID);
            let a = self.layer_at(self.m, x);
            let s = if self.n == 1 {
                a[(0, 0)].norm()
            } else {
                linalg::singular_values(&a).last().copied().unwrap_or_else(T::zero)
            };
            if s < worst.1 {
                worst = (x, s);
            }
        }
        worst
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Differential order `m`.
    pub fn order(&self) -> usize {
        self.m
    }

    pub fn is_semiclassical(&self) -> bool {
        self.semiclassical
    }

    pub fn coefficient_order(&self) -> CoefficientOrder {
        self.order
    }

    pub fn coefficient(&self, alpha: usize, i: usize, j: usize) -> &TrigPolynomial<T> {
        &self.coeffs[alpha][i * self.n + j]
    }

    /// Largest Fourier bandwidth over all coefficients.
    pub fn bandwidth(&self) -> usize {
        self.coeffs.iter().flatten().map(TrigPolynomial::bandwidth).max().unwrap_or(0)
    }

    /// `min_x σ_min(A_m(x))` from the construction-time scan.
    pub fn leading_sigma_min(&self) -> T {
        self.leading_sigma_min
    }

    /// `‖A_α(x)‖₂ ≤ ‖(Σ_j |Â_α^{ik}(j)|)_{ik}‖_F`, uniformly in `x`.
    pub fn sup_norm_bound(&self, alpha: usize) -> T {
        self.coeffs[alpha].iter().map(|c| c.abs_sum().powi(2)).sum::<T>().sqrt()
    }

    /// Half-width of a `ξ` window outside which `p(x, ξ) - z` is invertible
    /// for every `|z| ≤ sup_abs_z`.
    pub fn xi_window(&self, sup_abs_z: T) -> T {
        if self.m == 0 {
            return T::one();
        }
        let lower: T = (0..self.m).map(|a| self.sup_norm_bound(a)).sum();
        let ratio = (sup_abs_z + lower) / self.leading_sigma_min;
        let best = (0..self.m)
            .map(|alpha_star| ratio.powf(T::one() / T::from_usize_lossy(self.m - alpha_star)))
            .fold(T::zero(), T::max);
        let two = T::lit(2.0);
        (two * best).max(T::lit(1e-3))
    }

    fn layer_at(&self, alpha: usize, x: T) -> CMatrix<T> {
        CMatrix::from_fn(self.n, self.n, |i, j| self.coeffs[alpha][i * self.n + j].eval(x))
    }

    fn layers_at(&self, x: T) -> Vec<CMatrix<T>> {
        (0..=self.m).map(|a| self.layer_at(a, x)).collect()
    }

    /// `Σ_α A_α(x) ξ^α` for complex `ξ`.
    pub fn eval_complex(&self, x: T, xi: Cplx<T>) -> CMatrix<T> {
        combine_layers(&self.layers_at(x), xi)
    }

    /// Principal symbol at a phase-space point.
    pub fn eval(&self, pt: PhaseSpacePoint<T>) -> CMatrix<T> {
        self.eval_complex(pt.x, cx(pt.xi, T::zero()))
    }

    /// `∂_x p` at complex `ξ`.
    pub fn eval_dx(&self, x: T, xi: Cplx<T>) -> CMatrix<T> {
        let layers: Vec<CMatrix<T>> = (0..=self.m)
            .map(|a| {
                CMatrix::from_fn(self.n, self.n, |i, j| self.coeffs[a][i * self.n + j].derivative().eval(x))
            })
            .collect();
        combine_layers(&layers, xi)
    }

    /// `∂_ξ p` at complex `ξ`.
    pub fn eval_dxi(&self, x: T, xi: Cplx<T>) -> CMatrix<T> {
        let layers = self.layers_at(x);
        derivative_layers(&layers, xi)
    }

    /// Eigenvalues of `p(x, ξ)` sorted by `(Re, Im)`.
    pub fn symbol_spectrum(&self, pt: PhaseSpacePoint<T>) -> Result<Vec<Cplx<T>>, SymbolError> {
        Ok(linalg::eigenvalues(&self.eval(pt))?)
    }

    /// `q_z(x, ξ) = det(p(x, ξ) - z)`.
    pub fn qz(&self, pt: PhaseSpacePoint<T>, z: Cplx<T>) -> Cplx<T> {
        det(&self.eval(pt).shifted(z))
    }

    /// `q_z` at a possibly complex fiber coordinate.
    pub fn qz_complex(&self, x: T, xi: Cplx<T>, z: Cplx<T>) -> Cplx<T> {
        det(&self.eval_complex(x, xi).shifted(z))
    }

    /// `(∂_x q_z, ∂_ξ q_z)` through `∂q = tr(adj(p - z) ∂p)`.
    pub fn qz_gradient(&self, pt: PhaseSpacePoint<T>, z: Cplx<T>) -> (Cplx<T>, Cplx<T>) {
        self.qz_gradient_complex(pt.x, cx(pt.xi, T::zero()), z)
    }

    pub fn qz_gradient_complex(&self, x: T, xi: Cplx<T>, z: Cplx<T>) -> (Cplx<T>, Cplx<T>) {
        let layers = self.layers_at(x);
        let p = combine_layers(&layers, xi).shifted(z);
        let adj = adjugate(&p);
        let dx = self.eval_dx(x, xi);
        let dxi = derivative_layers(&layers, xi);
        (trace_product(&adj, &dx), trace_product(&adj, &dxi))
    }

    /// `(1/2i){q_z, q̄_z} = (1/2i)(∂_ξq ∂_x q̄ - ∂_x q ∂_ξ q̄)`.
    pub fn poisson_bracket_indicator(&self, pt: PhaseSpacePoint<T>, z: Cplx<T>) -> T {
        self.bracket_with_residue(pt, z).0
    }

    /// The bracket evaluated literally in complex arithmetic, returning
    /// `(real value, discarded imaginary residue)`.
    pub fn bracket_with_residue(&self, pt: PhaseSpacePoint<T>, z: Cplx<T>) -> (T, T) {
        let (qx, qxi) = self.qz_gradient(pt, z);
        bracket_from_gradient(qx, qxi)
    }

    /// Formal adjoint: coefficients conjugate-transposed, order flipped.
    pub fn adjoint(&self) -> Self {
        let n = self.n;
        let coeffs = self
            .coeffs
            .iter()
            .map(|layer| {
                (0..n * n)
                    .map(|idx| {
                        let (i, j) = (idx / n, idx % n);
                        layer[j * n + i].conj_function()
                    })
                    .collect()
            })
            .collect();
        let order = match self.order {
            CoefficientOrder::Left => CoefficientOrder::Right,
            CoefficientOrder::Right => CoefficientOrder::Left,
        };
        Self { n, m: self.m, coeffs, semiclassical: self.semiclassical, order, leading_sigma_min: self.leading_sigma_min }
    }

    /// Classical principal part `A_m(x) ξ^m`.
    pub fn principal_part(&self) -> Self {
        let mut coeffs: Vec<Vec<TrigPolynomial<T>>> =
            (0..self.m).map(|_| vec![TrigPolynomial::zero(); self.n * self.n]).collect();
        coeffs.push(self.coeffs[self.m].clone());
        Self { coeffs, ..self.clone() }
    }

    /// Symbol of `h^m P = Σ A_α h^{m-α} (hD)^α`.
    pub fn semiclassical_rescaling(&self, h: T) -> Self {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(a, layer)| {
                let s = cx(h.powi((self.m - a) as i32), T::zero());
                layer.iter().map(|c| c.scale(s)).collect()
            })
            .collect();
        Self { coeffs, semiclassical: true, ..self.clone() }
    }

    /// Sum of two symbols with the same shape and coefficient order.
    pub fn add(&self, other: &Self) -> Result<Self, SymbolError> {
        if self.n != other.n || self.order != other.order {
            return Err(SymbolError::InvalidShape("symbols differ in dimension or coefficient order".into()));
        }
        let m = self.m.max(other.m);
        let zero_layer = vec![TrigPolynomial::zero(); self.n * self.n];
        let coeffs = (0..=m)
            .map(|a| {
                let l = self.coeffs.get(a).unwrap_or(&zero_layer);
                let r = other.coeffs.get(a).unwrap_or(&zero_layer);
                l.iter().zip(r).map(|(x, y)| x.add(y)).collect()
            })
            .collect();
        Self::with_order(self.n, coeffs, self.semiclassical, self.order)
    }

    /// `m_Γ(x, ξ)`: number of eigenvalues of `p(x, ξ)` inside `Γ`.
    pub fn count_m_gamma(&self, pt: PhaseSpacePoint<T>, domain: &SpectralDomain<T>) -> Result<usize, SymbolError> {
        Ok(self.symbol_spectrum(pt)?.iter().filter(|z| domain.contains(**z)).count())
    }

    /// Evaluation cache for repeated work on a fixed `x`.
    pub(crate) fn fiber(&self, x: T) -> Fiber<T> {
        Fiber { layers: self.layers_at(x) }
    }
}

/// Coefficient matrices frozen at one `x`.
pub(crate) struct Fiber<T: Real> {
    layers: Vec<CMatrix<T>>,
}

impl<T: Real> Fiber<T> {
    pub(crate) fn eval(&self, xi: T) -> CMatrix<T> {
        combine_layers(&self.layers, cx(xi, T::zero()))
    }
}

fn combine_layers<T: Real>(layers: &[CMatrix<T>], xi: Cplx<T>) -> CMatrix<T> {
    let n = layers[0].rows();
    let mut out = CMatrix::zeros(n, n);
    // Horner in ξ
    for layer in layers.iter().rev() {
        out = out.scale(xi).add(layer);
    }
    out
}

fn derivative_layers<T: Real>(layers: &[CMatrix<T>], xi: Cplx<T>) -> CMatrix<T> {
    let n = layers[0].rows();
    let mut out = CMatrix::zeros(n, n);
    for (a, layer) in layers.iter().enumerate().skip(1).rev() {
        out = out.scale(xi).add(&layer.scale_real(T::from_usize_lossy(a)));
    }
    out
}

fn trace_product<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> Cplx<T> {
    let n = a.rows();
    let mut s = czero();
    for i in 0..n {
        for k in 0..n {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

fn bracket_from_gradient<T: Real>(qx: Cplx<T>, qxi: Cplx<T>) -> (T, T) {
    let two_i = cx(T::zero(), T::lit(2.0));
    let v = (qxi * qx.conj() - qx * qxi.conj()) / two_i;
    (v.re, v.im)
}

// ---------------------------------------------------------------------------
// Roots of q_z

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RootSign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedRoot<T> {
    pub point: PhaseSpacePoint<T>,
    pub sign: RootSign,
    pub bracket: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootInventory<T> {
    pub z: (T, T),
    pub roots: Vec<ClassifiedRoot<T>>,
    pub beta: usize,
    pub gamma: usize,
    pub degenerate: bool,
}

impl<T: Real> RootInventory<T> {
    pub fn plus_roots(&self) -> impl Iterator<Item = &ClassifiedRoot<T>> {
        self.roots.iter().filter(|r| r.sign == RootSign::Plus)
    }

    pub fn minus_roots(&self) -> impl Iterator<Item = &ClassifiedRoot<T>> {
        self.roots.iter().filter(|r| r.sign == RootSign::Minus)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RootOptions<T> {
    pub grid_x: usize,
    pub grid_xi: usize,
    /// Residual tolerance relative to the grid scale of `|q_z|`.
    pub newton_tol: T,
    pub max_newton: usize,
    pub dedup_radius: T,
    /// `ε_Φ = phi_rel · (|∂_x q|² + |∂_ξ q|²)`.
    pub phi_rel: T,
    /// Overrides the ellipticity-derived `ξ` window.
    pub xi_window: Option<T>,
}

impl<T: Real> Default for RootOptions<T> {
    fn default() -> Self {
        Self {
            grid_x: 256,
            grid_xi: 256,
            newton_tol: T::lit(1e-13),
            max_newton: 100,
            dedup_radius: T::lit(1e-6),
            phi_rel: T::lit(1e-6),
            xi_window: None,
        }
    }
}

enum NewtonOutcome<T> {
    Converged(T, T),
    /// Last iterate.
    Failed(T, T),
}

fn newton_2d<T: Real>(
    s: &MatrixSymbol<T>,
    z: Cplx<T>,
    start: (T, T),
    tol: T,
    max_iter: usize,
    step_cap: T,
) -> NewtonOutcome<T> {
    let (mut x, mut xi) = start;
    let q_at = |x: T, xi: T| s.qz(PhaseSpacePoint { x, xi }, z);
    let mut q = q_at(x, xi);
    let tiny_step = T::lit(1e-15);
    for _ in 0..max_iter {
        if q.norm() <= tol {
            // polish once; keep the better point
            if let Some((dx, dxi)) = newton_step(s, z, x, xi, q) {
                let q2 = q_at(x + dx, xi + dxi);
                if q2.norm() <= q.norm() {
                    return NewtonOutcome::Converged(x + dx, xi + dxi);
                }
            }
            return NewtonOutcome::Converged(x, xi);
        }
        let Some((mut dx, mut dxi)) = newton_step(s, z, x, xi, q) else {
            return NewtonOutcome::Failed(x, xi);
        };
        let len = dx.hypot(dxi);
        if len > step_cap {
            dx = dx * step_cap / len;
            dxi = dxi * step_cap / len;
        }
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..40 {
            let qn = q_at(x + t * dx, xi + t * dxi);
            if qn.norm() < q.norm() {
                x = x + t * dx;
                xi = xi + t * dxi;
                q = qn;
                accepted = true;
                break;
            }
            t = t * T::lit(0.5);
        }
        if !accepted {
            return if q.norm() <= tol * T::lit(1e4) {
                NewtonOutcome::Converged(x, xi)
            } else {
                NewtonOutcome::Failed(x, xi)
            };
        }
        if (t * len) <= tiny_step * (T::one() + x.abs() + xi.abs()) {
            return if q.norm() <= tol * T::lit(1e4) {
                NewtonOutcome::Converged(x, xi)
            } else {
                NewtonOutcome::Failed(x, xi)
            };
        }
    }
    if q.norm() <= tol * T::lit(1e4) {
        NewtonOutcome::Converged(x, xi)
    } else {
        NewtonOutcome::Failed(x, xi)
    }
}

/// Newton direction for `(Re q, Im q) = 0`; least-squares direction when the
/// real Jacobian is (nearly) singular.
fn newton_step<T: Real>(s: &MatrixSymbol<T>, z: Cplx<T>, x: T, xi: T, q: Cplx<T>) -> Option<(T, T)> {
    let (qx, qxi) = s.qz_gradient(PhaseSpacePoint { x, xi }, z);
    let (a, b, c, d) = (qx.re, qxi.re, qx.im, qxi.im);
    let jdet = a * d - b * c;
    let scale = qx.norm_sqr() + qxi.norm_sqr();
    if scale == T::zero() {
        return None;
    }
    if jdet.abs() > T::lit(1e-12) * scale {
        let dx = -(d * q.re - b * q.im) / jdet;
        let dxi = -(-c * q.re + a * q.im) / jdet;
        Some((dx, dxi))
    } else {
        // Gauss-Newton on the rank-one part
        let gx = a * q.re + c * q.im;
        let gxi = b * q.re + d * q.im;
        let gn = gx * gx + gxi * gxi;
        if gn == T::zero() {
            return None;
        }
        let r2 = q.norm_sqr();
        Some((-gx * r2 / gn, -gxi * r2 / gn))
    }
}

/// All real zeros of `q_z` in the ellipticity window, classified.
pub fn find_roots<T: Real>(
    s: &MatrixSymbol<T>,
    z: Cplx<T>,
    opts: &RootOptions<T>,
) -> Result<RootInventory<T>, SymbolError> {
    let window = opts.xi_window.unwrap_or_else(|| s.xi_window(z.norm()));
    let nx = opts.grid_x.max(4);
    let nxi = opts.grid_xi.max(4);
    let dx = T::TAU() / T::from_usize_lossy(nx);
    let dxi = (window + window) / T::from_usize_lossy(nxi - 1);
    let xs: Vec<T> = (0..nx).map(|i| dx * T::from_usize_lossy(i)).collect();
    let xis: Vec<T> = (0..nxi).map(|j| -window + dxi * T::from_usize_lossy(j)).collect();

    // q on the node grid; x is periodic so the last column wraps to the first
    let grid: Vec<Vec<Cplx<T>>> = xs
        .iter()
        .map(|&x| {
            let f = s.fiber(x);
            xis.iter().map(|&xi| det(&f.eval(xi).shifted(z))).collect()
        })
        .collect();
    let q_scale = grid.iter().flatten().map(|q| q.norm()).fold(T::zero(), T::max).max(T::one());
    let tol = opts.newton_tol * q_scale;
    let diam = dx.hypot(dxi);
    let step_cap = T::lit(4.0) * diam.max(T::lit(0.05));

    let mut seeds: Vec<(T, T, T)> = Vec::new();
    for i in 0..nx {
        let i1 = (i + 1) % nx;
        for j in 0..(nxi - 1) {
            let c = [grid[i][j], grid[i1][j], grid[i][j + 1], grid[i1][j + 1]];
            let min_abs = c.iter().map(|q| q.norm()).fold(T::infinity(), T::min);
            let var = [(c[1] - c[0]).norm(), (c[2] - c[0]).norm(), (c[3] - c[1]).norm(), (c[3] - c[2]).norm()]
                .into_iter()
                .fold(T::zero(), T::max);
            if min_abs <= T::lit(1.5) * var + tol {
                let half = T::lit(0.5);
                seeds.push((xs[i] + half * dx, xis[j] + half * dxi, min_abs));
            }
        }
    }
    seeds.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap_or(std::cmp::Ordering::Equal));

    let mut found: Vec<PhaseSpacePoint<T>> = Vec::new();
    let mut degenerate = false;
    let skip_radius = T::lit(1.5) * diam;
    for &(sx, sxi, _) in &seeds {
        let seed = PhaseSpacePoint { x: sx, xi: sxi };
        if found.iter().any(|r| r.distance(&PhaseSpacePoint::new(seed.x, seed.xi)) < skip_radius) {
            continue;
        }
        match newton_2d(s, z, (sx, sxi), tol, opts.max_newton, step_cap) {
            NewtonOutcome::Converged(x, xi) => {
                let pt = PhaseSpacePoint::new(x, xi);
                if !found.iter().any(|r| r.distance(&pt) < opts.dedup_radius) {
                    found.push(pt);
                }
            }
            NewtonOutcome::Failed(x, xi) => {
                // stalled at a nonzero minimum of |q|: the Jacobian is singular
                // nearby, so z sits close to Φ
                if stalled_near_fold(s, z, x, xi) {
                    degenerate = true;
                } else if strong_seed(s, z, sx, sxi, diam, opts.phi_rel) {
                    return Err(SymbolError::NonConvergence { x: sx.to_f64_lossy(), xi: sxi.to_f64_lossy() });
                }
            }
        }
    }

    let mut roots = Vec::new();
    for pt in found {
        let (qx, qxi) = s.qz_gradient(pt, z);
        let (bracket, _) = bracket_from_gradient(qx, qxi);
        let eps_phi = opts.phi_rel * (qx.norm_sqr() + qxi.norm_sqr());
        if bracket.abs() <= eps_phi {
            degenerate = true;
            continue;
        }
        let sign = if bracket > T::zero() { RootSign::Plus } else { RootSign::Minus };
        roots.push(ClassifiedRoot { point: pt, sign, bracket });
    }
    roots.sort_by(|a, b| {
        a.point
            .x
            .partial_cmp(&b.point.x)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.point.xi.partial_cmp(&b.point.xi).unwrap_or(std::cmp::Ordering::Equal))
    });
    let beta = roots.iter().filter(|r| r.sign == RootSign::Plus).count();
    let gamma = roots.len() - beta;
    Ok(RootInventory { z: (z.re, z.im), roots, beta, gamma, degenerate })
}

fn stalled_near_fold<T: Real>(s: &MatrixSymbol<T>, z: Cplx<T>, x: T, xi: T) -> bool {
    let (qx, qxi) = s.qz_gradient(PhaseSpacePoint { x, xi }, z);
    let (bracket, _) = bracket_from_gradient(qx, qxi);
    bracket.abs() <= T::lit(1e-3) * (qx.norm_sqr() + qxi.norm_sqr())
}

/// A seed whose linearization points at a nearby, nondegenerate zero.
fn strong_seed<T: Real>(s: &MatrixSymbol<T>, z: Cplx<T>, x: T, xi: T, diam: T, phi_rel: T) -> bool {
    let pt = PhaseSpacePoint { x, xi };
    let q = s.qz(pt, z);
    let (qx, qxi) = s.qz_gradient(pt, z);
    let (bracket, _) = bracket_from_gradient(qx, qxi);
    if bracket.abs() <= phi_rel * (qx.norm_sqr() + qxi.norm_sqr()) {
        return false;
    }
    match newton_step(s, z, x, xi, q) {
        Some((a, b)) => a.hypot(b) <= T::lit(0.5) * diam,
        None => false,
    }
}

/// Where `z` sits relative to `Σ`, `Φ` and `Λ = Σ \ Φ`.
#[derive(Debug, Clone, PartialEq)]
pub enum RegionClass<T> {
    OutsideSigma,
    InLambda(RootInventory<T>),
    NearPhi,
}

pub fn classify_region<T: Real>(
    s: &MatrixSymbol<T>,
    z: Cplx<T>,
    opts: &RootOptions<T>,
) -> Result<RegionClass<T>, SymbolError> {
    let inv = find_roots(s, z, opts)?;
    Ok(if inv.degenerate {
        RegionClass::NearPhi
    } else if inv.roots.is_empty() {
        RegionClass::OutsideSigma
    } else {
        RegionClass::InLambda(inv)
    })
}

// ---------------------------------------------------------------------------
// Winding numbers

/// Closed polyline in the `(x, ξ)` plane; `x` is not reduced.
pub type Loop<T> = Vec<(T, T)>;

/// Positively oriented circle around `center = (x, ξ)`.
///
/// Orientation is that of `dξ ∧ dx`: counterclockwise when `ξ` is drawn
/// horizontally and `x` vertically.
pub fn circle_loop<T: Real>(center: (T, T), radius: T, samples: usize) -> Loop<T> {
    (0..samples)
        .map(|k| {
            let t = T::TAU() * T::from_usize_lossy(k) / T::from_usize_lossy(samples);
            (center.0 + radius * t.sin(), center.1 + radius * t.cos())
        })
        .collect()
}

/// Positively oriented boundary of `[x0, x1] × [xi0, xi1]`, same orientation
/// as [`circle_loop`].
pub fn rectangle_loop<T: Real>(x0: T, x1: T, xi0: T, xi1: T, per_side: usize) -> Loop<T> {
    let corners = [(x0, xi0), (x0, xi1), (x1, xi1), (x1, xi0)];
    let mut out = Vec::with_capacity(4 * per_side);
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        for s in 0..per_side {
            let t = T::from_usize_lossy(s) / T::from_usize_lossy(per_side);
            out.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
        }
    }
    out
}

/// Winding number of `q_z` along a closed loop, as traversed.
///
/// With the orientation of [`circle_loop`], a small loop around a simple
/// zero gives minus the sign of the bracket: `+1` at minus-roots and `-1` at
/// plus-roots.
pub fn winding_number<T: Real>(s: &MatrixSymbol<T>, z: Cplx<T>, path: &[(T, T)]) -> Result<i64, SymbolError> {
    if path.len() < 3 {
        return Err(SymbolError::InvalidShape("loop needs at least three vertices".into()));
    }
    let q_at = |p: (T, T)| s.qz(PhaseSpacePoint { x: p.0, xi: p.1 }, z);
    let scale = path.iter().map(|&p| q_at(p).norm()).fold(T::zero(), T::max).max(T::one());
    let zero_tol = T::lit(1e-13) * scale;
    let mut total = T::zero();
    for k in 0..path.len() {
        let a = path[k];
        let b = path[(k + 1) % path.len()];
        total += segment_arg(&q_at, a, b, q_at(a), q_at(b), zero_tol, 0)?;
    }
    let turns = total / T::TAU();
    Ok(turns.round().to_i64().unwrap_or(0))
}

fn segment_arg<T: Real>(
    q_at: &impl Fn((T, T)) -> Cplx<T>,
    a: (T, T),
    b: (T, T),
    qa: Cplx<T>,
    qb: Cplx<T>,
    zero_tol: T,
    depth: usize,
) -> Result<T, SymbolError> {
    for (p, q) in [(a, qa), (b, qb)] {
        if q.norm() <= zero_tol {
            return Err(SymbolError::ZeroOnContour {
                x: p.0.to_f64_lossy(),
                xi: p.1.to_f64_lossy(),
                modulus: q.norm().to_f64_lossy(),
            });
        }
    }
    let jump = (qb / qa).arg();
    if jump.abs() < T::FRAC_PI_4() || depth >= 40 {
        if depth >= 40 && jump.abs() >= T::FRAC_PI_2() {
            return Err(SymbolError::ZeroOnContour {
                x: a.0.to_f64_lossy(),
                xi: a.1.to_f64_lossy(),
                modulus: qa.norm().min(qb.norm()).to_f64_lossy(),
            });
        }
        return Ok(jump);
    }
    let half = T::lit(0.5);
    let mid = ((a.0 + b.0) * half, (a.1 + b.1) * half);
    let qm = q_at(mid);
    Ok(segment_arg(q_at, a, mid, qa, qm, zero_tol, depth + 1)?
        + segment_arg(q_at, mid, b, qm, qb, zero_tol, depth + 1)?)
}

// ---------------------------------------------------------------------------

/// Reference symbols used throughout the tests, the acceptance suite and the
/// example configurations.
pub mod fixtures {
    use super::*;

    fn c<T: Real>(re: f64, im: f64) -> Cplx<T> {
        cx(T::lit(re), T::lit(im))
    }

    /// `p = ξ + e^{ix}`.
    pub fn f1<T: Real>() -> MatrixSymbol<T> {
        MatrixSymbol::scalar(
            vec![TrigPolynomial::monomial(1, cone()), TrigPolynomial::constant(cone())],
            true,
        )
        .expect("elliptic")
    }

    /// `p = ξ² + i e^{ix}`.
    pub fn f2<T: Real>() -> MatrixSymbol<T> {
        MatrixSymbol::scalar(
            vec![
                TrigPolynomial::monomial(1, c(0.0, 1.0)),
                TrigPolynomial::zero(),
                TrigPolynomial::constant(cone()),
            ],
            true,
        )
        .expect("elliptic")
    }

    /// `p = [[ξ + e^{ix}, 1], [0, ξ - e^{ix}]]`.
    pub fn f3<T: Real>() -> MatrixSymbol<T> {
        let e = TrigPolynomial::monomial(1, cone());
        let layer0 = vec![e.clone(), TrigPolynomial::constant(cone()), TrigPolynomial::zero(), e.scale(-cone::<T>())];
        let layer1 = vec![
            TrigPolynomial::constant(cone()),
            TrigPolynomial::zero(),
            TrigPolynomial::zero(),
            TrigPolynomial::constant(cone()),
        ];
        MatrixSymbol::new(2, vec![layer0, layer1], true).expect("elliptic")
    }

    /// Classical `p = e^{ix} ξ²` (operator `e^{ix} D²`).
    pub fn f4<T: Real>() -> MatrixSymbol<T> {
        MatrixSymbol::scalar(
            vec![TrigPolynomial::zero(), TrigPolynomial::zero(), TrigPolynomial::monomial(1, cone())],
            false,
        )
        .expect("elliptic")
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn c(re: f64, im: f64) -> Cplx<f64> {
        Cplx::new(re, im)
    }

    fn pt(x: f64, xi: f64) -> PhaseSpacePoint<f64> {
        PhaseSpacePoint::new(x, xi)
    }

    #[test]
    fn trig_polynomial_periodicity_and_derivative() {
        let p = TrigPolynomial::from_terms(&[(-2, c(0.3, 0.1)), (0, c(1.0, 0.0)), (3, c(0.0, -0.7))]);
        for &x in &[0.0, 0.4, 2.0, 5.9] {
            assert!((p.eval(x) - p.eval(x + TAU)).norm() < 1e-13);
            let h = 1e-6;
            let fd = (p.eval(x + h) - p.eval(x - h)) / (2.0 * h);
            assert!((fd - p.derivative().eval(x)).norm() < 1e-8);
        }
        assert_eq!(p.derivative().coefficient(3), c(0.0, -0.7) * c(0.0, 3.0));
        assert_eq!(p.bandwidth(), 3);
        let conj = p.conj_function();
        assert!((conj.eval(1.3) - p.eval(1.3).conj()).norm() < 1e-14);
    }

    #[test]
    fn rejects_non_elliptic_and_bad_shapes() {
        let bad = MatrixSymbol::<f64>::scalar(
            vec![TrigPolynomial::zero(), TrigPolynomial::from_terms(&[(0, c(1.0, 0.0)), (1, c(1.0, 0.0))])],
            true,
        );
        assert!(matches!(bad, Err(SymbolError::NotElliptic { .. })));
        let shape = MatrixSymbol::<f64>::new(2, vec![vec![TrigPolynomial::zero()]], true);
        assert!(matches!(shape, Err(SymbolError::InvalidShape(_))));
        assert!(matches!(MatrixSymbol::<f64>::new(0, vec![vec![]], true), Err(SymbolError::InvalidShape(_))));
    }

    #[test]
    fn eval_symbol_examples() {
        assert!((f1::<f64>().eval(pt(0.0, 1.0))[(0, 0)] - c(2.0, 0.0)).norm() < 1e-15);
        assert!(f1::<f64>().eval(pt(PI, 1.0))[(0, 0)].norm() < 1e-15);
        let m = f3::<f64>().eval(pt(0.0, 0.0));
        let want = [[c(1.0, 0.0), c(1.0, 0.0)], [c(0.0, 0.0), c(-1.0, 0.0)]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((m[(i, j)] - want[i][j]).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn symbol_spectrum_examples() {
        let e = f1::<f64>().symbol_spectrum(pt(0.0, 1.0)).unwrap();
        assert_eq!(e, vec![c(2.0, 0.0)]);
        let e = f3::<f64>().symbol_spectrum(pt(0.0, 0.0)).unwrap();
        assert!((e[0] - c(-1.0, 0.0)).norm() < 1e-15 && (e[1] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn qz_examples() {
        assert!((f1::<f64>().qz(pt(0.0, 1.0), c(0.0, 0.0)) - c(2.0, 0.0)).norm() < 1e-15);
        assert!(f1::<f64>().qz(pt(0.0, -1.0), c(0.0, 0.0)).norm() < 1e-15);
        assert!(f3::<f64>().qz(pt(0.0, 0.0), c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn gradient_examples() {
        let (gx, gxi) = f1::<f64>().qz_gradient(pt(0.0, -1.0), c(0.0, 0.0));
        assert!((gx - c(0.0, 1.0)).norm() < 1e-15 && (gxi - c(1.0, 0.0)).norm() < 1e-15);
        for &(x, xi) in &[(0.3, 2.0), (4.0, -7.0)] {
            assert!((f1::<f64>().qz_gradient(pt(x, xi), c(0.2, 0.1)).1 - c(1.0, 0.0)).norm() < 1e-15);
        }
        let (gx, gxi) = f2::<f64>().qz_gradient(pt(FRAC_PI_2, 1.0), c(0.0, 0.0));
        assert!((gx - c(0.0, -1.0)).norm() < 1e-14, "{gx}");
        assert!((gxi - c(2.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn bracket_examples() {
        let s1 = f1::<f64>();
        assert!((s1.poisson_bracket_indicator(pt(0.0, -1.0), c(0.0, 0.0)) + 1.0).abs() < 1e-14);
        for xi in [-3.0, 0.0, 0.5, 10.0] {
            assert!(s1.poisson_bracket_indicator(pt(FRAC_PI_2, xi), c(0.7, -0.2)).abs() < 1e-14);
        }
        let b = f2::<f64>().poisson_bracket_indicator(pt(FRAC_PI_2, 1.5f64.sqrt()), c(0.5, 0.0));
        assert!((b - 2.0 * 1.5f64.sqrt()).abs() < 1e-12, "{b}");
    }

    #[test]
    fn find_roots_f1_at_zero() {
        let inv = find_roots(&f1::<f64>(), c(0.0, 0.0), &RootOptions::default()).unwrap();
        assert_eq!((inv.beta, inv.gamma, inv.degenerate), (1, 1, false));
        let minus = inv.minus_roots().next().unwrap();
        let plus = inv.plus_roots().next().unwrap();
        assert!(minus.point.distance(&pt(0.0, -1.0)) < 1e-8);
        assert!(plus.point.distance(&pt(PI, 1.0)) < 1e-8);
    }

    #[test]
    fn find_roots_f1_outside_sigma() {
        let inv = find_roots(&f1::<f64>(), c(0.0, 2.0), &RootOptions::default()).unwrap();
        assert!(inv.roots.is_empty() && !inv.degenerate);
    }

    #[test]
    fn find_roots_f2_shares_base_point() {
        let inv = find_roots(&f2::<f64>(), c(0.5, 0.0), &RootOptions::default()).unwrap();
        assert_eq!((inv.beta, inv.gamma), (1, 1));
        let r = 1.5f64.sqrt();
        let plus = inv.plus_roots().next().unwrap();
        let minus = inv.minus_roots().next().unwrap();
        assert!(plus.point.distance(&pt(FRAC_PI_2, r)) < 1e-8);
        assert!(minus.point.distance(&pt(FRAC_PI_2, -r)) < 1e-8);
    }

    #[test]
    fn region_classification() {
        let s = f1::<f64>();
        let o = RootOptions::default();
        assert_eq!(classify_region(&s, c(0.0, 2.0), &o).unwrap(), RegionClass::OutsideSigma);
        match classify_region(&s, c(0.0, 0.0), &o).unwrap() {
            RegionClass::InLambda(inv) => assert_eq!(inv.beta, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(classify_region(&s, c(1.0, 1.0), &o).unwrap(), RegionClass::NearPhi);
    }

    #[test]
    fn winding_numbers_follow_bracket_sign() {
        let s = f1::<f64>();
        let z = c(0.0, 0.0);
        assert_eq!(winding_number(&s, z, &circle_loop((0.0, -1.0), 0.1, 16)).unwrap(), 1);
        assert_eq!(winding_number(&s, z, &circle_loop((PI, 1.0), 0.1, 16)).unwrap(), -1);
        assert_eq!(winding_number(&s, z, &circle_loop((2.0, 3.0), 0.3, 16)).unwrap(), 0);
        let w = s.xi_window(0.0) + 1.0;
        assert_eq!(winding_number(&s, z, &rectangle_loop(-0.5, TAU - 0.5, -w, w, 64)).unwrap(), 0);
    }

    #[test]
    fn winding_detects_zero_on_contour() {
        let s = f1::<f64>();
        let err = winding_number(&s, c(0.0, 0.0), &circle_loop((0.0, -1.1), 0.1, 4));
        assert!(matches!(err, Err(SymbolError::ZeroOnContour { .. })), "{err:?}");
    }

    #[test]
    fn count_m_gamma_examples() {
        use crate::domains::SpectralDomain;
        let disk = SpectralDomain::disk(c(2.0, 0.0), 0.5);
        assert_eq!(f1::<f64>().count_m_gamma(pt(0.0, 1.0), &disk).unwrap(), 1);
        let sq = SpectralDomain::rectangle(-2.0, 2.0, -2.0, 2.0);
        assert_eq!(f3::<f64>().count_m_gamma(pt(0.0, 0.0), &sq).unwrap(), 2);
        let far = SpectralDomain::rectangle(10.0, 11.0, 10.0, 11.0);
        assert_eq!(f3::<f64>().count_m_gamma(pt(0.3, 0.2), &far).unwrap(), 0);
    }

    #[test]
    fn xi_window_contains_all_roots() {
        // F1: (|z| + 1)/1, doubled
        assert!((f1::<f64>().xi_window(0.0) - 2.0).abs() < 1e-14);
        assert!((f4::<f64>().xi_window(1.0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn adjoint_conjugates_symbol() {
        let s = f3::<f64>();
        let a = s.adjoint();
        let p = pt(0.7, -0.4);
        let lhs = a.eval(p);
        let rhs = s.eval(p).adjoint();
        for i in 0..2 {
            for j in 0..2 {
                assert!((lhs[(i, j)] - rhs[(i, j)]).norm() < 1e-15);
            }
        }
        assert_eq!(a.coefficient_order(), CoefficientOrder::Right);
    }

    #[test]
    fn works_in_single_precision() {
        let s = f1::<f32>();
        let b = s.poisson_bracket_indicator(PhaseSpacePoint::new(0.0f32, -1.0), Cplx::new(0.0, 0.0));
        assert!((b + 1.0).abs() < 1e-6);
    }
}
