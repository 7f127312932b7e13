//! Leading-order WKB quasimodes `χ(x) a₀(x) e^{iφ(x)/h}` at classified roots,
//! their residuals, and the overlap coefficients against Fourier modes.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::{DiscretizeError, FourierTruncation, OperatorMatrix};
use crate::linalg::{self, dot_conj, vec_norm, LinalgError};
use crate::num::{cis, cone, cx, czero, periodic_diff, Cplx, Real};
use crate::randomness::{sigma_of, CoefficientLaw};
use crate::symbol::{ClassifiedRoot, MatrixSymbol, PhaseSpacePoint, RootSign, SymbolError};

#[derive(Debug, Error)]
pub enum QuasimodeError {
    #[error("eigenvalue of p at the root is not simple (gap {gap:e})")]
    MultipleEigenvalue { gap: f64 },
    #[error("no eigenvalue of p at the root is close to z (distance {distance:e})")]
    NotOnBranch { distance: f64 },
    #[error("eikonal continuation lost the branch at x = {x}")]
    BranchLoss { x: f64 },
    #[error("Im φ = {im_phi:e} at the support edge x = {x} is below the required {required:e}")]
    CutoffTooWide { x: f64, im_phi: f64, required: f64 },
    #[error("quasimodes of P are built at plus-roots; use the adjoint symbol for minus-roots")]
    WrongSign,
    #[error("quasimodes are incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Symbol(#[from] SymbolError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Simple eigenvalue `λ(x, ξ)` of `p(x, ξ)` through `z` at a root.
#[derive(Debug, Clone)]
pub struct EigenBranch<T: Real> {
    pub symbol: MatrixSymbol<T>,
    pub z: Cplx<T>,
    pub root: ClassifiedRoot<T>,
    /// Distance from `λ(root)` to the rest of the spectrum of `p(root)`.
    pub gap: T,
    /// `∂_ξ λ` at the root.
    pub dxi_lambda: Cplx<T>,
    /// Unit right eigenvector at the root.
    pub eigvec: Vec<Cplx<T>>,
}

impl<T: Real> EigenBranch<T> {
    /// Eigenvalue of `p(x, ξ)` nearest `reference`.
    pub fn lambda(&self, x: T, xi: Cplx<T>, reference: Cplx<T>) -> Result<Cplx<T>, QuasimodeError> {
        let p = self.symbol.eval_complex(x, xi);
        if p.rows() == 1 {
            return Ok(p[(0, 0)]);
        }
        let eigs = linalg::eigenvalues(&p)?;
        Ok(eigs
            .into_iter()
            .min_by(|a, b| (a - reference).norm().partial_cmp(&(b - reference).norm()).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(reference))
    }

    /// `(∂_ξ λ, v)` on the branch at a point where `λ(x, ξ) = z`.
    fn derivative_and_vector(&self, x: T, xi: Cplx<T>) -> (Cplx<T>, Vec<Cplx<T>>) {
        let n = self.symbol.dim();
        let dp = self.symbol.eval_dxi(x, xi);
        if n == 1 {
            return (dp[(0, 0)], vec![cone()]);
        }
        let a = self.symbol.eval_complex(x, xi).shifted(self.z);
        let v = linalg::null_vector(&a);
        let w = linalg::null_vector(&a.adjoint());
        let num = dot_conj(&w, &dp.mul_vec(&v));
        let den = dot_conj(&w, &v);
        (num / den, v)
    }
}

pub const DEFAULT_GAP_TOL: f64 = 1e-6;

/// Branch data at a non-degenerate root.
pub fn locate_branch<T: Real>(
    s: &MatrixSymbol<T>,
    z: Cplx<T>,
    root: &ClassifiedRoot<T>,
) -> Result<EigenBranch<T>, QuasimodeError> {
    let p = s.eval(root.point);
    let eigs = if s.dim() == 1 { vec![p[(0, 0)]] } else { linalg::eigenvalues(&p)? };
    let (idx, dist) = eigs
        .iter()
        .enumerate()
        .map(|(i, e)| (i, (e - z).norm()))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("n >= 1");
    let scale = T::one() + z.norm();
    if dist > T::lit(1e-8) * scale {
        return Err(QuasimodeError::NotOnBranch { distance: dist.to_f64_lossy() });
    }
    let gap = eigs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, e)| (e - eigs[idx]).norm())
        .fold(T::infinity(), T::min);
    if gap <= T::lit(DEFAULT_GAP_TOL) * scale {
        return Err(QuasimodeError::MultipleEigenvalue { gap: gap.to_f64_lossy() });
    }
    let mut branch = EigenBranch {
        symbol: s.clone(),
        z,
        root: *root,
        gap,
        dxi_lambda: czero(),
        eigvec: Vec::new(),
    };
    let (d, mut v) = branch.derivative_and_vector(root.point.x, cx(root.point.xi, T::zero()));
    fix_phase(&mut v);
    branch.dxi_lambda = d;
    branch.eigvec = v;
    Ok(branch)
}

/// Rotate so the largest component is real and positive.
fn fix_phase<T: Real>(v: &mut [Cplx<T>]) {
    let Some(big) = v.iter().copied().max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap_or(std::cmp::Ordering::Equal)) else {
        return;
    };
    if big.norm() == T::zero() {
        return;
    }
    let ph = big.conj() / big.norm();
    v.iter_mut().for_each(|c| *c = *c * ph);
}

/// Rotate `v` so that `⟨v, reference⟩` is real and positive.
fn align_phase<T: Real>(v: &mut [Cplx<T>], reference: &[Cplx<T>]) {
    let d = dot_conj(v, reference);
    if d.norm() > T::zero() {
        let ph = d / d.norm();
        v.iter_mut().for_each(|c| *c = *c * ph);
    }
}

// ---------------------------------------------------------------------------
// Eikonal

/// Complex phase on a uniform fine grid around the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase<T: Real> {
    pub x_root: T,
    pub xi_root: T,
    pub step: T,
    /// Nodes `x_root + (i - left) * step` for `i = 0..len`.
    pub left: usize,
    pub phi: Vec<Cplx<T>>,
    pub xi: Vec<Cplx<T>>,
    /// `ξ'(x)` at the nodes.
    pub dxi: Vec<Cplx<T>>,
    pub phi_second_at_root: Cplx<T>,
}

impl<T: Real> Phase<T> {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn node(&self, i: usize) -> T {
        self.x_root + self.step * (T::from_usize_lossy(i) - T::from_usize_lossy(self.left))
    }

    /// Offsets `(left, right)` of the covered interval from `x_root`.
    pub fn reach(&self) -> (T, T) {
        let l = self.step * T::from_usize_lossy(self.left);
        let r = self.step * T::from_usize_lossy(self.len() - 1 - self.left);
        (l, r)
    }

    fn locate(&self, offset: T) -> Option<(usize, T)> {
        let pos = offset / self.step + T::from_usize_lossy(self.left);
        if pos < T::zero() || pos > T::from_usize_lossy(self.len() - 1) {
            return None;
        }
        let i = pos.floor().to_usize().unwrap_or(0).min(self.len() - 2);
        Some((i, pos - T::from_usize_lossy(i)))
    }

    /// Cubic Hermite interpolation of `φ` using `φ' = ξ`, at `x_root + offset`.
    pub fn phi_at(&self, offset: T) -> Option<Cplx<T>> {
        let (i, t) = self.locate(offset)?;
        Some(hermite(self.phi[i], self.phi[i + 1], self.xi[i], self.xi[i + 1], self.step, t))
    }

    /// Cubic Hermite interpolation of `ξ` using `ξ'`.
    pub fn xi_at(&self, offset: T) -> Option<Cplx<T>> {
        let (i, t) = self.locate(offset)?;
        Some(hermite(self.xi[i], self.xi[i + 1], self.dxi[i], self.dxi[i + 1], self.step, t))
    }

    /// Smallest `Im φ` over the nodes.
    pub fn min_im_phi(&self) -> T {
        self.phi.iter().map(|p| p.im).fold(T::infinity(), T::min)
    }
}

fn hermite<T: Real>(y0: Cplx<T>, y1: Cplx<T>, d0: Cplx<T>, d1: Cplx<T>, step: T, t: T) -> Cplx<T> {
    let t2 = t * t;
    let t3 = t2 * t;
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let h00 = two * t3 - three * t2 + T::one();
    let h10 = t3 - two * t2 + t;
    let h01 = -two * t3 + three * t2;
    let h11 = t3 - t2;
    y0 * h00 + d0 * (h10 * step) + y1 * h01 + d1 * (h11 * step)
}

#[derive(Debug, Clone, Copy)]
pub struct EikonalOptions<T> {
    pub step: T,
    pub newton_tol: T,
    /// Largest accepted Newton correction; `None` means `10 |ξ_root|`.
    pub step_cap: Option<T>,
    pub max_newton: usize,
}

impl<T: Real> Default for EikonalOptions<T> {
    fn default() -> Self {
        Self { step: T::lit(1e-3), newton_tol: T::lit(1e-12), step_cap: None, max_newton: 50 }
    }
}

/// Newton in complex `ξ` for `q_z(x, ξ) = 0`.
fn newton_xi<T: Real>(
    s: &MatrixSymbol<T>,
    z: Cplx<T>,
    x: T,
    guess: Cplx<T>,
    opts: &EikonalOptions<T>,
    cap: T,
) -> Option<Cplx<T>> {
    let mut xi = guess;
    for _ in 0..opts.max_newton {
        let q = s.qz_complex(x, xi, z);
        let (_, qxi) = s.qz_gradient_complex(x, xi, z);
        if qxi.norm() == T::zero() {
            return None;
        }
        let d = q / qxi;
        if !(d.norm() <= cap) {
            return None;
        }
        xi -= d;
        if d.norm() <= opts.newton_tol * (T::one() + xi.norm()) {
            return Some(xi);
        }
    }
    None
}

/// `ξ'(x) = -∂_x q / ∂_ξ q` along the eikonal curve.
fn xi_prime<T: Real>(s: &MatrixSymbol<T>, z: Cplx<T>, x: T, xi: Cplx<T>) -> Cplx<T> {
    let (qx, qxi) = s.qz_gradient_complex(x, xi, z);
    -qx / qxi
}

/// Solve `λ(x, φ'(x)) = z` on `[x_root - left, x_root + right]`, shrinking a
/// side if the continuation loses the branch there.
pub fn solve_eikonal<T: Real>(
    branch: &EigenBranch<T>,
    left: T,
    right: T,
    opts: &EikonalOptions<T>,
) -> Result<Phase<T>, QuasimodeError> {
    let s = &branch.symbol;
    let z = branch.z;
    let x0 = branch.root.point.x;
    let xi0 = branch.root.point.xi;
    let cap = opts.step_cap.unwrap_or_else(|| T::lit(10.0) * xi0.abs().max(T::lit(0.1)));
    let step = opts.step;
    let xi_root = cx(xi0, T::zero());
    let dxi_root = xi_prime(s, z, x0, xi_root);

    let march = |dir: T, extent: T| -> (Vec<Cplx<T>>, Vec<Cplx<T>>) {
        let count = (extent / step).floor().to_usize().unwrap_or(0);
        let mut xis = vec![xi_root];
        let mut dxis = vec![dxi_root];
        for i in 1..=count {
            let x = x0 + dir * step * T::from_usize_lossy(i);
            let prev = xis[xis.len() - 1];
            let guess = prev + dxis[dxis.len() - 1] * (dir * step);
            match newton_xi(s, z, x, guess, opts, cap) {
                Some(xi) if (xi - prev).norm() <= cap * step + T::lit(10.0) * (dxis[dxis.len() - 1] * step).norm() => {
                    xis.push(xi);
                    dxis.push(xi_prime(s, z, x, xi));
                }
                _ => break,
            }
        }
        (xis, dxis)
    };
    let (mut xl, mut dl) = march(-T::one(), left);
    let (xr, dr) = march(T::one(), right);
    if xl.len() < 3 || xr.len() < 3 {
        let bad = if xl.len() < 3 { x0 - step } else { x0 + step };
        return Err(QuasimodeError::BranchLoss { x: bad.to_f64_lossy() });
    }
    // a lost branch shrinks the interval by a further 10 %
    let trim = |v: &mut Vec<Cplx<T>>, d: &mut Vec<Cplx<T>>, wanted: T| {
        let got = T::from_usize_lossy(v.len() - 1) * step;
        if got + step < wanted {
            let keep = (T::lit(0.9) * T::from_usize_lossy(v.len() - 1)).floor().to_usize().unwrap_or(2).max(2);
            v.truncate(keep + 1);
            d.truncate(keep + 1);
        }
    };
    let (mut xr, mut dr) = (xr, dr);
    trim(&mut xl, &mut dl, left);
    trim(&mut xr, &mut dr, right);

    let nl = xl.len() - 1;
    let mut xi: Vec<Cplx<T>> = xl.iter().rev().copied().collect();
    xi.extend_from_slice(&xr[1..]);
    let mut dxi: Vec<Cplx<T>> = dl.iter().rev().copied().collect();
    dxi.extend_from_slice(&dr[1..]);

    // φ by Simpson from the root outwards
    let mut phi = vec![czero(); xi.len()];
    let twelfth = step / T::lit(12.0);
    let third = step / T::lit(3.0);
    let integrate = |phi: &mut Vec<Cplx<T>>, idx: &dyn Fn(usize) -> usize, count: usize, sign: T| {
        for k in 1..=count {
            let val = if k % 2 == 0 {
                let (a, b, c) = (xi[idx(k - 2)], xi[idx(k - 1)], xi[idx(k)]);
                phi[idx(k - 2)] + (a + b * T::lit(4.0) + c) * (third * sign)
            } else {
                // first half of a Simpson pair; the last odd node borrows
                // the previous pair
                let (a, b, c) = if k + 1 <= count {
                    (xi[idx(k - 1)], xi[idx(k)], xi[idx(k + 1)])
                } else {
                    (xi[idx(k - 1)], xi[idx(k)], xi[idx(k)] * T::lit(2.0) - xi[idx(k - 1)])
                };
                if k + 1 <= count || k < 2 {
                    phi[idx(k - 1)] + (a * T::lit(5.0) + b * T::lit(8.0) - c) * (twelfth * sign)
                } else {
                    let (p, q, r) = (xi[idx(k - 2)], xi[idx(k - 1)], xi[idx(k)]);
                    phi[idx(k - 1)] + (-p + q * T::lit(8.0) + r * T::lit(5.0)) * (twelfth * sign)
                }
            };
            phi[idx(k)] = val;
        }
    };
    let right_count = xi.len() - 1 - nl;
    integrate(&mut phi, &|k| nl + k, right_count, T::one());
    integrate(&mut phi, &|k| nl - k, nl, -T::one());

    Ok(Phase { x_root: x0, xi_root: xi0, step, left: nl, phi, xi, dxi, phi_second_at_root: dxi_root })
}

/// `a₀(x) = (∂_ξλ(x_root) / ∂_ξλ(x))^{1/2}` at `x_root + offset`, with the
/// square root branch chosen next to `previous`.
pub fn leading_amplitude<T: Real>(
    branch: &EigenBranch<T>,
    phase: &Phase<T>,
    offset: T,
    previous: Cplx<T>,
) -> Option<(Cplx<T>, Vec<Cplx<T>>)> {
    let xi = phase.xi_at(offset)?;
    let x = phase.x_root + offset;
    let (d, v) = branch.derivative_and_vector(x, xi);
    let a = (branch.dxi_lambda / d).sqrt();
    let a = if (a - previous).norm() <= (-a - previous).norm() { a } else { -a };
    Some((a, v))
}

// ---------------------------------------------------------------------------
// Quasimodes

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff<T> {
    /// `χ = 1` for `|x - x_root| ≤ plateau`.
    pub plateau: T,
    /// `χ = 0` for `|x - x_root| ≥ support`.
    pub support: T,
    pub im_phi_at_edge: T,
}

impl<T: Real> Cutoff<T> {
    /// Smooth step built from `e^{-1/s}`.
    pub fn eval(&self, offset: T) -> T {
        let d = offset.abs();
        if d <= self.plateau {
            return T::one();
        }
        if d >= self.support {
            return T::zero();
        }
        let t = (d - self.plateau) / (self.support - self.plateau);
        let psi = |s: T| if s <= T::zero() { T::zero() } else { (-T::one() / s).exp() };
        let a = psi(T::one() - t);
        a / (a + psi(t))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CutoffOptions<T> {
    /// Requested support radius; chosen automatically when `None`.
    pub support: Option<T>,
    /// `plateau = plateau_fraction · support`.
    pub plateau_fraction: T,
    /// Minimum `Im φ` at the support edge.
    pub min_edge_im_phi: T,
    /// Base points of other roots of the same sign; the support stays within
    /// half the distance to the nearest one.
    pub other_bases: [Option<T>; 4],
    pub eikonal: EikonalOptions<T>,
}

impl<T: Real> Default for CutoffOptions<T> {
    fn default() -> Self {
        Self {
            support: None,
            plateau_fraction: T::lit(0.6),
            min_edge_im_phi: T::lit(1e-3),
            other_bases: [None; 4],
            eikonal: EikonalOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Quasimode<T: Real> {
    /// `samples[i][j]`: component `i` at `x_j = 2πj/N`.
    pub samples: Vec<Vec<Cplx<T>>>,
    pub center: ClassifiedRoot<T>,
    pub z: Cplx<T>,
    pub h: T,
    pub cutoff: Cutoff<T>,
    /// Discrete `L²` norm before normalization.
    pub norm_record: T,
    pub phase: Phase<T>,
    /// `L²` mass in the cutoff's transition region.
    pub transition_mass: T,
}

impl<T: Real> Quasimode<T> {
    pub fn grid_size(&self) -> usize {
        self.samples[0].len()
    }

    pub fn dim(&self) -> usize {
        self.samples.len()
    }

    pub fn grid(&self) -> Vec<T> {
        let n = self.grid_size();
        (0..n).map(|j| T::TAU() * T::from_usize_lossy(j) / T::from_usize_lossy(n)).collect()
    }

    /// Discrete `L²(S¹)` norm.
    pub fn l2_norm(&self) -> T {
        let dx = T::TAU() / T::from_usize_lossy(self.grid_size());
        let s: T = self.samples.iter().flatten().map(|c| c.norm_sqr()).sum();
        (s * dx).sqrt()
    }

    /// Coefficients `⟨u_i, e_k⟩`, `e_k = e^{ikx}/√(2π)`, in the truncation's
    /// component-major layout.
    pub fn fourier(&self, k_max: usize) -> Vec<Cplx<T>> {
        let n = self.grid_size();
        let kk = k_max as i64;
        let dx = T::TAU() / T::from_usize_lossy(n);
        let w = dx / T::TAU().sqrt();
        let mut out = Vec::with_capacity(self.dim() * (2 * k_max + 1));
        for comp in &self.samples {
            for k in -kk..=kk {
                let mut acc = czero();
                for (j, u) in comp.iter().enumerate() {
                    if *u != czero() {
                        // index arithmetic mod n keeps the angle exact
                        let idx = ((k.rem_euclid(n as i64) as usize) * j) % n;
                        let ang = T::TAU() * T::from_usize_lossy(idx) / T::from_usize_lossy(n);
                        acc += *u * cis(-ang);
                    }
                }
                out.push(acc * w);
            }
        }
        out
    }

    /// Index of the grid point where `|u|` peaks.
    pub fn peak_index(&self) -> usize {
        let n = self.grid_size();
        (0..n)
            .max_by(|&a, &b| {
                let ma: T = self.samples.iter().map(|c| c[a].norm_sqr()).sum();
                let mb: T = self.samples.iter().map(|c| c[b].norm_sqr()).sum();
                ma.partial_cmp(&mb).unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0)
    }
}

/// Default sampling: `8 (2K + 1)` points.
pub fn default_grid_size(k_max: usize) -> usize {
    8 * (2 * k_max + 1)
}

/// `χ a₀ e^{iφ/h}` (times the eigenvector field when `n > 1`) at a plus-root.
pub fn build_quasimode<T: Real>(
    s: &MatrixSymbol<T>,
    z: Cplx<T>,
    root: &ClassifiedRoot<T>,
    h: T,
    grid_size: usize,
    opts: &CutoffOptions<T>,
) -> Result<Quasimode<T>, QuasimodeError> {
    if root.sign != RootSign::Plus {
        return Err(QuasimodeError::WrongSign);
    }
    let branch = locate_branch(s, z, root)?;
    let x0 = root.point.x;

    let mut cap = T::lit(0.9) * T::PI();
    for b in opts.other_bases.iter().flatten() {
        let d = periodic_diff(*b, x0).abs();
        if d > T::lit(1e-9) {
            cap = cap.min(d / T::lit(2.0));
        }
    }
    let requested = opts.support.unwrap_or(cap);
    let reach = requested.max(opts.eikonal.step * T::lit(8.0));
    let phase = solve_eikonal(&branch, reach, reach, &opts.eikonal)?;

    let support = match opts.support {
        Some(r) => {
            let (l, rr) = phase.reach();
            if l < r || rr < r {
                return Err(QuasimodeError::BranchLoss { x: (x0 + if l < r { -l } else { rr }).to_f64_lossy() });
            }
            for off in [-r, r] {
                let im = phase.phi_at(off).map(|p| p.im).unwrap_or_else(T::neg_infinity);
                if !(im >= opts.min_edge_im_phi) {
                    return Err(QuasimodeError::CutoffTooWide {
                        x: (x0 + off).to_f64_lossy(),
                        im_phi: im.to_f64_lossy(),
                        required: opts.min_edge_im_phi.to_f64_lossy(),
                    });
                }
            }
            r
        }
        None => automatic_support(&phase, opts.min_edge_im_phi),
    };
    if !(support > T::zero()) {
        return Err(QuasimodeError::CutoffTooWide { x: x0.to_f64_lossy(), im_phi: 0.0, required: opts.min_edge_im_phi.to_f64_lossy() });
    }
    let edge = phase.phi_at(-support).unwrap_or_default().im.min(phase.phi_at(support).unwrap_or_default().im);
    let cutoff = Cutoff { plateau: opts.plateau_fraction * support, support, im_phi_at_edge: edge };

    let n = s.dim();
    let mut samples = vec![vec![czero(); grid_size]; n];
    let grid: Vec<T> = (0..grid_size)
        .map(|j| T::TAU() * T::from_usize_lossy(j) / T::from_usize_lossy(grid_size))
        .collect();
    // visit grid points outward from the root on each side, for continuity
    let mut offsets: Vec<(usize, T)> = grid
        .iter()
        .enumerate()
        .map(|(j, &x)| (j, periodic_diff(x, x0)))
        .filter(|(_, d)| d.abs() < support)
        .collect();
    offsets.sort_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap_or(std::cmp::Ordering::Equal));
    let mut last_a = [cone::<T>(), cone::<T>()];
    let mut last_v = [branch.eigvec.clone(), branch.eigvec.clone()];
    let mut transition = T::zero();
    let dx = T::TAU() / T::from_usize_lossy(grid_size);
    for (j, d) in offsets {
        let side = usize::from(d >= T::zero());
        let Some((a, mut v)) = leading_amplitude(&branch, &phase, d, last_a[side]) else {
            return Err(QuasimodeError::BranchLoss { x: (x0 + d).to_f64_lossy() });
        };
        align_phase(&mut v, &last_v[side]);
        last_a[side] = a;
        last_v[side] = v.clone();
        let phi = phase.phi_at(d).ok_or(QuasimodeError::BranchLoss { x: (x0 + d).to_f64_lossy() })?;
        let chi = cutoff.eval(d);
        let e = (cx(-phi.im, phi.re) / h).exp();
        for i in 0..n {
            samples[i][j] = v[i] * a * e * chi;
        }
        if d.abs() > cutoff.plateau {
            transition += samples.iter().map(|c| c[j].norm_sqr()).sum::<T>() * dx;
        }
    }
    let mut q = Quasimode {
        samples,
        center: *root,
        z,
        h,
        cutoff,
        norm_record: T::zero(),
        phase,
        transition_mass: T::zero(),
    };
    let norm = q.l2_norm();
    if !(norm > T::zero()) || !norm.is_finite() {
        return Err(QuasimodeError::BranchLoss { x: x0.to_f64_lossy() });
    }
    q.samples.iter_mut().flatten().for_each(|c| *c = *c / norm);
    q.norm_record = norm;
    q.transition_mass = transition / (norm * norm);
    Ok(q)
}

/// Largest symmetric radius on which `Im φ` increases away from the root,
/// with `Im φ ≥ min_edge` at the edge.
fn automatic_support<T: Real>(phase: &Phase<T>, min_edge: T) -> T {
    let c = phase.left;
    let mut reach_r = 0;
    for i in (c + 1)..phase.len() {
        if phase.phi[i].im > phase.phi[i - 1].im {
            reach_r = i - c;
        } else {
            break;
        }
    }
    let mut reach_l = 0;
    for i in (0..c).rev() {
        if phase.phi[i].im > phase.phi[i + 1].im {
            reach_l = c - i;
        } else {
            break;
        }
    }
    let reach = reach_l.min(reach_r);
    let mut r = T::lit(0.95) * phase.step * T::from_usize_lossy(reach);
    while r > phase.step {
        let lo = phase.phi_at(-r).map(|p| p.im).unwrap_or_else(T::neg_infinity);
        let hi = phase.phi_at(r).map(|p| p.im).unwrap_or_else(T::neg_infinity);
        if lo.min(hi) >= min_edge {
            return r;
        }
        r = r * T::lit(0.9);
    }
    T::zero()
}

/// `‖(M - z) u‖ / ‖u‖` with `u` projected onto the truncation's modes.
pub fn residual<T: Real>(m: &OperatorMatrix<T>, z: Cplx<T>, q: &Quasimode<T>) -> Result<T, QuasimodeError> {
    if m.trunc.n != q.dim() {
        return Err(QuasimodeError::Incompatible("dimension of operator and quasimode differ".into()));
    }
    let u = q.fourier(m.trunc.k_max);
    let r = m.shifted(z).mul_vec(&u);
    Ok(vec_norm(&r) / vec_norm(&u))
}

/// `⟨e_k (hD)^α e_{+,j}, e_{-,i}⟩ = (2π)^{-1/2} Σ_m (hm)^α a_m conj(b_{m+k})`
/// from coefficient vectors in the truncation layout.
pub fn overlap_from_coefficients<T: Real>(
    a: &[Cplx<T>],
    b: &[Cplx<T>],
    trunc: &FourierTruncation<T>,
    k: i64,
    alpha: usize,
    j: usize,
    i: usize,
) -> Cplx<T> {
    let kk = trunc.k_max as i64;
    let mut acc = czero();
    for mm in -kk..=kk {
        let target = mm + k;
        if target < -kk || target > kk {
            continue;
        }
        let w = (trunc.h * T::from_i64_lossy(mm)).powi(alpha as i32);
        acc += a[trunc.index(j, mm)] * b[trunc.index(i, target)].conj() * w;
    }
    acc / T::TAU().sqrt()
}

/// Overlap coefficient for a single `(k, α, j, i)`.
pub fn overlap_coefficient<T: Real>(
    k: i64,
    alpha: usize,
    j: usize,
    i: usize,
    e_plus: &Quasimode<T>,
    e_minus: &Quasimode<T>,
    h: T,
    k_max: usize,
) -> Result<Cplx<T>, QuasimodeError> {
    check_pair(e_plus, e_minus)?;
    let trunc = FourierTruncation::new(k_max, e_plus.dim(), h)?;
    Ok(overlap_from_coefficients(&e_plus.fourier(k_max), &e_minus.fourier(k_max), &trunc, k, alpha, j, i))
}

fn check_pair<T: Real>(a: &Quasimode<T>, b: &Quasimode<T>) -> Result<(), QuasimodeError> {
    if a.dim() != b.dim() || a.grid_size() != b.grid_size() {
        return Err(QuasimodeError::Incompatible("shape of e+ and e- differ".into()));
    }
    if a.h != b.h {
        return Err(QuasimodeError::Incompatible("e+ and e- use different h".into()));
    }
    Ok(())
}

/// `σ²(h) = Σ_{α,i,j,k} σ_{α,k}^{ij}(h)² |⟨e_k (hD)^α e_{+,j}, e_{-,i}⟩|²`.
pub fn overlap_variance<T: Real>(
    law: &CoefficientLaw,
    e_plus: &Quasimode<T>,
    e_minus: &Quasimode<T>,
    h: T,
    k_max: usize,
) -> Result<f64, QuasimodeError> {
    check_pair(e_plus, e_minus)?;
    if law.n != e_plus.dim() {
        return Err(QuasimodeError::Incompatible("law dimension differs from the quasimodes".into()));
    }
    let trunc = FourierTruncation::new(k_max, e_plus.dim(), h)?;
    let a = e_plus.fourier(k_max);
    let b = e_minus.fourier(k_max);
    let hf = h.to_f64_lossy();
    let kq = law.k_q as i64;
    let mut total = 0.0;
    for alpha in law.alpha_min..=law.alpha_max {
        for i in 0..law.n {
            for j in 0..law.n {
                for k in -kq..=kq {
                    let s = sigma_of(law, alpha, i, j, k, hf);
                    if s == 0.0 {
                        continue;
                    }
                    let o = overlap_from_coefficients(&a, &b, &trunc, k, alpha, j, i);
                    total += s * s * o.norm_sqr().to_f64_lossy();
                }
            }
        }
    }
    Ok(total)
}

/// Plot table: `x re_0 im_0 [re_1 im_1 ...]` per grid point.
pub fn write_quasimode<T: Real, W: Write>(q: &Quasimode<T>, mut out: W) -> Result<(), QuasimodeError> {
    let mut header = String::from("x");
    for i in 0..q.dim() {
        header.push_str(&format!(",re_{i},im_{i}"));
    }
    writeln!(out, "{header}")?;
    for (j, x) in q.grid().into_iter().enumerate() {
        let mut line = format!("{:e}", x.to_f64_lossy());
        for comp in &q.samples {
            line.push_str(&format!(",{:e},{:e}", comp[j].re.to_f64_lossy(), comp[j].im.to_f64_lossy()));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Plus-root of `P*` sitting at a minus-root of `P`.
pub fn adjoint_root<T: Real>(root: &ClassifiedRoot<T>) -> ClassifiedRoot<T> {
    ClassifiedRoot {
        point: PhaseSpacePoint { x: root.point.x, xi: root.point.xi },
        sign: match root.sign {
            RootSign::Plus => RootSign::Minus,
            RootSign::Minus => RootSign::Plus,
        },
        bracket: -root.bracket,
    }
}

/// `e₋` for `P` at a minus-root: the quasimode of `P*` at `z̄`.
pub fn build_adjoint_quasimode<T: Real>(
    s: &MatrixSymbol<T>,
    z: Cplx<T>,
    minus_root: &ClassifiedRoot<T>,
    h: T,
    grid_size: usize,
    opts: &CutoffOptions<T>,
) -> Result<Quasimode<T>, QuasimodeError> {
    if minus_root.sign != RootSign::Minus {
        return Err(QuasimodeError::WrongSign);
    }
    build_quasimode(&s.adjoint(), z.conj(), &adjoint_root(minus_root), h, grid_size, opts)
}
