//! Fourier truncation of `P(h)`, of the classical operator and of random
//! perturbations, plus dense spectra, counts, norms and `σ_min` maps.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domains::SpectralDomain;
use crate::linalg::{self, CMatrix, LinalgError};
use crate::num::{cmp_re_im, cx, Cplx, Real};
use crate::randomness::PerturbationDraw;
use crate::symbol::{CoefficientOrder, MatrixSymbol};

#[derive(Debug, Error)]
pub enum DiscretizeError {
    #[error("truncation K = {k_max} is below the required {required} for coefficient bandwidth {bandwidth}")]
    BandwidthExceeded { k_max: usize, required: usize, bandwidth: usize },
    #[error("invalid truncation: {0}")]
    InvalidTruncation(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("matrix file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Modes `k = -K..=K` for each of `n` components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierTruncation<T> {
    pub k_max: usize,
    pub n: usize,
    pub h: T,
}

impl<T: Real> FourierTruncation<T> {
    pub fn new(k_max: usize, n: usize, h: T) -> Result<Self, DiscretizeError> {
        if n == 0 {
            return Err(DiscretizeError::InvalidTruncation("n must be at least 1".into()));
        }
        if !(h > T::zero() && h <= T::one()) {
            return Err(DiscretizeError::InvalidTruncation(format!("h must lie in (0, 1], got {h}")));
        }
        Ok(Self { k_max, n, h })
    }

    pub fn modes(&self) -> usize {
        2 * self.k_max + 1
    }

    pub fn dim(&self) -> usize {
        self.n * self.modes()
    }

    /// Row/column of component `i`, frequency `k`.
    pub fn index(&self, i: usize, k: i64) -> usize {
        i * self.modes() + (k + self.k_max as i64) as usize
    }

    pub fn frequency(&self, idx: usize) -> (usize, i64) {
        (idx / self.modes(), (idx % self.modes()) as i64 - self.k_max as i64)
    }

    /// `K(h) = ceil(c_K Ξ / h) + 2J`.
    pub fn rule(s: &MatrixSymbol<T>, sup_abs_z: T, h: T, c_k: T) -> Result<Self, DiscretizeError> {
        let xi = s.xi_window(sup_abs_z);
        let k = (c_k * xi / h).ceil().to_usize().unwrap_or(usize::MAX) + 2 * s.bandwidth();
        Self::new(k, s.dim(), h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Unperturbed,
    Perturbation { delta: f64 },
    Combined { delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix<T: Real> {
    pub entries: CMatrix<T>,
    pub trunc: FourierTruncation<T>,
    pub provenance: Provenance,
    /// `Σ |q|` of draw coefficients that did not fit in the truncation.
    pub dropped_mass: T,
}

impl<T: Real> OperatorMatrix<T> {
    /// `self - other`, keeping the truncation; `other` is taken as the
    /// perturbation `δQ`.
    pub fn minus_perturbation(&self, other: &Self) -> Result<Self, DiscretizeError> {
        self.check_compatible(other)?;
        let delta = match other.provenance {
            Provenance::Perturbation { delta } | Provenance::Combined { delta } => delta,
            Provenance::Unperturbed => 0.0,
        };
        Ok(Self {
            entries: self.entries.sub(&other.entries),
            trunc: self.trunc,
            provenance: Provenance::Combined { delta },
            dropped_mass: self.dropped_mass + other.dropped_mass,
        })
    }

    /// `self + other`.
    pub fn plus_perturbation(&self, other: &Self) -> Result<Self, DiscretizeError> {
        self.check_compatible(other)?;
        let delta = match other.provenance {
            Provenance::Perturbation { delta } | Provenance::Combined { delta } => delta,
            Provenance::Unperturbed => 0.0,
        };
        Ok(Self {
            entries: self.entries.add(&other.entries),
            trunc: self.trunc,
            provenance: Provenance::Combined { delta },
            dropped_mass: self.dropped_mass + other.dropped_mass,
        })
    }

    fn check_compatible(&self, other: &Self) -> Result<(), DiscretizeError> {
        if self.trunc.k_max != other.trunc.k_max || self.trunc.n != other.trunc.n {
            return Err(DiscretizeError::DimensionMismatch("truncations differ".into()));
        }
        Ok(())
    }

    /// `M - z I`.
    pub fn shifted(&self, z: Cplx<T>) -> CMatrix<T> {
        self.entries.shifted(z)
    }

    pub fn dim(&self) -> usize {
        self.entries.rows()
    }
}

fn check_bandwidth<T: Real>(s: &MatrixSymbol<T>, trunc: &FourierTruncation<T>) -> Result<(), DiscretizeError> {
    let j = s.bandwidth();
    let required = 2 * j;
    if trunc.k_max < required {
        return Err(DiscretizeError::BandwidthExceeded { k_max: trunc.k_max, required, bandwidth: j });
    }
    Ok(())
}

/// Matrix of `P` on the truncated Fourier basis `e_k = e^{ikx}/√(2π)`.
///
/// Left-ordered terms `A_α (hD)^α` give `Σ_α Â_α^{ij}(l-k) (hk)^α`;
/// right-ordered terms `(hD)^α A_α` give `Σ_α (hl)^α Â_α^{ij}(l-k)`.
pub fn assemble_operator<T: Real>(
    s: &MatrixSymbol<T>,
    trunc: &FourierTruncation<T>,
) -> Result<OperatorMatrix<T>, DiscretizeError> {
    if s.dim() != trunc.n {
        return Err(DiscretizeError::DimensionMismatch(format!("symbol n = {}, truncation n = {}", s.dim(), trunc.n)));
    }
    if !s.is_semiclassical() && trunc.h != T::one() {
        return Err(DiscretizeError::InvalidTruncation("the classical operator is assembled with h = 1".into()));
    }
    check_bandwidth(s, trunc)?;
    let n = trunc.n;
    let kk = trunc.k_max as i64;
    let mut m = CMatrix::zeros(trunc.dim(), trunc.dim());
    let powers = |k: i64| -> Vec<T> {
        let hk = trunc.h * T::from_i64_lossy(k);
        (0..=s.order()).map(|a| hk.powi(a as i32)).collect()
    };
    let table: Vec<Vec<T>> = (-kk..=kk).map(powers).collect();
    for i in 0..n {
        for j in 0..n {
            for alpha in 0..=s.order() {
                let c = s.coefficient(alpha, i, j);
                for (freq, value) in c.terms() {
                    for k in -kk..=kk {
                        let l = k + freq;
                        if l < -kk || l > kk {
                            continue;
                        }
                        let w = match s.coefficient_order() {
                            CoefficientOrder::Left => table[(k + kk) as usize][alpha],
                            CoefficientOrder::Right => table[(l + kk) as usize][alpha],
                        };
                        let (r, col) = (trunc.index(i, l), trunc.index(j, k));
                        m[(r, col)] += value * w;
                    }
                }
            }
        }
    }
    Ok(OperatorMatrix { entries: m, trunc: *trunc, provenance: Provenance::Unperturbed, dropped_mass: T::zero() })
}

/// `δ Q_ω` with `Q_ω = Σ_α Q_α(x) (hD)^α` and
/// `Q_α^{ij}(x) = Σ_k q_{α,k}^{ij} e^{ikx}/√(2π)`.
pub fn assemble_perturbation<T: Real>(
    draw: &PerturbationDraw,
    trunc: &FourierTruncation<T>,
    delta: T,
) -> Result<OperatorMatrix<T>, DiscretizeError> {
    let mut out = assemble_perturbation_weighted(draw, trunc, |_| delta)?;
    out.provenance = Provenance::Perturbation { delta: delta.to_f64_lossy() };
    Ok(out)
}

/// Like [`assemble_perturbation`] with an order-dependent factor `w(α)`
/// in place of `δ`.
pub fn assemble_perturbation_weighted<T: Real>(
    draw: &PerturbationDraw,
    trunc: &FourierTruncation<T>,
    weight: impl Fn(usize) -> T,
) -> Result<OperatorMatrix<T>, DiscretizeError> {
    if draw.n() != trunc.n {
        return Err(DiscretizeError::DimensionMismatch(format!("draw n = {}, truncation n = {}", draw.n(), trunc.n)));
    }
    let kk = trunc.k_max as i64;
    let mut m = CMatrix::zeros(trunc.dim(), trunc.dim());
    let inv_sqrt_2pi = T::one() / T::TAU().sqrt();
    let mut dropped = T::zero();
    for (&(alpha, i, j, freq), &q) in draw.coefficients() {
        let q = cx(T::lit(q.re), T::lit(q.im));
        if freq.abs() > 2 * kk {
            dropped += q.norm();
            continue;
        }
        let w = weight(alpha);
        if w == T::zero() {
            continue;
        }
        let scaled = q * inv_sqrt_2pi * w;
        for k in -kk..=kk {
            let l = k + freq;
            if l < -kk || l > kk {
                continue;
            }
            let hk = (trunc.h * T::from_i64_lossy(k)).powi(alpha as i32);
            m[(trunc.index(i, l), trunc.index(j, k))] += scaled * hk;
        }
    }
    let delta = weight(0).to_f64_lossy();
    Ok(OperatorMatrix { entries: m, trunc: *trunc, provenance: Provenance::Perturbation { delta }, dropped_mass: dropped })
}

/// `w(k) = (Σ_{α ≤ m} (hk)^{2α})^{1/2}` for `k = -K..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolevWeights<T> {
    pub m: usize,
    pub h: T,
    pub weights: Vec<T>,
}

impl<T: Real> SobolevWeights<T> {
    pub fn new(m: usize, h: T, k_max: usize) -> Self {
        let kk = k_max as i64;
        let weights = (-kk..=kk)
            .map(|k| {
                let hk2 = (h * T::from_i64_lossy(k)).powi(2);
                (0..=m).map(|a| hk2.powi(a as i32)).sum::<T>().sqrt()
            })
            .collect();
        Self { m, h, weights }
    }

    pub fn weight(&self, k: i64) -> T {
        let kk = (self.weights.len() / 2) as i64;
        self.weights[(k + kk) as usize]
    }
}

/// `‖M diag(1/w)‖₂`, the truncated `H^m_h → L²` norm.
pub fn operator_norm_hm_to_l2<T: Real>(m: &OperatorMatrix<T>, w: &SobolevWeights<T>) -> Result<T, DiscretizeError> {
    let modes = m.trunc.modes();
    if w.weights.len() != modes {
        return Err(DiscretizeError::DimensionMismatch(format!(
            "{} weights for {} modes",
            w.weights.len(),
            modes
        )));
    }
    let inv: Vec<T> = (0..m.dim()).map(|c| T::one() / w.weights[c % modes]).collect();
    Ok(linalg::norm2(&m.entries.scale_columns(&inv)))
}

/// All eigenvalues, sorted by `(Re, Im)`.
pub fn eigenvalues<T: Real>(m: &OperatorMatrix<T>) -> Result<Vec<Cplx<T>>, DiscretizeError> {
    if !m.entries.is_finite() {
        return Err(DiscretizeError::Linalg(LinalgError::NonFinite));
    }
    Ok(linalg::eigenvalues(&m.entries)?)
}

pub fn count_in<T: Real>(eigs: &[Cplx<T>], domain: &SpectralDomain<T>) -> usize {
    eigs.iter().filter(|z| domain.contains(**z)).count()
}

pub fn count_eigenvalues<T: Real>(m: &OperatorMatrix<T>, domain: &SpectralDomain<T>) -> Result<usize, DiscretizeError> {
    Ok(count_in(&eigenvalues(m)?, domain))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub counts: Vec<(usize, usize)>,
    pub stabilized: bool,
}

/// Counts in `Γ` of `P - δQ_ω` for each `K` in `k_list`.
pub fn truncation_convergence<T: Real>(
    s: &MatrixSymbol<T>,
    h: T,
    domain: &SpectralDomain<T>,
    draw: Option<&PerturbationDraw>,
    delta: T,
    k_list: &[usize],
) -> Result<TruncationReport, DiscretizeError> {
    if k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DiscretizeError::InvalidTruncation("K list must be increasing".into()));
    }
    let mut counts = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let trunc = FourierTruncation::new(k, s.dim(), h)?;
        let mut m = assemble_operator(s, &trunc)?;
        if let Some(d) = draw {
            m = m.minus_perturbation(&assemble_perturbation(d, &trunc, delta)?)?;
        }
        counts.push((k, count_eigenvalues(&m, domain)?));
    }
    let stabilized = counts.len() >= 2 && counts[counts.len() - 1].1 == counts[counts.len() - 2].1;
    Ok(TruncationReport { counts, stabilized })
}

/// `σ_min(M - z)` at each grid node.
pub fn sigma_min_map<T: Real>(m: &OperatorMatrix<T>, z_grid: &[Cplx<T>]) -> Vec<T> {
    z_grid.par_iter().map(|&z| linalg::sigma_min(&m.shifted(z))).collect()
}

/// Same as [`sigma_min_map`] but assembles `P(h)` first.
pub fn sigma_min_map_for<T: Real>(
    s: &MatrixSymbol<T>,
    trunc: &FourierTruncation<T>,
    z_grid: &[Cplx<T>],
) -> Result<Vec<T>, DiscretizeError> {
    Ok(sigma_min_map(&assemble_operator(s, trunc)?, z_grid))
}

/// Sorted spectrum with NaNs last.
pub fn sort_spectrum<T: Real>(eigs: &mut [Cplx<T>]) {
    eigs.sort_by(cmp_re_im);
}

// ---------------------------------------------------------------------------
// Text matrix files: "side n K h" header, then one row per line of
// space-separated "re im" pairs.

pub fn write_matrix<T: Real, W: Write>(m: &OperatorMatrix<T>, mut out: W) -> Result<(), DiscretizeError> {
    writeln!(out, "{} {} {} {:e}", m.dim(), m.trunc.n, m.trunc.k_max, m.trunc.h.to_f64_lossy())?;
    for r in 0..m.dim() {
        let mut line = String::with_capacity(m.dim() * 48);
        for (c, z) in m.entries.row(r).iter().enumerate() {
            if c > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{:e} {:e}", z.re.to_f64_lossy(), z.im.to_f64_lossy()));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_matrix<R: BufRead>(input: R) -> Result<OperatorMatrix<f64>, DiscretizeError> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| DiscretizeError::Format("empty file".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(DiscretizeError::Format(format!("bad header '{header}'")));
    }
    let bad = |what: &str| DiscretizeError::Format(format!("bad {what} in header"));
    let side: usize = parts[0].parse().map_err(|_| bad("side"))?;
    let n: usize = parts[1].parse().map_err(|_| bad("n"))?;
    let k_max: usize = parts[2].parse().map_err(|_| bad("K"))?;
    let h: f64 = parts[3].parse().map_err(|_| bad("h"))?;
    let trunc = FourierTruncation::new(k_max, n, h)?;
    if trunc.dim() != side {
        return Err(DiscretizeError::Format(format!("side {side} does not match n(2K+1) = {}", trunc.dim())));
    }
    let mut m = CMatrix::zeros(side, side);
    for r in 0..side {
        let line = lines.next().ok_or_else(|| DiscretizeError::Format(format!("missing row {r}")))??;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| DiscretizeError::Format(format!("bad number '{t}' in row {r}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 2 * side {
            return Err(DiscretizeError::Format(format!("row {r} has {} values, expected {}", vals.len(), 2 * side)));
        }
        for c in 0..side {
            m[(r, c)] = Cplx::new(vals[2 * c], vals[2 * c + 1]);
        }
    }
    Ok(OperatorMatrix { entries: m, trunc, provenance: Provenance::Unperturbed, dropped_mass: 0.0 })
}

/// Largest `|entry|` outside the band `|l - k| ≤ bw` within each block.
pub fn off_band_max<T: Real>(m: &OperatorMatrix<T>, bw: usize) -> T {
    let mut worst = T::zero();
    for r in 0..m.dim() {
        for c in 0..m.dim() {
            let (_, l) = m.trunc.frequency(r);
            let (_, k) = m.trunc.frequency(c);
            if (l - k).unsigned_abs() as usize > bw {
                worst = worst.max(m.entries[(r, c)].norm());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbol::fixtures::{f1, f3, f4};
    use crate::symbol::TrigPolynomial;

    fn c(re: f64, im: f64) -> Cplx<f64> {
        Cplx::new(re, im)
    }

    #[test]
    fn f1_truncation_is_triangular_with_diagonal_hk() {
        let t = FourierTruncation::new(2, 1, 0.1).unwrap();
        let m = assemble_operator(&f1::<f64>(), &t).unwrap();
        let want = [-0.2, -0.1, 0.0, 0.1, 0.2];
        for r in 0..5 {
            for col in 0..5 {
                let e = m.entries[(r, col)];
                if r == col {
                    assert_eq!(e, c(0.1 * (r as f64 - 2.0), 0.0));
                } else if r == col + 1 {
                    assert_eq!(e, c(1.0, 0.0));
                } else {
                    assert_eq!(e, c(0.0, 0.0));
                }
            }
        }
        let e = eigenvalues(&m).unwrap();
        for (z, w) in e.iter().zip(want) {
            assert_eq!(z.im, 0.0);
            assert!((z.re - w).abs() <= 1e-17);
        }
    }

    #[test]
    fn f4_truncation_is_nilpotent() {
        let t = FourierTruncation::new(6, 1, 1.0).unwrap();
        let m = assemble_operator(&f4::<f64>(), &t).unwrap();
        assert!(m.entries.is_lower_triangular());
        assert!(m.entries.diagonal().iter().all(|z| *z == c(0.0, 0.0)));
        assert!(eigenvalues(&m).unwrap().iter().all(|z| *z == c(0.0, 0.0)));
    }

    #[test]
    fn pure_derivative_is_diagonal() {
        let s = MatrixSymbol::scalar(vec![TrigPolynomial::zero(), TrigPolynomial::constant(c(1.0, 0.0))], true).unwrap();
        let t = FourierTruncation::new(3, 1, 0.5).unwrap();
        let m = assemble_operator(&s, &t).unwrap();
        let d: Vec<f64> = m.entries.diagonal().iter().map(|z| z.re).collect();
        assert_eq!(d, vec![-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5]);
        assert!(m.entries.is_upper_triangular() && m.entries.is_lower_triangular());
    }

    #[test]
    fn refuses_narrow_truncation_and_classical_h() {
        let s = f3::<f64>();
        let t = FourierTruncation::new(1, 2, 0.1).unwrap();
        assert!(matches!(assemble_operator(&s, &t), Err(DiscretizeError::BandwidthExceeded { .. })));
        let t = FourierTruncation::new(4, 1, 0.5).unwrap();
        assert!(matches!(assemble_operator(&f4::<f64>(), &t), Err(DiscretizeError::InvalidTruncation(_))));
    }

    #[test]
    fn adjoint_commutes_with_truncation() {
        let s = f3::<f64>();
        let t = FourierTruncation::new(5, 2, 0.2).unwrap();
        let a = assemble_operator(&s, &t).unwrap().entries.adjoint();
        let b = assemble_operator(&s.adjoint(), &t).unwrap().entries;
        assert_eq!(a, b);
    }

    #[test]
    fn block_band_structure() {
        let t = FourierTruncation::new(7, 2, 0.3).unwrap();
        let m = assemble_operator(&f3::<f64>(), &t).unwrap();
        assert_eq!(off_band_max(&m, 1), 0.0);
    }

    #[test]
    fn count_examples() {
        let t = FourierTruncation::new(10, 1, 0.1).unwrap();
        let m = assemble_operator(&f1::<f64>(), &t).unwrap();
        assert_eq!(count_eigenvalues(&m, &SpectralDomain::rectangle(-0.35, 0.35, -0.05, 0.05)).unwrap(), 7);
        assert_eq!(count_eigenvalues(&m, &SpectralDomain::rectangle(5.0, 6.0, 5.0, 6.0)).unwrap(), 0);
    }

    #[test]
    fn sobolev_norm_examples() {
        let t = FourierTruncation::new(4, 1, 1.0).unwrap();
        let id = OperatorMatrix {
            entries: CMatrix::identity(t.dim()),
            trunc: t,
            provenance: Provenance::Unperturbed,
            dropped_mass: 0.0,
        };
        let w0 = SobolevWeights::new(0, 1.0, 4);
        assert!((operator_norm_hm_to_l2(&id, &w0).unwrap() - 1.0f64).abs() < 1e-12);
        let h = 0.25;
        let t = FourierTruncation::new(4, 1, h).unwrap();
        let d = OperatorMatrix {
            entries: CMatrix::from_diagonal(&(-4..=4).map(|k| c(h * k as f64, 0.0)).collect::<Vec<_>>()),
            trunc: t,
            provenance: Provenance::Unperturbed,
            dropped_mass: 0.0,
        };
        let w1 = SobolevWeights::new(1, h, 4);
        let want = 1.0 / (1.0f64 + 1.0).sqrt();
        assert!((operator_norm_hm_to_l2(&d, &w1).unwrap() - want).abs() < 1e-12);
        assert!(w1.weights.iter().all(|w| *w >= 1.0));
        assert_eq!(w1.weight(3), w1.weight(-3));
    }

    #[test]
    fn sigma_min_examples() {
        let t = FourierTruncation::new(10, 1, 0.1).unwrap();
        let m = assemble_operator(&f1::<f64>(), &t).unwrap();
        let s = sigma_min_map(&m, &[c(0.3, 0.0), c(0.05, 3.0)]);
        assert!(s[0] < 1e-10);
        assert!(s[1] > 1.0);
    }

    #[test]
    fn matrix_file_roundtrip() {
        let t = FourierTruncation::new(3, 2, 0.25).unwrap();
        let m = assemble_operator(&f3::<f64>(), &t).unwrap();
        let mut buf = Vec::new();
        write_matrix(&m, &mut buf).unwrap();
        let back = read_matrix(&buf[..]).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.trunc, m.trunc);
        assert!(read_matrix(&b"3 1 1 0.5\n0 0 0 0\n"[..]).is_err());
    }
}
