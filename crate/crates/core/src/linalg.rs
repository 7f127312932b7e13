//! Dense complex linear algebra: matrices, LU, determinants, the non-Hermitian
//! eigenvalue solver and singular values.
//!
//! The eigensolver follows the classical route: radix-2 balancing, Householder
//! reduction to upper Hessenberg form, then implicitly shifted single-shift QR
//! sweeps on the active window with Wilkinson shifts. Every threshold is
//! relative, so scaling a matrix by a power of two scales the computed
//! eigenvalues by exactly that power of two.

use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::num::{abs1, cmp_re_im, cone, cx, czero, Cplx, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("QR iteration did not converge after {iterations} iterations (active block ends at {index})")]
    NoConvergence { iterations: usize, index: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix<T: Real> {
    rows: usize,
    cols: usize,
    data: Vec<Cplx<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![czero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = cone();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Cplx<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<Cplx<T>>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self { rows: r, cols: c, data: rows.iter().flatten().copied().collect() }
    }

    pub fn from_diagonal(diag: &[Cplx<T>]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[Cplx<T>] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Cplx<T>] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<Cplx<T>> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: Cplx<T>) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * s).collect() }
    }

    pub fn scale_real(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * s).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    /// `self - z I`.
    pub fn shifted(&self, z: Cplx<T>) -> Self {
        let mut m = self.clone();
        for i in 0..self.rows.min(self.cols) {
            m[(i, i)] -= z;
        }
        m
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == czero() {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Cplx<T>]) -> Vec<Cplx<T>> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).fold(czero(), |acc, (&a, &b)| acc + a * b))
            .collect()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data.iter().map(|z| z.norm()).fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn is_upper_triangular(&self) -> bool {
        (0..self.rows).all(|i| (0..i.min(self.cols)).all(|j| self[(i, j)] == czero()))
    }

    pub fn is_lower_triangular(&self) -> bool {
        (0..self.rows).all(|i| ((i + 1)..self.cols).all(|j| self[(i, j)] == czero()))
    }

    /// Multiply column `j` by `s` for every column.
    pub fn scale_columns(&self, s: &[T]) -> Self {
        assert_eq!(s.len(), self.cols);
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * s[j])
    }
}

impl<T: Real> Index<(usize, usize)> for CMatrix<T> {
    type Output = Cplx<T>;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Cplx<T> {
        &self.data[i * self.cols + j]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for CMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Cplx<T> {
        &mut self.data[i * self.cols + j]
    }
}

pub fn vec_norm<T: Real>(v: &[Cplx<T>]) -> T {
    v.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
}

/// `⟨a, b⟩ = Σ conj(a_i) b_i`.
pub fn dot_conj<T: Real>(a: &[Cplx<T>], b: &[Cplx<T>]) -> Cplx<T> {
    a.iter().zip(b).fold(czero(), |acc, (&x, &y)| acc + x.conj() * y)
}

// ---------------------------------------------------------------------------
// LU with partial pivoting

/// `P A = L U` with unit lower `L`.
#[derive(Debug, Clone)]
pub struct Lu<T: Real> {
    lu: CMatrix<T>,
    perm: Vec<usize>,
    odd: bool,
}

impl<T: Real> Lu<T> {
    pub fn new(a: &CMatrix<T>) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut odd = false;
        for k in 0..n {
            let mut p = k;
            let mut best = abs1(lu[(k, k)]);
            for i in (k + 1)..n {
                let v = abs1(lu[(i, k)]);
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                odd = !odd;
            }
            let piv = lu[(k, k)];
            if piv == czero() {
                continue;
            }
            for i in (k + 1)..n {
                let f = lu[(i, k)] / piv;
                lu[(i, k)] = f;
                if f == czero() {
                    continue;
                }
                for j in (k + 1)..n {
                    let u = lu[(k, j)];
                    lu[(i, j)] -= f * u;
                }
            }
        }
        Ok(Self { lu, perm, odd })
    }

    pub fn det(&self) -> Cplx<T> {
        let n = self.lu.rows;
        let mut d = if self.odd { -cone::<T>() } else { cone() };
        for i in 0..n {
            d *= self.lu[(i, i)];
        }
        d
    }

    /// Smallest pivot modulus; zero means exactly singular.
    pub fn min_pivot(&self) -> T {
        (0..self.lu.rows).map(|i| self.lu[(i, i)].norm()).fold(T::infinity(), T::min)
    }

    /// Solve `A x = b`. Zero pivots are replaced by a tiny multiple of the
    /// largest pivot, which is what inverse iteration needs.
    pub fn solve(&self, b: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let n = self.lu.rows;
        let guard = self.pivot_guard();
        let mut x: Vec<Cplx<T>> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / guarded(self.lu[(i, i)], guard);
        }
        x
    }

    /// Solve `A^H x = b`.
    pub fn solve_adjoint(&self, b: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let n = self.lu.rows;
        let guard = self.pivot_guard();
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for j in 0..i {
                s -= self.lu[(j, i)].conj() * z[j];
            }
            z[i] = s / guarded(self.lu[(i, i)], guard).conj();
        }
        for i in (0..n).rev() {
            let mut s = z[i];
            for j in (i + 1)..n {
                s -= self.lu[(j, i)].conj() * z[j];
            }
            z[i] = s;
        }
        let mut x = vec![czero(); n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }

    fn pivot_guard(&self) -> T {
        let n = self.lu.rows;
        let big = (0..n).map(|i| self.lu[(i, i)].norm()).fold(T::zero(), T::max);
        let tiny = T::epsilon() * T::epsilon();
        if big > T::zero() {
            big * tiny
        } else {
            tiny
        }
    }
}

fn guarded<T: Real>(p: Cplx<T>, guard: T) -> Cplx<T> {
    if p.norm() < guard {
        cx(guard, T::zero())
    } else {
        p
    }
}

pub fn det<T: Real>(a: &CMatrix<T>) -> Cplx<T> {
    match a.rows {
        0 => cone(),
        1 => a[(0, 0)],
        2 => a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)],
        _ => Lu::new(a).map(|lu| lu.det()).unwrap_or_else(|_| czero()),
    }
}

/// Classical adjugate via cofactors; intended for the small symbol matrices.
pub fn adjugate<T: Real>(a: &CMatrix<T>) -> CMatrix<T> {
    let n = a.rows;
    assert!(a.is_square());
    if n == 1 {
        return CMatrix::identity(1);
    }
    let mut adj = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let minor = CMatrix::from_fn(n - 1, n - 1, |r, c| {
                let rr = if r < i { r } else { r + 1 };
                let cc = if c < j { c } else { c + 1 };
                a[(rr, cc)]
            });
            let sign = if (i + j) % 2 == 0 { T::one() } else { -T::one() };
            // adj = transpose of the cofactor matrix
            adj[(j, i)] = det(&minor) * sign;
        }
    }
    adj
}

// ---------------------------------------------------------------------------
// Eigenvalues

/// All eigenvalues, sorted by `(Re, Im)`.
pub fn eigenvalues<T: Real>(a: &CMatrix<T>) -> Result<Vec<Cplx<T>>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let mut eigs = if a.is_upper_triangular() || a.is_lower_triangular() {
        a.diagonal()
    } else {
        let mut h = a.clone();
        balance(&mut h);
        hessenberg_reduce(&mut h);
        hessenberg_qr(&mut h)?
    };
    eigs.sort_by(cmp_re_im);
    Ok(eigs)
}

/// Radix-2 diagonal similarity scaling (no permutations).
fn balance<T: Real>(a: &mut CMatrix<T>) {
    let n = a.rows;
    let radix = T::lit(2.0);
    let sqrdx = radix * radix;
    let mut done = false;
    let mut sweeps = 0;
    while !done && sweeps < 100 {
        done = true;
        sweeps += 1;
        for i in 0..n {
            let mut c = T::zero();
            let mut r = T::zero();
            for j in 0..n {
                if j != i {
                    c += abs1(a[(j, i)]);
                    r += abs1(a[(i, j)]);
                }
            }
            if c == T::zero() || r == T::zero() {
                continue;
            }
            let s = c + r;
            let mut f = T::one();
            let mut g = r / radix;
            while c < g {
                f *= radix;
                c *= sqrdx;
            }
            g = r * radix;
            while c > g {
                f /= radix;
                c /= sqrdx;
            }
            if (c + r) / f < T::lit(0.95) * s {
                done = false;
                let ginv = T::one() / f;
                for j in 0..n {
                    a[(i, j)] = a[(i, j)] * ginv;
                }
                for j in 0..n {
                    a[(j, i)] = a[(j, i)] * f;
                }
            }
        }
    }
}

/// In-place Householder reduction to upper Hessenberg form.
fn hessenberg_reduce<T: Real>(a: &mut CMatrix<T>) {
    let n = a.rows;
    if n < 3 {
        return;
    }
    let two = T::lit(2.0);
    for k in 0..(n - 2) {
        let tail: T = ((k + 2)..n).map(|i| a[(i, k)].norm_sqr()).sum();
        if tail == T::zero() {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let alpha = (tail + x0.norm_sqr()).sqrt();
        let phase = if x0 == czero() { cone() } else { x0 / x0.norm() };
        let mut v: Vec<Cplx<T>> = ((k + 1)..n).map(|i| a[(i, k)]).collect();
        v[0] += phase * alpha;
        let vnorm2: T = v.iter().map(|z| z.norm_sqr()).sum();
        if vnorm2 == T::zero() {
            continue;
        }
        let beta = two / vnorm2;
        // H A
        for j in k..n {
            let mut s = czero();
            for (idx, vi) in v.iter().enumerate() {
                s += vi.conj() * a[(k + 1 + idx, j)];
            }
            let s = s * beta;
            for (idx, vi) in v.iter().enumerate() {
                a[(k + 1 + idx, j)] -= *vi * s;
            }
        }
        // (H A) H
        for i in 0..n {
            let mut s = czero();
            for (idx, vi) in v.iter().enumerate() {
                s += a[(i, k + 1 + idx)] * *vi;
            }
            let s = s * beta;
            for (idx, vi) in v.iter().enumerate() {
                a[(i, k + 1 + idx)] -= s * vi.conj();
            }
        }
        for i in (k + 2)..n {
            a[(i, k)] = czero();
        }
    }
}

/// Complex Givens rotation `G = [[c, s], [-conj(s), c]]` with `G [a; b] = [r; 0]`.
#[inline]
fn givens<T: Real>(a: Cplx<T>, b: Cplx<T>) -> (T, Cplx<T>) {
    if b == czero() {
        return (T::one(), czero());
    }
    if a == czero() {
        return (T::zero(), b.conj() / b.norm());
    }
    let na = a.norm();
    let norm = na.hypot(b.norm());
    let alpha = a / na;
    (na / norm, alpha * b.conj() / norm)
}

fn wilkinson_shift<T: Real>(a: Cplx<T>, b: Cplx<T>, c: Cplx<T>, d: Cplx<T>) -> Cplx<T> {
    let half = T::lit(0.5);
    let p = (a - d) * half;
    let disc = (p * p + b * c).sqrt();
    let den_plus = p + disc;
    let den_minus = p - disc;
    let den = if den_plus.norm() >= den_minus.norm() { den_plus } else { den_minus };
    if den == czero() {
        d
    } else {
        d - b * c / den
    }
}

/// Eigenvalues of an upper Hessenberg matrix, destroying it.
fn hessenberg_qr<T: Real>(h: &mut CMatrix<T>) -> Result<Vec<Cplx<T>>, LinalgError> {
    let n = h.rows;
    let mut eigs = vec![czero(); n];
    if n == 0 {
        return Ok(eigs);
    }
    let eps = T::epsilon();
    let max_total = 30 * n.max(10);
    let mut total = 0usize;
    let mut its = 0usize;
    let mut hi = n - 1;
    loop {
        if hi == 0 {
            eigs[0] = h[(0, 0)];
            break;
        }
        // deflation scan
        let mut l = hi;
        while l > 0 {
            let mut tst = abs1(h[(l - 1, l - 1)]) + abs1(h[(l, l)]);
            if tst == T::zero() {
                if l >= 2 {
                    tst += abs1(h[(l - 1, l - 2)]);
                }
                if l + 1 <= hi {
                    tst += abs1(h[(l + 1, l)]);
                }
            }
            if abs1(h[(l, l - 1)]) <= eps * tst {
                break;
            }
            l -= 1;
        }
        if l > 0 {
            h[(l, l - 1)] = czero();
        }
        if l == hi {
            eigs[hi] = h[(hi, hi)];
            hi -= 1;
            its = 0;
            continue;
        }
        total += 1;
        its += 1;
        if total > max_total {
            return Err(LinalgError::NoConvergence { iterations: total, index: hi });
        }
        let shift = if its % 10 == 0 {
            h[(hi, hi)] + cx(T::lit(0.75) * abs1(h[(hi, hi - 1)]), T::zero())
        } else {
            wilkinson_shift(h[(hi - 1, hi - 1)], h[(hi - 1, hi)], h[(hi, hi - 1)], h[(hi, hi)])
        };
        // implicit single-shift sweep on the window [l, hi]
        let mut x = h[(l, l)] - shift;
        let mut y = h[(l + 1, l)];
        for k in l..hi {
            let (c, s) = givens(x, y);
            let col0 = if k > l { k - 1 } else { l };
            for j in col0..=hi {
                let a0 = h[(k, j)];
                let a1 = h[(k + 1, j)];
                h[(k, j)] = a0 * c + s * a1;
                h[(k + 1, j)] = -s.conj() * a0 + a1 * c;
            }
            if k > l {
                h[(k + 1, k - 1)] = czero();
            }
            let row1 = (k + 2).min(hi);
            for i in l..=row1 {
                let a0 = h[(i, k)];
                let a1 = h[(i, k + 1)];
                h[(i, k)] = a0 * c + a1 * s.conj();
                h[(i, k + 1)] = -a0 * s + a1 * c;
            }
            if k + 1 < hi {
                x = h[(k + 1, k)];
                y = h[(k + 2, k)];
            }
        }
    }
    Ok(eigs)
}

// ---------------------------------------------------------------------------
// Singular values

/// Singular values in descending order, optionally with the right singular
/// vectors (columns of `V`, same order). One-sided Jacobi, which keeps small
/// singular values accurate.
pub fn svd<T: Real>(a: &CMatrix<T>, want_v: bool) -> (Vec<T>, Option<CMatrix<T>>) {
    let (m, n) = (a.rows, a.cols);
    if n == 0 {
        return (Vec::new(), want_v.then(|| CMatrix::zeros(0, 0)));
    }
    // column-major working copy
    let mut u: Vec<Vec<Cplx<T>>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    let mut v: Option<Vec<Vec<Cplx<T>>>> = want_v.then(|| {
        (0..n).map(|j| (0..n).map(|i| if i == j { cone() } else { czero() }).collect()).collect()
    });
    let tol = T::epsilon() * T::lit(4.0);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: T = u[p].iter().map(|z| z.norm_sqr()).sum();
                let beta: T = u[q].iter().map(|z| z.norm_sqr()).sum();
                let gamma = dot_conj(&u[p], &u[q]);
                let g = gamma.norm();
                if g == T::zero() || g <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let e = gamma / g;
                let zeta = (beta - alpha) / (g + g);
                let sgn = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sgn / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut u, p, q, c, s, e);
                if let Some(v) = v.as_mut() {
                    rotate_pair(v, p, q, c, s, e);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(T, usize)> = u.iter().enumerate().map(|(j, col)| (vec_norm(col), j)).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let sv: Vec<T> = order.iter().map(|&(s, _)| s).collect();
    let vmat = v.map(|v| CMatrix::from_fn(n, n, |i, k| v[order[k].1][i]));
    (sv, vmat)
}

fn rotate_pair<T: Real>(cols: &mut [Vec<Cplx<T>>], p: usize, q: usize, c: T, s: T, e: Cplx<T>) {
    let (left, right) = cols.split_at_mut(q);
    let up = &mut left[p];
    let uq = &mut right[0];
    let ebar = e.conj();
    for (a, b) in up.iter_mut().zip(uq.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = x * c - ebar * y * s;
        *b = e * x * s + y * c;
    }
}

pub fn singular_values<T: Real>(a: &CMatrix<T>) -> Vec<T> {
    if a.rows < a.cols {
        return svd(&a.adjoint(), false).0;
    }
    svd(a, false).0
}

/// Spectral norm (largest singular value).
pub fn norm2<T: Real>(a: &CMatrix<T>) -> T {
    singular_values(a).first().copied().unwrap_or_else(T::zero)
}

/// Smallest singular value of a square matrix.
///
/// Inverse iteration on `(A^H A)^{-1}` through one LU factorization; the
/// returned value is `‖A v‖` for the converged unit vector, so it is always an
/// upper bound. Falls back to Jacobi when the iteration stalls.
pub fn sigma_min<T: Real>(a: &CMatrix<T>) -> T {
    let n = a.rows;
    if n == 0 {
        return T::zero();
    }
    if n <= 8 || !a.is_square() {
        return singular_values(a).last().copied().unwrap_or_else(T::zero);
    }
    let lu = match Lu::new(a) {
        Ok(lu) => lu,
        Err(_) => return singular_values(a).last().copied().unwrap_or_else(T::zero),
    };
    if lu.min_pivot() == T::zero() {
        return T::zero();
    }
    // deterministic, non-symmetric start vector
    let mut x: Vec<Cplx<T>> = (0..n)
        .map(|i| {
            let t = T::from_usize_lossy(i + 1);
            cx((t * T::lit(0.7548776662)).sin() + T::lit(1.1), (t * T::lit(0.5698402910)).cos())
        })
        .collect();
    let nx = vec_norm(&x);
    x.iter_mut().for_each(|z| *z = *z / nx);
    let mut prev = T::infinity();
    for _ in 0..300 {
        let y = lu.solve_adjoint(&x);
        let w = lu.solve(&y);
        let nw = vec_norm(&w);
        if !(nw.is_finite() && nw > T::zero()) {
            break;
        }
        x = w.into_iter().map(|z| z / nw).collect();
        let est = vec_norm(&a.mul_vec(&x));
        if (prev - est).abs() <= T::lit(1e-12) * est.max(T::min_positive_value()) {
            return est;
        }
        prev = est;
    }
    singular_values(a).last().copied().unwrap_or_else(T::zero)
}

/// Unit vector spanning the (numerical) right null space of a small square
/// matrix: the right singular vector of the smallest singular value.
pub fn null_vector<T: Real>(a: &CMatrix<T>) -> Vec<Cplx<T>> {
    let n = a.cols;
    let (_, v) = svd(a, true);
    let v = v.expect("requested");
    (0..n).map(|i| v[(i, n - 1)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Cplx<f64> {
        Cplx::new(re, im)
    }

    #[test]
    fn diagonal_spectrum() {
        let m = CMatrix::from_diagonal(&[c(1.0, 0.0), c(0.0, 2.0)]);
        let e = eigenvalues(&m).unwrap();
        assert_eq!(e, vec![c(0.0, 2.0), c(1.0, 0.0)]);
    }

    #[test]
    fn companion_cube_roots_of_unity() {
        // z^3 - 1
        let m = CMatrix::from_rows(&[
            vec![c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
            vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)],
        ]);
        let e = eigenvalues(&m).unwrap();
        let s3 = 3f64.sqrt() / 2.0;
        let want = [c(-0.5, -s3), c(-0.5, s3), c(1.0, 0.0)];
        for (a, b) in e.iter().zip(want.iter()) {
            assert!((a - b).norm() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn triangular_matrices_return_their_diagonal_exactly() {
        let m = CMatrix::from_rows(&[
            vec![c(0.3, 0.0), c(0.0, 0.0)],
            vec![c(1.0, 0.0), c(-0.1, 0.0)],
        ]);
        assert_eq!(eigenvalues(&m).unwrap(), vec![c(-0.1, 0.0), c(0.3, 0.0)]);
    }

    #[test]
    fn dense_random_backward_error() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for n in [5usize, 17, 40] {
            let a = CMatrix::from_fn(n, n, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let e = eigenvalues(&a).unwrap();
            assert_eq!(e.len(), n);
            let na = norm2(&a);
            for l in &e {
                let s = singular_values(&a.shifted(*l)).last().copied().unwrap();
                assert!(s <= 1e-10 * na, "n={n} lambda={l} smin={s}");
            }
            // trace is preserved
            let tr: Cplx<f64> = a.diagonal().iter().sum();
            let se: Cplx<f64> = e.iter().sum();
            assert!((tr - se).norm() < 1e-10 * na * n as f64);
        }
    }

    #[test]
    fn power_of_two_scaling_is_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = CMatrix::from_fn(12, 12, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let e1 = eigenvalues(&a).unwrap();
        let e2 = eigenvalues(&a.scale_real(0.0625)).unwrap();
        for (x, y) in e1.iter().zip(&e2) {
            assert_eq!(*x * 0.0625, *y);
        }
    }

    #[test]
    fn det_and_adjugate() {
        let a = CMatrix::from_rows(&[
            vec![c(2.0, 1.0), c(1.0, 0.0), c(0.0, 0.0)],
            vec![c(0.0, 0.0), c(3.0, 0.0), c(1.0, -1.0)],
            vec![c(1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)],
        ]);
        let d = det(&a);
        let d_lu = Lu::new(&a).unwrap().det();
        assert!((d - d_lu).norm() < 1e-14);
        let prod = a.matmul(&adjugate(&a));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { d } else { c(0.0, 0.0) };
                assert!((prod[(i, j)] - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_values_of_diagonal() {
        let a = CMatrix::from_diagonal(&[c(3.0, 4.0), c(0.0, -1.0), c(0.5, 0.0)]);
        let s = singular_values(&a);
        assert!((s[0] - 5.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14 && (s[2] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn sigma_min_inverse_iteration_agrees_with_jacobi() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = CMatrix::from_fn(30, 30, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let s_j = *singular_values(&a).last().unwrap();
        let s_i = sigma_min(&a);
        assert!((s_j - s_i).abs() < 1e-8 * s_j.max(1e-3), "{s_j} {s_i}");
    }

    #[test]
    fn lu_solves_and_adjoint_solves() {
        let a = CMatrix::from_rows(&[
            vec![c(0.0, 1.0), c(2.0, 0.0)],
            vec![c(1.0, 1.0), c(0.5, -1.0)],
        ]);
        let lu = Lu::new(&a).unwrap();
        let b = vec![c(1.0, 2.0), c(-1.0, 0.5)];
        let x = lu.solve(&b);
        let r = a.mul_vec(&x);
        assert!((r[0] - b[0]).norm() < 1e-14 && (r[1] - b[1]).norm() < 1e-14);
        let y = lu.solve_adjoint(&b);
        let r = a.adjoint().mul_vec(&y);
        assert!((r[0] - b[0]).norm() < 1e-14 && (r[1] - b[1]).norm() < 1e-14);
    }

    #[test]
    fn null_vector_of_rank_deficient() {
        let a = CMatrix::from_rows(&[vec![c(1.0, 0.0), c(1.0, 0.0)], vec![c(2.0, 0.0), c(2.0, 0.0)]]);
        let v = null_vector(&a);
        let r = a.mul_vec(&v);
        assert!(vec_norm(&r) < 1e-14);
        assert!((vec_norm(&v) - 1.0).abs() < 1e-14);
    }
}
