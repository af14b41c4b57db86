//! Dense helpers over faer plus a small complex CSR type and the
//! polynomial solvers used on large sparse operators.

use crate::error::{Error, Result};
use faer::{c64, Mat, MatRef, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const ZERO: c64 = c64 { re: 0.0, im: 0.0 };
pub const ONE: c64 = c64 { re: 1.0, im: 0.0 };
pub const I: c64 = c64 { re: 0.0, im: 1.0 };

pub fn cis(phi: f64) -> c64 {
    c64::new(phi.cos(), phi.sin())
}

/// Eigenvalues (ascending) and orthonormal eigenvectors of a Hermitian matrix.
pub fn eigh(a: MatRef<'_, c64>) -> Result<(Vec<f64>, Mat<c64>)> {
    let e = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("hermitian eigensolver: {e:?}")))?;
    let n = a.nrows();
    let s = e.S();
    let mut order: Vec<usize> = (0..n).collect();
    let vals: Vec<f64> = (0..n).map(|i| s[i].re).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    let u = e.U();
    let vecs = Mat::from_fn(n, n, |i, j| u[(i, order[j])]);
    Ok((order.iter().map(|&i| vals[i]).collect(), vecs))
}

pub fn eigvalsh(a: MatRef<'_, c64>) -> Result<Vec<f64>> {
    let mut v = a
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Numerical(format!("hermitian eigensolver: {e:?}")))?;
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// V diag(f(λ)) V*.
pub fn spectral_apply(vals: &[f64], vecs: MatRef<'_, c64>, f: impl Fn(f64) -> c64) -> Mat<c64> {
    let n = vecs.nrows();
    let fv: Vec<c64> = vals.iter().map(|&l| f(l)).collect();
    let scaled = Mat::from_fn(n, vals.len(), |i, j| vecs[(i, j)] * fv[j]);
    &scaled * vecs.adjoint()
}

pub fn hermitian_part(a: MatRef<'_, c64>) -> Mat<c64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| (a[(i, j)] + a[(j, i)].conj()) * 0.5)
}

pub fn inverse(a: MatRef<'_, c64>) -> Mat<c64> {
    use faer::linalg::solvers::DenseSolveCore;
    a.partial_piv_lu().inverse()
}

/// Largest singular value.
pub fn op_norm(a: MatRef<'_, c64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    let g = if a.nrows() >= a.ncols() {
        a.adjoint() * a
    } else {
        a * a.adjoint()
    };
    eigvalsh(g.as_ref())
        .map(|v| v.last().copied().unwrap_or(0.0).max(0.0).sqrt())
        .unwrap_or(f64::NAN)
}

/// Operator norm of a Hermitian matrix, max |λ|.
pub fn hermitian_norm(a: MatRef<'_, c64>) -> Result<f64> {
    let v = eigvalsh(a)?;
    Ok(v.iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

pub fn max_abs(a: MatRef<'_, c64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].norm());
        }
    }
    m
}

pub fn identity(n: usize) -> Mat<c64> {
    Mat::from_fn(n, n, |i, j| if i == j { ONE } else { ZERO })
}

/// Orthonormal basis of the column span (columns assumed independent).
pub fn orthonormalize(a: MatRef<'_, c64>) -> Mat<c64> {
    a.qr().compute_thin_Q()
}

pub fn col(a: MatRef<'_, c64>, j: usize) -> Vec<c64> {
    (0..a.nrows()).map(|i| a[(i, j)]).collect()
}

pub fn column_matrix(v: &[c64]) -> Mat<c64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn dot(a: &[c64], b: &[c64]) -> c64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm(a: &[c64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub fn random_unit_vector(n: usize, seed: u64) -> Vec<c64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<c64> = (0..n)
        .map(|_| c64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
        .collect();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Mat<c64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Mat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = c64::new(StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        }
    }
    m
}

/// Compressed-row complex sparse matrix.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<c64>,
}

impl CsrMatrix {
    /// Square matrix from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, c64)>) -> Self {
        t.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<c64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in t {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            cols.push(j);
            vals.push(v);
            row_ptr[i + 1] += 1;
            last = Some((i, j));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, c64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> c64 {
        self.row(i).filter(|&(c, _)| c == j).map(|(_, v)| v).sum()
    }

    pub fn matvec(&self, x: &[c64], y: &mut [c64]) {
        for i in 0..self.n {
            let mut acc = ZERO;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
    }

    pub fn apply(&self, x: &[c64]) -> Vec<c64> {
        let mut y = vec![ZERO; self.n];
        self.matvec(x, &mut y);
        y
    }

    pub fn matmat(&self, x: MatRef<'_, c64>) -> Mat<c64> {
        let mut y = Mat::zeros(self.n, x.ncols());
        for j in 0..x.ncols() {
            for i in 0..self.n {
                let mut acc = ZERO;
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.vals[k] * x[(self.cols[k], j)];
                }
                y[(i, j)] = acc;
            }
        }
        y
    }

    pub fn to_dense(&self) -> Mat<c64> {
        let mut m = Mat::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// max |A_ij - conj(A_ji)|.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut d = 0.0f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d = d.max((v - self.get(j, i).conj()).norm());
            }
        }
        d
    }

    /// Gershgorin enclosure of the (real) spectrum.
    pub fn spectral_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.n {
            let mut d = 0.0;
            let mut r = 0.0;
            for (j, v) in self.row(i) {
                if j == i {
                    d += v.re;
                } else {
                    r += v.norm();
                }
            }
            lo = lo.min(d - r);
            hi = hi.max(d + r);
        }
        (lo, hi)
    }
}

/// Hermitian operator known through its action on blocks of vectors.
pub trait HermitianOperator: Sync {
    fn dim(&self) -> usize;
    fn apply_block(&self, x: MatRef<'_, c64>) -> Mat<c64>;
    /// An interval enclosing the spectrum.
    fn spectral_bounds(&self) -> (f64, f64);
}

impl HermitianOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply_block(&self, x: MatRef<'_, c64>) -> Mat<c64> {
        self.matmat(x)
    }

    fn spectral_bounds(&self) -> (f64, f64) {
        CsrMatrix::spectral_bounds(self)
    }
}

/// Bessel functions J_0..J_{nmax}(x) for x ≥ 0 by downward recurrence.
pub fn bessel_j_sequence(x: f64, nmax: usize) -> Vec<f64> {
    if x == 0.0 {
        let mut v = vec![0.0; nmax + 1];
        v[0] = 1.0;
        return v;
    }
    let start = (nmax.max(x.ceil() as usize) + 30 + (x.sqrt() * 10.0) as usize) | 1;
    let mut out = vec![0.0; nmax + 1];
    let mut jp1 = 0.0;
    let mut j = 1e-300;
    let mut even_sum = 0.0;
    for k in (1..=start).rev() {
        let jm1 = 2.0 * k as f64 / x * j - jp1;
        jp1 = j;
        j = jm1;
        if j.abs() > 1e250 {
            // rescale to stay in range
            j *= 1e-250;
            jp1 *= 1e-250;
            even_sum *= 1e-250;
            out.iter_mut().for_each(|v| *v *= 1e-250);
        }
        let km1 = k - 1;
        if km1 <= nmax {
            out[km1] = j;
        }
        if km1 % 2 == 0 && km1 > 0 {
            even_sum += j;
        }
    }
    // J_0 + 2 Σ J_2k = 1
    let norm = j + 2.0 * even_sum;
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// e^{-itH} v by Chebyshev expansion; `tol` bounds the discarded tail.
pub fn chebyshev_propagate(h: &CsrMatrix, v: &[c64], t: f64, tol: f64) -> Vec<c64> {
    let (lo, hi) = h.spectral_bounds();
    let a = 0.5 * (hi - lo) * 1.01 + 1e-12;
    let c = 0.5 * (hi + lo);
    let x = (t * a).abs();
    let nmax = (x * 1.5 + 40.0) as usize + 20;
    let jk = bessel_j_sequence(x, nmax);
    let n = v.len();
    // T_k recursion on the scaled operator (H - c)/a
    let scaled = |src: &[c64], dst: &mut [c64]| {
        h.matvec(src, dst);
        for i in 0..n {
            dst[i] = (dst[i] - src[i] * c) / a;
        }
    };
    let sign = if t >= 0.0 { -I } else { I };
    let mut out: Vec<c64> = v.iter().map(|x| x * jk[0]).collect();
    let mut t0 = v.to_vec();
    let mut t1 = vec![ZERO; n];
    scaled(&t0, &mut t1);
    let mut coef = sign;
    for i in 0..n {
        out[i] += t1[i] * (coef * 2.0 * jk[1]);
    }
    let mut tmp = vec![ZERO; n];
    for k in 2..=nmax {
        scaled(&t1, &mut tmp);
        for i in 0..n {
            tmp[i] = tmp[i] * 2.0 - t0[i];
        }
        std::mem::swap(&mut t0, &mut t1);
        std::mem::swap(&mut t1, &mut tmp);
        coef *= sign;
        let w = coef * 2.0 * jk[k];
        for i in 0..n {
            out[i] += t1[i] * w;
        }
        if k as f64 > x && jk[k].abs() < tol * 1e-3 {
            break;
        }
    }
    let phase = cis(-t * c);
    out.iter_mut().for_each(|z| *z *= phase);
    out
}

/// Chebyshev polynomial of degree `deg` in H that damps [a, b] and amplifies below a.
pub fn chebyshev_filter<O: HermitianOperator + ?Sized>(h: &O, x: MatRef<'_, c64>, deg: usize, a: f64, b: f64) -> Mat<c64> {
    let e = 0.5 * (b - a);
    let c = 0.5 * (b + a);
    let apply = |m: MatRef<'_, c64>| {
        let mut y = h.apply_block(m);
        for j in 0..y.ncols() {
            for i in 0..y.nrows() {
                y[(i, j)] = (y[(i, j)] - m[(i, j)] * c) / e;
            }
        }
        y
    };
    let mut y0 = x.to_owned();
    let mut y1 = apply(x);
    for _ in 2..=deg {
        let mut y2 = apply(y1.as_ref());
        for j in 0..y2.ncols() {
            for i in 0..y2.nrows() {
                y2[(i, j)] = y2[(i, j)] * 2.0 - y0[(i, j)];
            }
        }
        y0 = y1;
        y1 = y2;
        // keep magnitudes bounded
        let s = max_abs(y1.as_ref());
        if s > 1e100 {
            let k = faer::Scale(c64::new(1.0 / s, 0.0));
            y0 *= k;
            y1 *= k;
        }
    }
    y1
}

/// Eigenpairs of a sparse Hermitian operator below `upper`, found by
/// Chebyshev-filtered subspace iteration with Rayleigh-Ritz.
#[derive(Clone, Debug)]
pub struct WindowEigen {
    pub values: Vec<f64>,
    pub vectors: Mat<c64>,
    /// smallest Ritz value of the subspace that lies above `upper`
    pub next_value: f64,
    pub residual: f64,
    pub iterations: usize,
}

pub fn lowest_eigenpairs_below<O: HermitianOperator + ?Sized>(
    h: &O,
    upper: f64,
    expected: usize,
    seed: u64,
) -> Result<WindowEigen> {
    let n = h.dim();
    let (_, hmax) = h.spectral_bounds();
    let mut block = (expected + expected / 8 + 16).min(n);
    let mut x = random_matrix(n, block, seed);
    let deg = 24;
    for it in 0..200 {
        let q = orthonormalize(x.as_ref());
        let hq = h.apply_block(q.as_ref());
        let small = hermitian_part((q.adjoint() * &hq).as_ref());
        let (vals, w) = eigh(small.as_ref())?;
        let ritz = &q * &w;
        let hr = &hq * &w;
        let inside: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] < upper).collect();
        // residuals of the wanted pairs plus two guards certify that nothing
        // below `upper` is missing
        let checked = (inside.len() + 2).min(vals.len());
        let mut res = 0.0f64;
        for j in 0..checked {
            let mut r2 = 0.0;
            for i in 0..n {
                r2 += (hr[(i, j)] - ritz[(i, j)] * vals[j]).norm_sqr();
            }
            res = res.max(r2.sqrt());
        }
        let scale = hmax.abs().max(1.0);
        let converged = res < 1e-9 * scale;
        if inside.len() + 4 > block && block < n {
            block = (block + block / 2).min(n);
            x = Mat::from_fn(n, block, |i, j| {
                if j < ritz.ncols() {
                    ritz[(i, j)]
                } else {
                    random_matrix(1, 1, seed.wrapping_add((i * block + j) as u64))[(0, 0)]
                }
            });
            continue;
        }
        if converged {
            let k = inside.len();
            return Ok(WindowEigen {
                values: vals[..k].to_vec(),
                vectors: Mat::from_fn(n, k, |i, j| ritz[(i, j)]),
                next_value: vals.get(k).copied().unwrap_or(f64::INFINITY),
                residual: res,
                iterations: it + 1,
            });
        }
        // damp everything above the highest wanted Ritz value
        let cut = vals[(inside.len() + 2).min(vals.len() - 1)].max(upper);
        x = chebyshev_filter(h, ritz.as_ref(), deg, cut, hmax);
    }
    Err(Error::Numerical(format!(
        "subspace iteration did not converge below {upper}"
    )))
}
