//! The discretized magnetic operator on a supercell, Feshbach-Schur block
//! reduction, window spectra, time evolution and quasi-analytic extensions.

use crate::bloch::PeriodicModel;
use crate::effective::MagneticMatrix;
use crate::error::{invalid, Error, Result};
use crate::geometry::MagneticFieldSpec;
use crate::linalg::{self, CsrMatrix, HermitianOperator, ZERO};
use crate::supercell::Supercell;
use faer::{c64, Mat, MatRef};
use serde::{Deserialize, Serialize};

/// Dimension up to which dense eigendecompositions are used.
pub const DENSE_LIMIT: usize = 4000;

#[derive(Clone, Debug)]
pub struct ReferenceOperator {
    pub h: CsrMatrix,
    pub cell: Supercell,
    pub spec: MagneticFieldSpec,
}

/// Lattice operator of the model in the field ε(b + c·B_per) on `cell`.
pub fn build_reference(model: &PeriodicModel, spec: &MagneticFieldSpec, cell: &Supercell) -> Result<ReferenceOperator> {
    spec.validate()?;
    let h = cell.hamiltonian(model, &spec.gauge()?)?;
    Ok(ReferenceOperator {
        h,
        cell: cell.clone(),
        spec: spec.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverPath {
    Dense,
    ChebyshevFiltered,
}

/// Eigenpairs of a Hermitian operator inside an open interval.
#[derive(Clone, Debug)]
pub struct WindowSpectrum {
    pub interval: (f64, f64),
    pub values: Vec<f64>,
    pub vectors: Mat<c64>,
    pub path: SolverPath,
}

/// Dense eigendecomposition up to `DENSE_LIMIT`, filtered subspace iteration
/// beyond; `expected` sizes the search block.
pub fn window_eigenpairs(h: &CsrMatrix, interval: (f64, f64), expected: usize, seed: u64) -> Result<WindowSpectrum> {
    let (lo, hi) = interval;
    if !(lo < hi) {
        return invalid(format!("empty window ({lo}, {hi})"));
    }
    let (vals, vecs, path) = if h.dim() <= DENSE_LIMIT {
        let (v, u) = linalg::eigh(h.to_dense().as_ref())?;
        (v, u, SolverPath::Dense)
    } else {
        let w = linalg::lowest_eigenpairs_below(h, hi, expected, seed)?;
        (w.values, w.vectors, SolverPath::ChebyshevFiltered)
    };
    let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > lo && vals[k] < hi).collect();
    Ok(WindowSpectrum {
        interval,
        values: keep.iter().map(|&k| vals[k]).collect(),
        vectors: Mat::from_fn(vecs.nrows(), keep.len(), |i, j| vecs[(i, keep[j])]),
        path,
    })
}

/// Orthonormal bases of ran Π and ran(1-Π) for an orthogonal projection Π.
pub fn split_projection(pi: MatRef<'_, c64>) -> Result<(Mat<c64>, Mat<c64>)> {
    let n = pi.nrows();
    if pi.ncols() != n {
        return invalid("projection must be square");
    }
    let herm = linalg::max_abs((pi - pi.adjoint()).as_ref());
    let idem = linalg::max_abs((pi * pi - pi).as_ref());
    if herm > 5e-9 || idem > 5e-9 {
        return invalid(format!("not an orthogonal projection (‖Π-Π*‖={herm:.1e}, ‖Π²-Π‖={idem:.1e})"));
    }
    let (vals, vecs) = linalg::eigh(linalg::hermitian_part(pi).as_ref())?;
    let hi: Vec<usize> = (0..n).filter(|&k| vals[k] > 0.5).collect();
    let lo: Vec<usize> = (0..n).filter(|&k| vals[k] <= 0.5).collect();
    let pick = |idx: &[usize]| Mat::from_fn(n, idx.len(), |i, j| vecs[(i, idx[j])]);
    Ok((pick(&hi), pick(&lo)))
}

/// Blocks of the Feshbach-Schur reduction, embedded in the full space.
#[derive(Clone, Debug)]
pub struct SchurBlocks {
    /// (Π⊥(H-λ)Π⊥)^{-1} on ran Π⊥
    pub r_perp: Mat<c64>,
    /// (ΠHΠ - ΠHR⊥HΠ - λΠ)^{-1} on ran Π
    pub r_tilde: Mat<c64>,
    /// the assembled 2×2 block inverse of H - λ
    pub inverse: Mat<c64>,
}

struct SchurParts {
    u: Mat<c64>,
    v: Mat<c64>,
    huu: Mat<c64>,
    huv: Mat<c64>,
    hvv: Mat<c64>,
    hvv_spectrum: Vec<f64>,
}

fn schur_parts(h: MatRef<'_, c64>, pi: MatRef<'_, c64>) -> Result<SchurParts> {
    if h.nrows() != pi.nrows() || h.ncols() != h.nrows() {
        return invalid("operator and projection sizes differ");
    }
    let (u, v) = split_projection(pi)?;
    let huu = u.adjoint() * h * &u;
    let huv = u.adjoint() * h * &v;
    let hvv = linalg::hermitian_part((v.adjoint() * h * &v).as_ref());
    let hvv_spectrum = linalg::eigvalsh(hvv.as_ref())?;
    Ok(SchurParts {
        u,
        v,
        huu,
        huv,
        hvv,
        hvv_spectrum,
    })
}

fn shifted_inverse(a: &Mat<c64>, lambda: c64, spectrum: &[f64], scale: f64) -> Result<Mat<c64>> {
    let (nearest, dist) = spectrum
        .iter()
        .map(|&mu| (mu, (c64::new(mu, 0.0) - lambda).norm()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((f64::NAN, f64::INFINITY));
    if dist <= 1e-12 * scale {
        return Err(Error::Numerical(format!(
            "Π⊥(H-λ)Π⊥ is not invertible at λ = {lambda}: nearest point of its spectrum is {nearest}"
        )));
    }
    let n = a.nrows();
    let m = Mat::from_fn(n, n, |i, j| a[(i, j)] - if i == j { lambda } else { ZERO });
    Ok(linalg::inverse(m.as_ref()))
}

pub fn schur_resolvent(h: MatRef<'_, c64>, pi: MatRef<'_, c64>, lambda: c64) -> Result<SchurBlocks> {
    let p = schur_parts(h, pi)?;
    let scale = linalg::max_abs(h).max(1.0);
    let rp = shifted_inverse(&p.hvv, lambda, &p.hvv_spectrum, scale)?;
    let hvu = p.huv.adjoint();
    let k = p.huu.nrows();
    let s = &p.huu - &p.huv * &rp * hvu - Mat::from_fn(k, k, |i, j| if i == j { lambda } else { ZERO });
    let rt = linalg::inverse(s.as_ref());
    let off_uv = -(&rt * &p.huv * &rp);
    let off_vu = -(&rp * hvu * &rt);
    let vv = &rp + &rp * hvu * &rt * &p.huv * &rp;
    let (u, v) = (&p.u, &p.v);
    let inverse = u * &rt * u.adjoint() + u * off_uv * v.adjoint() + v * off_vu * u.adjoint() + v * vv * v.adjoint();
    Ok(SchurBlocks {
        r_perp: v * &rp * v.adjoint(),
        r_tilde: u * &rt * u.adjoint(),
        inverse,
    })
}

/// Real points in (lo, hi) where the Schur complement S(t) is singular.
/// S(t) is strictly decreasing between poles (the spectrum of Π⊥HΠ⊥), so
/// its zeros are counted by inertia and isolated by bisection.
pub fn schur_singularities(h: MatRef<'_, c64>, pi: MatRef<'_, c64>, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let p = schur_parts(h, pi)?;
    let hvu = p.huv.adjoint();
    let k = p.huu.nrows();
    let scale = linalg::max_abs(h).max(1.0);
    let negatives = |t: f64| -> Result<usize> {
        let rp = shifted_inverse(&p.hvv, c64::new(t, 0.0), &p.hvv_spectrum, scale)?;
        let s = &p.huu - &p.huv * &rp * hvu - Mat::from_fn(k, k, |i, j| if i == j { c64::new(t, 0.0) } else { ZERO });
        let ev = linalg::eigvalsh(linalg::hermitian_part(s.as_ref()).as_ref())?;
        Ok(ev.iter().filter(|&&x| x < 0.0).count())
    };
    let gap = 1e-9 * scale;
    let mut cuts = vec![lo];
    cuts.extend(p.hvv_spectrum.iter().copied().filter(|&mu| mu > lo && mu < hi));
    cuts.push(hi);
    let mut out = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0] + gap, w[1] - gap);
        if a >= b {
            continue;
        }
        let na = negatives(a)?;
        let nb = negatives(b)?;
        for target in na + 1..=nb {
            let (mut x, mut y) = (a, b);
            for _ in 0..200 {
                let mid = 0.5 * (x + y);
                if negatives(mid)? >= target {
                    y = mid;
                } else {
                    x = mid;
                }
                if y - x < 1e-14 * scale {
                    break;
                }
            }
            out.push(0.5 * (x + y));
        }
    }
    Ok(out)
}

/// Π⊥HΠ⊥ + σΠ for Π = ΨΨ*: the range of Π is pushed above the spectrum of H.
struct Compressed<'a> {
    h: &'a CsrMatrix,
    psi: MatRef<'a, c64>,
    shift: f64,
    bounds: (f64, f64),
}

impl Compressed<'_> {
    fn project_out(&self, x: MatRef<'_, c64>) -> (Mat<c64>, Mat<c64>) {
        let c = self.psi.adjoint() * x;
        (x - self.psi * &c, c)
    }
}

impl HermitianOperator for Compressed<'_> {
    fn dim(&self) -> usize {
        self.h.dim()
    }

    fn apply_block(&self, x: MatRef<'_, c64>) -> Mat<c64> {
        let (xp, c) = self.project_out(x);
        let hx = self.h.matmat(xp.as_ref());
        let (out, _) = self.project_out(hx.as_ref());
        out + self.psi * c * faer::Scale(c64::new(self.shift, 0.0))
    }

    fn spectral_bounds(&self) -> (f64, f64) {
        self.bounds
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InvertibilityReport {
    /// max over the grid of ‖(Π⊥(H-t)Π⊥)^{-1}‖ on ran Π⊥
    pub sup_norm: f64,
    pub grid: Vec<(f64, f64)>,
    /// grid points where the compressed operator is numerically singular
    pub failures: Vec<f64>,
    /// spectrum of Π⊥HΠ⊥ on ran Π⊥ found near the window
    pub nearby_spectrum: Vec<f64>,
}

/// ‖R⊥(t)‖ over a grid of the window, from the spectrum of Π⊥HΠ⊥ near it.
/// `psi` holds an orthonormal basis of ran Π.
pub fn window_invertibility(h: &CsrMatrix, psi: MatRef<'_, c64>, window: (f64, f64), n_grid: usize, seed: u64) -> Result<InvertibilityReport> {
    let (lo, hi) = window;
    if !(lo < hi) || n_grid < 2 {
        return invalid("window invertibility needs a nonempty window and at least two grid points");
    }
    if psi.nrows() != h.dim() {
        return invalid("frame and operator live on different supercells");
    }
    let (hmin, hmax) = h.spectral_bounds();
    let shift = hmax + 1.0;
    let op = Compressed {
        h,
        psi,
        shift,
        bounds: (hmin, shift),
    };
    let upper = hi + (hi - lo);
    // eigenvalues of the compressed operator below `upper`, and a bound for the rest
    let (near, rest) = if h.dim() <= DENSE_LIMIT {
        let dense = op.apply_block(linalg::identity(h.dim()).as_ref());
        let vals = linalg::eigvalsh(linalg::hermitian_part(dense.as_ref()).as_ref())?;
        let near: Vec<f64> = vals.iter().copied().filter(|&v| v < upper).collect();
        let rest = vals.iter().copied().find(|&v| v >= upper).unwrap_or(f64::INFINITY);
        (near, rest)
    } else {
        let w = linalg::lowest_eigenpairs_below(&op, upper, 16, seed)?;
        (w.values, w.next_value)
    };
    let mut grid = Vec::with_capacity(n_grid);
    let mut failures = Vec::new();
    let mut sup_norm = 0.0f64;
    for k in 0..n_grid {
        let t = lo + (hi - lo) * k as f64 / (n_grid - 1) as f64;
        let d = near.iter().map(|&mu| (mu - t).abs()).fold((rest - t).abs(), f64::min);
        let norm = if d > 0.0 { 1.0 / d } else { f64::INFINITY };
        if d <= 1e-8 * hmax.abs().max(1.0) {
            failures.push(t);
        }
        sup_norm = sup_norm.max(norm);
        grid.push((t, norm));
    }
    Ok(InvertibilityReport {
        sup_norm,
        grid,
        failures,
        nearby_spectrum: near,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpectralDistance {
    pub value: f64,
    /// neither spectrum meets the interval
    pub empty: bool,
}

/// Hausdorff-type distance of two spectra seen through J: the larger of
/// sup_{λ∈σ₁∩J} dist(λ,σ₂) and sup_{μ∈σ₂∩J} dist(μ,σ₁).
pub fn spectral_distance(s1: &[f64], s2: &[f64], j: (f64, f64)) -> SpectralDistance {
    let inside = |x: f64| x >= j.0 && x <= j.1;
    let one_sided = |a: &[f64], b: &[f64]| {
        a.iter()
            .copied()
            .filter(|&x| inside(x))
            .map(|x| b.iter().map(|&y| (x - y).abs()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    let empty = !s1.iter().chain(s2).any(|&x| inside(x));
    if empty {
        log::warn!("spectral distance on ({}, {}): both spectra miss the interval", j.0, j.1);
        return SpectralDistance { value: 0.0, empty };
    }
    SpectralDistance {
        value: one_sided(s1, s2).max(one_sided(s2, s1)),
        empty,
    }
}

/// e^{-itH} by dense spectral calculus or by Chebyshev expansion.
pub enum Propagator<'a> {
    Dense { values: Vec<f64>, vectors: Mat<c64> },
    Sparse { h: &'a CsrMatrix, tol: f64 },
}

impl<'a> Propagator<'a> {
    pub fn new(h: &'a CsrMatrix) -> Result<Self> {
        if h.dim() <= DENSE_LIMIT {
            let (values, vectors) = linalg::eigh(h.to_dense().as_ref())?;
            Ok(Propagator::Dense { values, vectors })
        } else {
            Ok(Propagator::Sparse { h, tol: 1e-12 })
        }
    }

    pub fn path(&self) -> SolverPath {
        match self {
            Propagator::Dense { .. } => SolverPath::Dense,
            Propagator::Sparse { .. } => SolverPath::ChebyshevFiltered,
        }
    }

    pub fn apply(&self, v: &[c64], t: f64) -> Result<Vec<c64>> {
        let nv = linalg::norm(v);
        if nv == 0.0 {
            return invalid("cannot propagate the zero vector");
        }
        let out = match self {
            Propagator::Dense { values, vectors } => spectral_propagate(values, vectors.as_ref(), v, t),
            Propagator::Sparse { h, tol } => linalg::chebyshev_propagate(h, v, t, *tol),
        };
        let defect = (linalg::norm(&out) - nv).abs() / nv;
        if defect > 1e-10 {
            return Err(Error::Numerical(format!("propagation lost unitarity ({defect:.1e})")));
        }
        Ok(out)
    }
}

fn spectral_propagate(values: &[f64], vectors: MatRef<'_, c64>, v: &[c64], t: f64) -> Vec<c64> {
    let c: Vec<c64> = (0..vectors.ncols())
        .map(|k| (0..vectors.nrows()).map(|i| vectors[(i, k)].conj() * v[i]).sum::<c64>() * linalg::cis(-t * values[k]))
        .collect();
    (0..vectors.nrows())
        .map(|i| (0..vectors.ncols()).map(|k| vectors[(i, k)] * c[k]).sum())
        .collect()
}

pub fn propagate(h: &CsrMatrix, v: &[c64], t: f64) -> Result<Vec<c64>> {
    Propagator::new(h)?.apply(v, t)
}

/// e^{-itH} v for a dense Hermitian H.
pub fn propagate_dense(h: MatRef<'_, c64>, v: &[c64], t: f64) -> Result<Vec<c64>> {
    if h.nrows() != v.len() {
        return invalid("vector length does not match the operator");
    }
    let (values, vectors) = linalg::eigh(linalg::hermitian_part(h).as_ref())?;
    Ok(spectral_propagate(&values, vectors.as_ref(), v, t))
}

/// Effective evolution: the frame coordinates Ψ*v evolve under M and are
/// synthesized back; the part of v outside ran Ψ is carried along unchanged.
pub struct EffectivePropagator<'a> {
    psi: MatRef<'a, c64>,
    values: Vec<f64>,
    vectors: Mat<c64>,
}

impl<'a> EffectivePropagator<'a> {
    pub fn new(psi: MatRef<'a, c64>, m: &MagneticMatrix) -> Result<Self> {
        if psi.ncols() != m.matrix.nrows() {
            return invalid("effective matrix does not match the frame");
        }
        let (values, vectors) = linalg::eigh(m.matrix.as_ref())?;
        Ok(EffectivePropagator { psi, values, vectors })
    }

    pub fn apply(&self, v: &[c64], t: f64) -> Vec<c64> {
        let psi = self.psi;
        let coords: Vec<c64> = (0..psi.ncols())
            .map(|j| (0..psi.nrows()).map(|i| psi[(i, j)].conj() * v[i]).sum())
            .collect();
        let evolved = spectral_propagate(&self.values, self.vectors.as_ref(), &coords, t);
        let mut out = v.to_vec();
        for j in 0..psi.ncols() {
            let d = evolved[j] - coords[j];
            for (i, o) in out.iter_mut().enumerate() {
                *o += psi[(i, j)] * d;
            }
        }
        out
    }
}

/// A seeded unit vector in the span of the window eigenvectors.
pub fn window_state(window: &WindowSpectrum, seed: u64) -> Result<Vec<c64>> {
    if window.values.is_empty() {
        return Err(Error::Numerical("spectral window is empty".into()));
    }
    let c = linalg::random_unit_vector(window.values.len(), seed);
    let v = &window.vectors * linalg::column_matrix(&c);
    Ok(linalg::col(v.as_ref(), 0))
}

/// ‖e^{-itH}v - (effective evolution of v)‖ for each t.
pub fn evolution_errors(full: &Propagator<'_>, eff: &EffectivePropagator<'_>, v: &[c64], times: &[f64]) -> Result<Vec<f64>> {
    times
        .iter()
        .map(|&t| {
            let a = full.apply(v, t)?;
            let b = eff.apply(v, t);
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt())
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EvolutionRecord {
    pub times: Vec<f64>,
    pub epsilons: Vec<f64>,
    /// errors[e][k] at epsilons[e], times[k]
    pub errors: Vec<Vec<f64>>,
    /// log-log slope in ε at each time (over ε > 0)
    pub slopes: Vec<f64>,
}

impl EvolutionRecord {
    pub fn new(times: Vec<f64>, epsilons: Vec<f64>, errors: Vec<Vec<f64>>) -> Result<Self> {
        if errors.len() != epsilons.len() || errors.iter().any(|r| r.len() != times.len()) {
            return invalid("evolution error table does not match its axes");
        }
        let slopes = (0..times.len())
            .map(|k| {
                let pts: Vec<(f64, f64)> = epsilons
                    .iter()
                    .zip(&errors)
                    .filter(|(e, _)| **e > 0.0)
                    .map(|(e, r)| (*e, r[k]))
                    .collect();
                let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
                loglog_slope(&x, &y)
            })
            .collect();
        Ok(EvolutionRecord {
            times,
            epsilons,
            errors,
            slopes,
        })
    }

    pub fn slope_at(&self, t: f64) -> Option<f64> {
        self.times.iter().position(|&s| (s - t).abs() < 1e-12).map(|k| self.slopes[k])
    }
}

/// Least-squares slope of log y against log x; NaN with fewer than two
/// positive points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Smooth cutoff χ(y): 1 on |y| ≤ 1, 0 on |y| ≥ 2, with its derivative.
pub fn cutoff(y: f64) -> (f64, f64) {
    let a = y.abs();
    if a <= 1.0 {
        return (1.0, 0.0);
    }
    if a >= 2.0 {
        return (0.0, 0.0);
    }
    let g = |s: f64| (-1.0 / s).exp();
    let dg = |s: f64| g(s) / (s * s);
    let (u, w) = (2.0 - a, a - 1.0);
    let den = g(u) + g(w);
    let chi = g(u) / den;
    // d/da of g(u)/(g(u)+g(w)) with du/da = -1, dw/da = 1
    let d = -(dg(u) * g(w) + g(u) * dg(w)) / (den * den);
    (chi, d * y.signum())
}

/// k-th derivative by central 5-point stencils (nested for k > 4).
pub fn finite_difference(f: &dyn Fn(f64) -> f64, x: f64, k: usize) -> f64 {
    let h = f64::EPSILON.powf(1.0 / (k.min(4) as f64 + 4.0)) * x.abs().max(1.0);
    let s = |j: f64| f(x + j * h);
    match k {
        0 => f(x),
        1 => (-s(2.0) + 8.0 * s(1.0) - 8.0 * s(-1.0) + s(-2.0)) / (12.0 * h),
        2 => (-s(2.0) + 16.0 * s(1.0) - 30.0 * s(0.0) + 16.0 * s(-1.0) - s(-2.0)) / (12.0 * h * h),
        3 => (s(2.0) - 2.0 * s(1.0) + 2.0 * s(-1.0) - s(-2.0)) / (2.0 * h * h * h),
        4 => (s(2.0) - 4.0 * s(1.0) + 6.0 * s(0.0) - 4.0 * s(-1.0) + s(-2.0)) / (h * h * h * h),
        _ => {
            let inner = |y: f64| finite_difference(f, y, 4);
            finite_difference(&inner, x, k - 4)
        }
    }
}

/// ∂^k φ_t(x) for φ_t(s) = e^{-its} φ(s), k = 0..=kmax, by the product rule.
pub fn evolved_derivatives(phi: &dyn Fn(f64) -> f64, t: f64, x: f64, kmax: usize) -> Vec<c64> {
    let d: Vec<f64> = (0..=kmax).map(|j| finite_difference(phi, x, j)).collect();
    let e = linalg::cis(-t * x);
    (0..=kmax)
        .map(|k| {
            let mut acc = ZERO;
            let mut binom = 1.0;
            for j in 0..=k {
                // C(k, j) (-it)^{k-j} ∂^j φ
                acc += c64::new(0.0, -t).powi((k - j) as i32) * (binom * d[j]);
                binom = binom * (k - j) as f64 / (j + 1) as f64;
            }
            acc * e
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuasiAnalytic {
    pub value: c64,
    pub dbar: c64,
}

/// φ̂_{t,N}(x+iy) = Σ_{k≤N} ∂^kφ_t(x)(iy)^k/k! χ(y) and its ∂/∂z̄.
pub fn quasi_analytic_extension(phi: &dyn Fn(f64) -> f64, t: f64, n: usize, z: c64) -> Result<QuasiAnalytic> {
    if n > 6 {
        return invalid(format!("extension order {n} exceeds 6"));
    }
    let (x, y) = (z.re, z.im);
    let d = evolved_derivatives(phi, t, x, n + 1);
    let (chi, dchi) = cutoff(y);
    let iy = c64::new(0.0, y);
    let mut series = ZERO;
    let mut pow = c64::new(1.0, 0.0);
    let mut fact = 1.0;
    for (k, dk) in d.iter().enumerate().take(n + 1) {
        if k > 0 {
            pow *= iy;
            fact *= k as f64;
        }
        series += dk * pow / fact;
    }
    // (iy)^N / N! from the last step of the loop
    let top = d[n + 1] * pow / fact;
    let dbar = (c64::new(0.0, 1.0) * series * dchi + top * chi) * 0.5;
    Ok(QuasiAnalytic {
        value: series * chi,
        dbar,
    })
}
