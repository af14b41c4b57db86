//! Parseval frame of an isolated Bloch family: tight fiber sections,
//! their Wannier-type synthesis, analysis/synthesis maps and the
//! unperturbed hopping sequence.

use crate::bloch::{band_basis, cell_of, BandStructure, IsolatedFamily};
use crate::error::{invalid, Error, Result};
use crate::lattice::{character, torus_fourier, BrillouinGrid, LatticeVector, LatticeWindow};
use crate::linalg::{self, ZERO};
use faer::{c64, Mat, MatRef};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;

/// Smallest eigenvalue of S(θ) on range P̂_B(θ) tolerated by the construction.
pub const CONDITIONING_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct FiberFrame {
    pub n_b: usize,
    /// per node, fiber-dim × n_b
    pub sections: Vec<Mat<c64>>,
    pub conditioning: f64,
    pub trials: Mat<c64>,
    /// seed of the extra pseudorandom trial, when one was needed
    pub seed: Option<u64>,
}

pub fn build_fiber_frame(bands: &BandStructure, family: &IsolatedFamily, trials: MatRef<'_, c64>) -> Result<FiberFrame> {
    let n_b = trials.ncols();
    let r = family.size();
    if n_b < r {
        return invalid(format!("n_B = {n_b} is below the family rank {r}"));
    }
    if trials.nrows() != bands.fiber_dim() {
        return invalid("trial vectors do not match the fiber dimension");
    }
    let (lo, hi) = family.k_range();
    let per_node: Vec<Result<(Mat<c64>, f64)>> = (0..bands.grid.len())
        .into_par_iter()
        .map(|t| {
            let u = band_basis(bands, t, lo, hi)?;
            let a = u.adjoint() * trials;
            let s = linalg::hermitian_part((&a * a.adjoint()).as_ref());
            let (vals, vecs) = linalg::eigh(s.as_ref())?;
            let cond = vals[0];
            if cond < CONDITIONING_FLOOR {
                return Err(Error::Degenerate(format!(
                    "trial set degenerate at node {t} (conditioning {cond:.3e}); increase n_B or change trials"
                )));
            }
            let inv_sqrt = linalg::spectral_apply(&vals, vecs.as_ref(), |z| c64::new(z.powf(-0.5), 0.0));
            Ok((&u * (&inv_sqrt * &a), cond))
        })
        .collect();
    let mut sections = Vec::with_capacity(per_node.len());
    let mut conditioning = f64::INFINITY;
    for r in per_node {
        let (s, c) = r?;
        sections.push(s);
        conditioning = conditioning.min(c);
    }
    Ok(FiberFrame {
        n_b,
        sections,
        conditioning,
        trials: trials.to_owned(),
        seed: None,
    })
}

/// Eigenvectors of Ĥ(0) for the family's bands, phase-fixed.
pub fn default_trials(bands: &BandStructure, family: &IsolatedFamily) -> Mat<c64> {
    let v = &bands.eigenvectors[bands.grid.origin_index()];
    let (lo, hi) = family.k_range();
    let mut t = Mat::from_fn(v.nrows(), hi - lo + 1, |r, c| v[(r, lo - 1 + c)]);
    for c in 0..t.ncols() {
        let mut col = linalg::col(t.as_ref(), c);
        crate::bloch::fix_phase(&mut col);
        for (r, x) in col.into_iter().enumerate() {
            t[(r, c)] = x;
        }
    }
    t
}

/// Default trials, escalated by one pseudorandom vector if conditioning fails.
pub fn build_fiber_frame_auto(bands: &BandStructure, family: &IsolatedFamily, seed: u64) -> Result<FiberFrame> {
    let t = default_trials(bands, family);
    match build_fiber_frame(bands, family, t.as_ref()) {
        Err(Error::Degenerate(msg)) => {
            log::warn!("{msg}; adding one pseudorandom trial (seed {seed})");
            let extra = linalg::random_unit_vector(t.nrows(), seed);
            let t2 = Mat::from_fn(t.nrows(), t.ncols() + 1, |r, c| if c < t.ncols() { t[(r, c)] } else { extra[r] });
            let mut f = build_fiber_frame(bands, family, t2.as_ref())?;
            f.seed = Some(seed);
            Ok(f)
        }
        other => other,
    }
}

/// max_θ ‖Σ_p |ψ̂_p⟩⟨ψ̂_p| - P̂_B(θ)‖.
pub fn fiber_parseval_defect(bands: &BandStructure, family: &IsolatedFamily, frame: &FiberFrame) -> Result<f64> {
    let (lo, hi) = family.k_range();
    let mut d = 0.0f64;
    for (t, s) in frame.sections.iter().enumerate() {
        let p = crate::bloch::eigenprojection(bands, t, lo, hi)?;
        d = d.max(linalg::op_norm((s * s.adjoint() - p).as_ref()));
    }
    Ok(d)
}

/// Wannier-type functions ψ_p sampled on a window of cells.
#[derive(Clone, Debug)]
pub struct WannierFrame {
    pub n_b: usize,
    pub ns: usize,
    pub window: LatticeWindow,
    /// [p][cell·ns² + s] over `window` cells
    pub samples: Vec<Vec<c64>>,
    /// max |ψ| per sup-norm shell of the full periodic synthesis
    pub decay_profile: Vec<f64>,
    /// largest amplitude discarded by truncating to the window
    pub tail: f64,
}

impl WannierFrame {
    pub fn sites_per_cell(&self) -> usize {
        self.ns * self.ns
    }

    /// ψ_p at cell c (relative to the centre), sub-site s; zero off the window.
    pub fn value(&self, p: usize, c: LatticeVector, s: usize) -> c64 {
        match self.window.index(c) {
            Some(ci) => self.samples[p][ci * self.sites_per_cell() + s],
            None => ZERO,
        }
    }

    pub fn norm_sqr(&self, p: usize) -> f64 {
        self.samples[p].iter().map(|x| x.norm_sqr()).sum()
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "p,gamma1,gamma2,cell_index,re,im")?;
        let per = self.sites_per_cell();
        for p in 0..self.n_b {
            for ci in 0..self.window.n_cells() {
                let c = self.window.cell(ci);
                for s in 0..per {
                    let v = self.samples[p][ci * per + s];
                    writeln!(w, "{p},{},{},{s},{:.17e},{:.17e}", c.0[0], c.0[1], v.re, v.im)?;
                }
            }
        }
        Ok(())
    }
}

/// ψ_p(x̂+γ) = (1/M²) Σ_θ e^{i<θ,γ>} ψ̂_p(θ, x̂), kept on [-L, L]² cells
/// (or on the whole period cell when `l` is None).
pub fn synthesize_wannier(frame: &FiberFrame, bands: &BandStructure, l: Option<usize>) -> Result<WannierFrame> {
    let grid = &bands.grid;
    let m = grid.size();
    let ns = match bands.model.backend {
        crate::bloch::Backend::Grid { ns } => ns,
        _ => return invalid("Wannier synthesis needs the grid backend"),
    };
    let window = match l {
        Some(l) => {
            if m < 2 * l + 1 {
                return invalid(format!("window radius {l} does not fit a period of {m} cells"));
            }
            LatticeWindow::Open { l }
        }
        None => LatticeWindow::Torus { m },
    };
    let per = ns * ns;
    let full: Vec<Vec<c64>> = (0..frame.n_b)
        .map(|p| {
            let mut f = vec![ZERO; m * m * per];
            for t in 0..grid.len() {
                let theta = grid.node(t);
                let sec = &frame.sections[t];
                for c in 0..m * m {
                    let ch = character(theta, cell_of(m, c)).conj() * grid.weight();
                    for s in 0..per {
                        f[c * per + s] += ch * sec[(s, p)];
                    }
                }
            }
            f
        })
        .collect();
    let half = (m / 2) as i64;
    let mut decay_profile = vec![0.0f64; half as usize + 1];
    let mut tail = 0.0f64;
    let mut samples = vec![vec![ZERO; window.n_cells() * per]; frame.n_b];
    for (p, f) in full.iter().enumerate() {
        for c in 0..m * m {
            let cell = cell_of(m, c);
            let amp = f[c * per..(c + 1) * per].iter().map(|x| x.norm()).fold(0.0, f64::max);
            let shell = cell.sup_norm() as usize;
            decay_profile[shell] = decay_profile[shell].max(amp);
            match window.index(cell) {
                Some(ci) => samples[p][ci * per..(ci + 1) * per].copy_from_slice(&f[c * per..(c + 1) * per]),
                None => tail = tail.max(amp),
            }
        }
    }
    if tail > 1e-6 * decay_profile[0] {
        return Err(Error::Numerical(format!(
            "Wannier tail {tail:.2e} beyond the window is not negligible; enlarge L or M"
        )));
    }
    Ok(WannierFrame {
        n_b: frame.n_b,
        ns,
        window,
        samples,
        decay_profile,
        tail,
    })
}

/// Frame coordinates ⟨τ_{-γ}ψ_p, f⟩ indexed by (γ, p).
#[derive(Clone, Debug)]
pub struct FrameCoordinates {
    pub cells: LatticeWindow,
    pub n_b: usize,
    pub coeffs: Vec<c64>,
}

impl FrameCoordinates {
    pub fn get(&self, gamma: usize, p: usize) -> c64 {
        self.coeffs[gamma * self.n_b + p]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coeffs.iter().map(|x| x.norm_sqr()).sum()
    }
}

/// Site index of ψ_p's sample (window cell wi, sub-site s) translated by γ
/// on the period-M cell torus (layout of `bloch::cell_of`).
fn translated_site(m: usize, per: usize, gamma: LatticeVector, c: LatticeVector, s: usize) -> usize {
    let half = (m / 2) as i64;
    let a = (gamma.0[0] + c.0[0] + half).rem_euclid(m as i64) as usize;
    let b = (gamma.0[1] + c.0[1] + half).rem_euclid(m as i64) as usize;
    (a * m + b) * per + s
}

/// Analysis on period-M samples (`f` in the layout of the Bloch transform).
pub fn frame_analysis(f: &[c64], wannier: &WannierFrame, m: usize) -> Result<FrameCoordinates> {
    let per = wannier.sites_per_cell();
    if f.len() != m * m * per {
        return invalid("sample count does not match the supercell");
    }
    if wannier.window.side() > m {
        return invalid("Wannier window exceeds the supercell period");
    }
    let cells = LatticeWindow::Torus { m };
    let wcells = wannier.window.cells();
    let mut coeffs = vec![ZERO; m * m * wannier.n_b];
    for g in 0..m * m {
        let gamma = cells.cell(g);
        for p in 0..wannier.n_b {
            let mut acc = ZERO;
            for (wi, c) in wcells.iter().enumerate() {
                let base = translated_site(m, per, gamma, *c, 0);
                let src = &wannier.samples[p][wi * per..(wi + 1) * per];
                for s in 0..per {
                    acc += src[s].conj() * f[base + s];
                }
            }
            coeffs[g * wannier.n_b + p] = acc;
        }
    }
    Ok(FrameCoordinates {
        cells,
        n_b: wannier.n_b,
        coeffs,
    })
}

pub fn frame_synthesis(coords: &FrameCoordinates, wannier: &WannierFrame) -> Result<Vec<c64>> {
    let m = coords.cells.side();
    let per = wannier.sites_per_cell();
    let wcells = wannier.window.cells();
    let mut f = vec![ZERO; m * m * per];
    for g in 0..m * m {
        let gamma = coords.cells.cell(g);
        for p in 0..wannier.n_b {
            let a = coords.get(g, p);
            if a == ZERO {
                continue;
            }
            for (wi, c) in wcells.iter().enumerate() {
                let base = translated_site(m, per, gamma, *c, 0);
                let src = &wannier.samples[p][wi * per..(wi + 1) * per];
                for s in 0..per {
                    f[base + s] += a * src[s];
                }
            }
        }
    }
    Ok(f)
}

/// Canonical tight frame of a finite family of vectors (columns).
#[derive(Clone, Debug)]
pub struct TightFrame {
    pub vectors: Mat<c64>,
    pub coefficients: Mat<c64>,
    pub rank: usize,
}

/// ψ_j = Σ_i f(G)_{ij} v_i with f(z) = z^{-1/2} on the Gram spectrum above
/// `tol`·max, and 0 on the (dropped) null space.
pub fn tighten_frame(vectors: MatRef<'_, c64>, tol: f64) -> Result<TightFrame> {
    if vectors.ncols() == 0 {
        return invalid("empty frame");
    }
    let g = linalg::hermitian_part((vectors.adjoint() * vectors).as_ref());
    let (vals, vecs) = linalg::eigh(g.as_ref())?;
    let top = vals.last().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return invalid("all frame vectors vanish");
    }
    let cut = tol * top;
    let rank = vals.iter().filter(|&&z| z > cut).count();
    let coefficients = linalg::spectral_apply(&vals, vecs.as_ref(), |z| {
        c64::new(if z > cut { z.powf(-0.5) } else { 0.0 }, 0.0)
    });
    Ok(TightFrame {
        vectors: vectors * &coefficients,
        coefficients,
        rank,
    })
}

/// (A, B): extreme nonzero Gram eigenvalues.
pub fn frame_bounds(vectors: MatRef<'_, c64>, tol: f64) -> Result<(f64, f64)> {
    let g = linalg::hermitian_part((vectors.adjoint() * vectors).as_ref());
    let vals = linalg::eigvalsh(g.as_ref())?;
    let top = vals.last().copied().unwrap_or(0.0);
    let nz: Vec<f64> = vals.into_iter().filter(|&z| z > tol * top).collect();
    match (nz.first(), nz.last()) {
        (Some(&a), Some(&b)) => Ok((a, b)),
        _ => invalid("frame has no nonzero vectors"),
    }
}

#[derive(Clone, Debug)]
pub struct HoppingSequence {
    pub n: usize,
    pub radius: usize,
    pub entries: BTreeMap<LatticeVector, Mat<c64>>,
    /// largest ‖m̊_γ‖ discarded beyond the radius
    pub tail: f64,
    /// fitted p in ‖m̊_γ‖ ~ ⟨γ⟩^{-p}
    pub decay_exponent: f64,
}

impl HoppingSequence {
    pub fn get(&self, g: LatticeVector) -> Option<&Mat<c64>> {
        self.entries.get(&g)
    }

    pub fn zero(n: usize) -> Self {
        HoppingSequence {
            n,
            radius: 0,
            entries: BTreeMap::new(),
            tail: 0.0,
            decay_exponent: f64::INFINITY,
        }
    }

    /// max ‖m̊_{-γ} - m̊_γ*‖.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut d = 0.0f64;
        for (g, m) in &self.entries {
            match self.entries.get(&g.neg()) {
                Some(o) => d = d.max(linalg::max_abs((o - m.adjoint()).as_ref())),
                None => d = d.max(linalg::max_abs(m.as_ref())),
            }
        }
        d
    }

    /// max over γ of ‖self_γ - other_γ‖ (operator norm).
    pub fn distance(&self, other: &HoppingSequence) -> f64 {
        let mut d = 0.0f64;
        let keys: std::collections::BTreeSet<_> = self.entries.keys().chain(other.entries.keys()).collect();
        for k in keys {
            let z = Mat::zeros(self.n, self.n);
            let a = self.entries.get(k).unwrap_or(&z);
            let b = other.entries.get(k).unwrap_or(&z);
            d = d.max(linalg::op_norm((a - b).as_ref()));
        }
        d
    }

    pub fn add_scaled(&self, other: &HoppingSequence, s: f64) -> HoppingSequence {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            let e = out.entries.entry(*k).or_insert_with(|| Mat::zeros(self.n, self.n));
            *e += v * faer::Scale(c64::new(s, 0.0));
        }
        out.radius = self.radius.max(other.radius);
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        #[derive(Serialize)]
        struct Entry(Vec<Vec<[f64; 2]>>);
        let mut map = serde_json::Map::new();
        for (g, m) in &self.entries {
            let rows: Vec<Vec<[f64; 2]>> = (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect())
                .collect();
            map.insert(g.to_string(), serde_json::to_value(Entry(rows)).unwrap_or_default());
        }
        serde_json::Value::Object(map)
    }
}

fn fit_decay(norms: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = norms
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &v)| v > 1e-14)
        .map(|(r, &v)| ((1.0 + r as f64).ln(), v.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -sxy / sxx
}

/// m̂(θ)_{qp} = ⟨ψ̂_q, Ĥ_B ψ̂_p⟩ and m̊_γ by the discrete Fourier coefficient.
/// With `radius` None the radius is the smallest one past which all
/// ‖m̊_γ‖ < 1e-10.
pub fn hopping_from_bands(
    bands: &BandStructure,
    family: &IsolatedFamily,
    frame: &FiberFrame,
    radius: Option<usize>,
) -> Result<HoppingSequence> {
    let grid = &bands.grid;
    let m = grid.size();
    let max_r = (m - 1) / 2;
    if let Some(r) = radius {
        if r > max_r {
            return invalid(format!("hopping radius {r} needs a grid of at least {} points", 2 * r + 1));
        }
    }
    let (lo, hi) = family.k_range();
    let n = frame.n_b;
    let symbols: Vec<Mat<c64>> = (0..grid.len())
        .map(|t| {
            let u = band_basis(bands, t, lo, hi)?;
            let a = u.adjoint() * &frame.sections[t];
            let vals = &bands.eigenvalues[t];
            let la = Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * vals[lo - 1 + i]);
            Ok(a.adjoint() * la)
        })
        .collect::<Result<_>>()?;
    let all = symbol_fourier(grid, &symbols, n, max_r as i64)?;
    let mut shell = vec![0.0f64; max_r + 1];
    for (g, v) in &all {
        let s = g.sup_norm() as usize;
        shell[s] = shell[s].max(linalg::op_norm(v.as_ref()));
    }
    let r = radius.unwrap_or_else(|| {
        (0..=max_r)
            .find(|&r| shell[r + 1..].iter().all(|&v| v < 1e-10))
            .unwrap_or(max_r)
    });
    let tail = shell[r + 1..].iter().copied().fold(0.0, f64::max);
    let entries = all.into_iter().filter(|(g, _)| g.sup_norm() as usize <= r).collect();
    Ok(HoppingSequence {
        n,
        radius: r,
        entries,
        tail,
        decay_exponent: fit_decay(&shell),
    })
}

/// Fourier coefficients of a matrix-valued grid function for |γ|∞ ≤ r.
pub fn symbol_fourier(grid: &BrillouinGrid, symbols: &[Mat<c64>], n: usize, r: i64) -> Result<BTreeMap<LatticeVector, Mat<c64>>> {
    let mut out = BTreeMap::new();
    let mut buf = vec![ZERO; grid.len()];
    for g1 in -r..=r {
        for g2 in -r..=r {
            let g = LatticeVector([g1, g2]);
            let mut mat = Mat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    for (t, s) in symbols.iter().enumerate() {
                        buf[t] = s[(i, j)];
                    }
                    mat[(i, j)] = torus_fourier(grid, &buf, g)?;
                }
            }
            out.insert(g, mat);
        }
    }
    Ok(out)
}

/// Block matrix T_{αβ} = m̊_{α-β} on a window (periodized on a torus).
pub fn flat_quantization(hop: &HoppingSequence, window: LatticeWindow) -> Result<Mat<c64>> {
    if let LatticeWindow::Open { l } = window {
        if l < hop.radius {
            return invalid(format!("window radius {l} is smaller than the hopping radius {}", hop.radius));
        }
    }
    let n = hop.n;
    let mut out = Mat::zeros(window.n_cells() * n, window.n_cells() * n);
    for (i, j, d, _) in window.pairs(hop.radius) {
        if let Some(b) = hop.get(d) {
            for p in 0..n {
                for q in 0..n {
                    out[(i * n + p, j * n + q)] += b[(p, q)];
                }
            }
        }
    }
    Ok(out)
}
