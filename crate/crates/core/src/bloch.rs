//! Fiber operators Ĥ(θ) of the periodic model, Bloch bands, spectral
//! projections, the isolated-family check and the Bloch-Floquet transform.

use crate::error::{invalid, Error, Result};
use crate::geometry::{periodic_potential_from_field, FourierSeries, PeriodicPotential};
use crate::lattice::{character, BrillouinGrid, LatticeVector, TorusPoint};
use crate::linalg::{self, cis, ZERO};
use base64::Engine;
use faer::{c64, Mat};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;

/// Relative spacing below which two eigenvalues count as one cluster.
pub const CLUSTER_GAP: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub k: [i64; 2],
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    PlaneWave { cutoff: usize },
    Grid { ns: usize },
}

/// -Δ_A° + W + shift with Γ-periodic W and zero-flux background field B°.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicModel {
    #[serde(default)]
    pub potential: Vec<Mode>,
    #[serde(default)]
    pub background_field: Vec<Mode>,
    pub backend: Backend,
    #[serde(default)]
    pub energy_shift: f64,
}

fn series(modes: &[Mode]) -> FourierSeries {
    FourierSeries {
        modes: modes
            .iter()
            .map(|m| ([m.k[0] as f64, m.k[1] as f64], c64::new(m.re, m.im)))
            .collect(),
    }
}

impl PeriodicModel {
    pub fn potential_series(&self) -> FourierSeries {
        series(&self.potential)
    }

    pub fn background_series(&self) -> FourierSeries {
        series(&self.background_field)
    }

    pub fn background_potential(&self) -> Result<PeriodicPotential> {
        periodic_potential_from_field(&self.background_series())
    }

    pub fn potential_value(&self, x: [f64; 2]) -> f64 {
        self.potential_series().value(x)
    }

    pub fn validate(&self) -> Result<()> {
        self.potential_series().check_real()?;
        self.background_potential()?;
        match self.backend {
            Backend::Grid { ns } if ns < 3 => invalid(format!("grid backend needs ns ≥ 3, got {ns}")),
            Backend::PlaneWave { cutoff } if cutoff == 0 => invalid("plane-wave cutoff must be ≥ 1"),
            _ => Ok(()),
        }
    }

    pub fn fiber_dim(&self) -> usize {
        match self.backend {
            Backend::PlaneWave { cutoff } => (2 * cutoff + 1).pow(2),
            Backend::Grid { ns } => ns * ns,
        }
    }

    /// Largest kinetic energy the discretization can represent.
    pub fn highest_free_energy(&self) -> f64 {
        match self.backend {
            Backend::PlaneWave { cutoff } => 2.0 * (2.0 * PI * cutoff as f64).powi(2),
            Backend::Grid { ns } => 8.0 * (ns * ns) as f64,
        }
    }

    pub fn hash(&self) -> String {
        crate::config::canonical_hash(self)
    }
}

/// Fails when the discretization cannot resolve energies up to 4·E₊.
pub fn resolution_guard(model: &PeriodicModel, e_plus: f64) -> Result<()> {
    let top = model.highest_free_energy();
    if top < 4.0 * e_plus {
        return Err(Error::Resolution(format!(
            "highest free-mode energy {top:.3} is below 4·E+ = {:.3}; refine the backend",
            4.0 * e_plus
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FiberOperator {
    pub theta: TorusPoint,
    pub matrix: Mat<c64>,
}

/// Sub-site index s1*ns + s2 of the grid backend.
pub fn grid_site(ns: usize, s: [usize; 2]) -> usize {
    s[0] * ns + s[1]
}

pub const STEPS: [[i64; 2]; 4] = [[1, 0], [-1, 0], [0, 1], [0, -1]];

pub fn assemble_fiber(model: &PeriodicModel, theta: TorusPoint) -> Result<FiberOperator> {
    let matrix = match model.backend {
        Backend::Grid { ns } => grid_fiber(model, theta, ns)?,
        Backend::PlaneWave { cutoff } => planewave_fiber(model, theta, cutoff)?,
    };
    Ok(FiberOperator { theta, matrix })
}

fn grid_fiber(model: &PeriodicModel, theta: TorusPoint, ns: usize) -> Result<Mat<c64>> {
    let h = 1.0 / ns as f64;
    let inv_h2 = 1.0 / (h * h);
    let a0 = model.background_potential()?;
    let w = model.potential_series();
    let th = theta.coords();
    let n = ns * ns;
    let mut m = Mat::zeros(n, n);
    for s1 in 0..ns {
        for s2 in 0..ns {
            let i = grid_site(ns, [s1, s2]);
            let x = [s1 as f64 * h, s2 as f64 * h];
            m[(i, i)] += c64::new(4.0 * inv_h2 + w.value(x) + model.energy_shift, 0.0);
            for d in STEPS {
                let g = [s1 as i64 + d[0], s2 as i64 + d[1]];
                let wrap = [g[0].div_euclid(ns as i64), g[1].div_euclid(ns as i64)];
                let t = [g[0].rem_euclid(ns as i64) as usize, g[1].rem_euclid(ns as i64) as usize];
                let y = [g[0] as f64 * h, g[1] as f64 * h];
                let link = cis(-a0.line_integral(x, y, 4));
                let bloch = cis(2.0 * PI * (th[0] * wrap[0] as f64 + th[1] * wrap[1] as f64));
                m[(i, grid_site(ns, t))] += link * bloch * (-inv_h2);
            }
        }
    }
    Ok(m)
}

fn planewave_fiber(model: &PeriodicModel, theta: TorusPoint, cutoff: usize) -> Result<Mat<c64>> {
    let k = cutoff as i64;
    let side = 2 * cutoff + 1;
    let n = side * side;
    let idx = |i: usize| [i as i64 / side as i64 - k, i as i64 % side as i64 - k];
    let a0 = model.background_potential()?;
    let w = model.potential_series();
    let th = theta.coords();
    let coeff = |s: &FourierSeries, d: [i64; 2]| -> c64 {
        s.modes
            .iter()
            .filter(|(q, _)| q[0] == d[0] as f64 && q[1] == d[1] as f64)
            .map(|(_, c)| *c)
            .sum()
    };
    let mut h = Mat::zeros(n, n);
    for (j, a) in [&a0.a1, &a0.a2].into_iter().enumerate() {
        // D_j = 2π(θ_j + k_j) - Â_j convolution
        let dj = Mat::from_fn(n, n, |r, c| {
            let kr = idx(r);
            let kc = idx(c);
            let mut v = -coeff(a, [kr[0] - kc[0], kr[1] - kc[1]]);
            if r == c {
                v += c64::new(2.0 * PI * (th[j] + kr[j] as f64), 0.0);
            }
            v
        });
        h += &dj * &dj;
    }
    for r in 0..n {
        for c in 0..n {
            let kr = idx(r);
            let kc = idx(c);
            h[(r, c)] += coeff(&w, [kr[0] - kc[0], kr[1] - kc[1]]);
        }
        h[(r, r)] += c64::new(model.energy_shift, 0.0);
    }
    Ok(linalg::hermitian_part(h.as_ref()))
}

#[derive(Clone, Debug)]
pub struct BandStructure {
    pub grid: BrillouinGrid,
    pub model: PeriodicModel,
    /// [node][k], ascending
    pub eigenvalues: Vec<Vec<f64>>,
    /// per node, fiber-dim × n_bands
    pub eigenvectors: Vec<Mat<c64>>,
}

impl BandStructure {
    pub fn n_bands(&self) -> usize {
        self.eigenvalues.first().map_or(0, |v| v.len())
    }

    pub fn fiber_dim(&self) -> usize {
        self.model.fiber_dim()
    }

    /// λ_k over all nodes, k 1-based.
    pub fn band(&self, k: usize) -> Vec<f64> {
        self.eigenvalues.iter().map(|v| v[k - 1]).collect()
    }
}

pub fn compute_bands(model: &PeriodicModel, grid: &BrillouinGrid, n_bands: usize) -> Result<BandStructure> {
    model.validate()?;
    let dim = model.fiber_dim();
    if n_bands == 0 || n_bands > dim {
        return invalid(format!("n_bands {n_bands} must lie in 1..={dim}"));
    }
    let per_node: Vec<Result<(Vec<f64>, Mat<c64>)>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let f = assemble_fiber(model, grid.node(i))?;
            let (vals, vecs) = linalg::eigh(f.matrix.as_ref())
                .map_err(|e| Error::Numerical(format!("node {i}: {e}")))?;
            Ok((
                vals[..n_bands].to_vec(),
                Mat::from_fn(dim, n_bands, |r, c| vecs[(r, c)]),
            ))
        })
        .collect();
    let mut eigenvalues = Vec::with_capacity(grid.len());
    let mut eigenvectors = Vec::with_capacity(grid.len());
    for r in per_node {
        let (v, u) = r?;
        eigenvalues.push(v);
        eigenvectors.push(u);
    }
    Ok(BandStructure {
        grid: grid.clone(),
        model: model.clone(),
        eigenvalues,
        eigenvectors,
    })
}

/// Returns the model shifted so that min_θ λ₁(θ) = e0.
pub fn normalize_energy_shift(model: &PeriodicModel, grid: &BrillouinGrid, e0: f64) -> Result<PeriodicModel> {
    let mut m = model.clone();
    m.energy_shift = 0.0;
    let bands = compute_bands(&m, grid, 1)?;
    let min = bands.band(1).into_iter().fold(f64::INFINITY, f64::min);
    m.energy_shift = e0 - min;
    Ok(m)
}

fn same_cluster(a: f64, b: f64) -> bool {
    (a - b).abs() <= CLUSTER_GAP * a.abs().max(b.abs()).max(1.0)
}

/// Σ_{k in k_lo..=k_hi} π_k at one node (bands 1-based).
pub fn eigenprojection(bands: &BandStructure, node: usize, k_lo: usize, k_hi: usize) -> Result<Mat<c64>> {
    let u = band_basis(bands, node, k_lo, k_hi)?;
    Ok(&u * u.adjoint())
}

/// Orthonormal basis of the range of the cluster projection.
pub fn band_basis(bands: &BandStructure, node: usize, k_lo: usize, k_hi: usize) -> Result<Mat<c64>> {
    let nb = bands.n_bands();
    if k_lo == 0 || k_lo > k_hi || k_hi > nb {
        return invalid(format!("band range {k_lo}..={k_hi} outside 1..={nb}"));
    }
    let vals = &bands.eigenvalues[node];
    if k_lo > 1 && same_cluster(vals[k_lo - 2], vals[k_lo - 1]) {
        return Err(Error::Degenerate(format!(
            "degeneracy straddles band {k_lo} at node {node}"
        )));
    }
    if k_hi < nb && same_cluster(vals[k_hi - 1], vals[k_hi]) {
        return Err(Error::Degenerate(format!(
            "degeneracy straddles band {k_hi} at node {node}"
        )));
    }
    if k_hi == nb && nb < bands.fiber_dim() {
        return invalid(format!(
            "band {} is needed to certify the upper edge of the range at node {node}",
            k_hi + 1
        ));
    }
    let v = &bands.eigenvectors[node];
    Ok(Mat::from_fn(v.nrows(), k_hi - k_lo + 1, |r, c| v[(r, k_lo - 1 + c)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsolatedFamily {
    pub k0: usize,
    pub n: usize,
    /// sup λ_{k0-1}; for k0 = 1 the mirrored value E'₋ - (E₊ - E'₊)
    pub e_minus: f64,
    pub e_minus_mirrored: bool,
    pub e_plus: f64,
    pub d0: f64,
    pub e_prime_minus: f64,
    pub e_prime_plus: f64,
    /// min λ₁, must be positive
    pub e0: f64,
}

impl IsolatedFamily {
    pub fn size(&self) -> usize {
        self.n + 1
    }

    pub fn k_range(&self) -> (usize, usize) {
        (self.k0, self.k0 + self.n)
    }

    pub fn default_delta(&self) -> f64 {
        self.d0 / 8.0
    }

    /// J^δ = (E₋ + 2δ, E₊ - 2δ).
    pub fn window(&self, delta: f64) -> (f64, f64) {
        (self.e_minus + 2.0 * delta, self.e_plus - 2.0 * delta)
    }
}

pub fn detect_isolated_family(bands: &BandStructure, k0: usize, n: usize) -> Result<IsolatedFamily> {
    if k0 == 0 {
        return invalid("k0 is 1-based");
    }
    let top = k0 + n;
    if top + 1 > bands.n_bands() {
        return invalid(format!(
            "band {} is unavailable ({} bands computed, fiber dimension {})",
            top + 1,
            bands.n_bands(),
            bands.fiber_dim()
        ));
    }
    let mut bad = Vec::new();
    for (i, v) in bands.eigenvalues.iter().enumerate() {
        if same_cluster(v[top - 1], v[top]) || (k0 > 1 && same_cluster(v[k0 - 2], v[k0 - 1])) {
            bad.push(i);
        }
    }
    let fam_lo = bands.band(k0).into_iter().fold(f64::INFINITY, f64::min);
    let fam_hi = bands.band(top).into_iter().fold(f64::NEG_INFINITY, f64::max);
    let e_plus = bands.band(top + 1).into_iter().fold(f64::INFINITY, f64::min);
    if !bad.is_empty() {
        return Err(Error::NotIsolated(format!(
            "bands touch the family at nodes {:?}",
            &bad[..bad.len().min(8)]
        )));
    }
    let (e_minus, mirrored) = if k0 == 1 {
        (fam_lo - (e_plus - fam_hi), true)
    } else {
        (bands.band(k0 - 1).into_iter().fold(f64::NEG_INFINITY, f64::max), false)
    };
    if mirrored && e_plus <= fam_hi {
        return Err(Error::NotIsolated(format!(
            "inf λ_(N+2) = {e_plus} does not lie above sup λ_(N+1) = {fam_hi}"
        )));
    }
    if e_minus >= e_plus {
        return Err(Error::NotIsolated(format!(
            "sup λ_(k0-1) = {e_minus} is not below inf λ_(k0+N+1) = {e_plus}"
        )));
    }
    resolution_guard(&bands.model, e_plus)?;
    let e0 = bands.band(1).into_iter().fold(f64::INFINITY, f64::min);
    Ok(IsolatedFamily {
        k0,
        n,
        e_minus,
        e_minus_mirrored: mirrored,
        e_plus,
        d0: e_plus - e_minus,
        e_prime_minus: fam_lo,
        e_prime_plus: fam_hi,
        e0,
    })
}

/// Fiber projectors and blocks of Ĥ(θ) = H₀ ⊕ H_B ⊕ H_∞ at one node.
#[derive(Clone, Debug)]
pub struct ThreeBlock {
    pub p0: Mat<c64>,
    pub pb: Mat<c64>,
    pub pinf: Mat<c64>,
    pub h0: Mat<c64>,
    pub hb: Mat<c64>,
    pub hinf: Mat<c64>,
}

pub fn three_block_decomposition(
    bands: &BandStructure,
    family: &IsolatedFamily,
    node: usize,
) -> Result<ThreeBlock> {
    let (lo, hi) = family.k_range();
    let dim = bands.fiber_dim();
    let vals = &bands.eigenvalues[node];
    let v = &bands.eigenvectors[node];
    let weighted = |a: usize, b: usize| -> Mat<c64> {
        let u = Mat::from_fn(dim, b - a, |r, c| v[(r, a + c)]);
        let uw = Mat::from_fn(dim, b - a, |r, c| v[(r, a + c)] * vals[a + c]);
        &uw * u.adjoint()
    };
    let pb = eigenprojection(bands, node, lo, hi)?;
    let (p0, h0) = if lo > 1 {
        (eigenprojection(bands, node, 1, lo - 1)?, weighted(0, lo - 1))
    } else {
        (Mat::zeros(dim, dim), Mat::zeros(dim, dim))
    };
    let hb = weighted(lo - 1, hi);
    let pinf = linalg::identity(dim) - &p0 - &pb;
    let full = assemble_fiber(&bands.model, bands.grid.node(node))?.matrix;
    let hinf = &pinf * &full * &pinf;
    Ok(ThreeBlock {
        p0,
        pb,
        pinf,
        h0,
        hb,
        hinf,
    })
}

/// Supercell sample layout used by the transforms: site index
/// (cell index)·ns² + s, cells in [-M/2, M/2)² ordered c1-major.
pub fn cell_of(m: usize, idx: usize) -> LatticeVector {
    let half = (m / 2) as i64;
    LatticeVector([(idx / m) as i64 - half, (idx % m) as i64 - half])
}

/// (U f)(θ, x̂) = Σ_γ e^{-i<θ,γ>} f(x̂ + γ); `zak` also applies e^{-i<θ,x̂>}.
pub fn bloch_floquet_transform(f: &[c64], grid: &BrillouinGrid, ns: usize, zak: bool) -> Result<Vec<Vec<c64>>> {
    let m = grid.size();
    let cell = ns * ns;
    if f.len() != m * m * cell {
        return invalid(format!("{} samples, expected {}", f.len(), m * m * cell));
    }
    Ok((0..grid.len())
        .map(|t| {
            let theta = grid.node(t);
            let mut u = vec![ZERO; cell];
            for c in 0..m * m {
                let ch = character(theta, cell_of(m, c));
                for s in 0..cell {
                    u[s] += ch * f[c * cell + s];
                }
            }
            if zak {
                apply_zak_phase(&mut u, theta, ns, false);
            }
            u
        })
        .collect())
}

fn apply_zak_phase(u: &mut [c64], theta: TorusPoint, ns: usize, inverse: bool) {
    let th = theta.coords();
    for (s, v) in u.iter_mut().enumerate() {
        let x = [(s / ns) as f64 / ns as f64, (s % ns) as f64 / ns as f64];
        let p = 2.0 * PI * (th[0] * x[0] + th[1] * x[1]);
        *v *= cis(if inverse { p } else { -p });
    }
}

pub fn inverse_bloch_floquet_transform(
    u: &[Vec<c64>],
    grid: &BrillouinGrid,
    ns: usize,
    zak: bool,
) -> Result<Vec<c64>> {
    let m = grid.size();
    let cell = ns * ns;
    if u.len() != grid.len() || u.iter().any(|v| v.len() != cell) {
        return invalid("fiber samples do not match the grid");
    }
    let mut f = vec![ZERO; m * m * cell];
    for (t, ut) in u.iter().enumerate() {
        let theta = grid.node(t);
        let mut v = ut.clone();
        if zak {
            apply_zak_phase(&mut v, theta, ns, true);
        }
        for c in 0..m * m {
            let ch = character(theta, cell_of(m, c)).conj() * grid.weight();
            for s in 0..cell {
                f[c * cell + s] += ch * v[s];
            }
        }
    }
    Ok(f)
}

/// Discrete fiber norm ((1/M²) Σ_θ ‖u_θ‖²)^{1/2}.
pub fn fiber_norm(u: &[Vec<c64>], grid: &BrillouinGrid) -> f64 {
    (u.iter().map(|v| v.iter().map(|x| x.norm_sqr()).sum::<f64>()).sum::<f64>() * grid.weight()).sqrt()
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    model_hash: String,
    backend: Backend,
    m: usize,
    n_bands: usize,
    dim: usize,
    payload_sha256: String,
    eigenvalues: String,
    eigenvectors: String,
}

fn encode_f64(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64(s: &str) -> Option<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(s).ok()?;
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

fn payload_digest(vals: &str, vecs: &str) -> String {
    let mut h = Sha256::new();
    h.update(vals.as_bytes());
    h.update(vecs.as_bytes());
    format!("{:x}", h.finalize())
}

pub fn save_band_cache(path: &Path, bands: &BandStructure) -> Result<()> {
    let vals: Vec<f64> = bands.eigenvalues.iter().flatten().copied().collect();
    let mut vecs = Vec::new();
    for u in &bands.eigenvectors {
        for c in 0..u.ncols() {
            for r in 0..u.nrows() {
                vecs.push(u[(r, c)].re);
                vecs.push(u[(r, c)].im);
            }
        }
    }
    let ev = encode_f64(&vals);
    let ec = encode_f64(&vecs);
    let header = CacheHeader {
        model_hash: bands.model.hash(),
        backend: bands.model.backend.clone(),
        m: bands.grid.size(),
        n_bands: bands.n_bands(),
        dim: bands.fiber_dim(),
        payload_sha256: payload_digest(&ev, &ec),
        eigenvalues: ev,
        eigenvectors: ec,
    };
    std::fs::write(path, serde_json::to_vec(&header)?)?;
    Ok(())
}

/// Loads a cache written for exactly this model, grid and band count;
/// anything else (missing, stale, corrupt) yields None.
pub fn load_band_cache(path: &Path, model: &PeriodicModel, grid: &BrillouinGrid, n_bands: usize) -> Option<BandStructure> {
    let raw = std::fs::read(path).ok()?;
    let h: CacheHeader = serde_json::from_slice(&raw).ok()?;
    if h.model_hash != model.hash() || h.m != grid.size() || h.n_bands != n_bands || h.dim != model.fiber_dim() {
        return None;
    }
    if payload_digest(&h.eigenvalues, &h.eigenvectors) != h.payload_sha256 {
        return None;
    }
    let vals = decode_f64(&h.eigenvalues)?;
    let vecs = decode_f64(&h.eigenvectors)?;
    let nodes = grid.len();
    if vals.len() != nodes * n_bands || vecs.len() != nodes * n_bands * h.dim * 2 {
        return None;
    }
    let eigenvalues = vals.chunks(n_bands).map(|c| c.to_vec()).collect();
    let block = n_bands * h.dim * 2;
    let eigenvectors = (0..nodes)
        .map(|t| {
            let b = &vecs[t * block..(t + 1) * block];
            Mat::from_fn(h.dim, n_bands, |r, c| {
                let o = 2 * (c * h.dim + r);
                c64::new(b[o], b[o + 1])
            })
        })
        .collect();
    Some(BandStructure {
        grid: grid.clone(),
        model: model.clone(),
        eigenvalues,
        eigenvectors,
    })
}

/// Operator-norm distance between the family projections of two band sets.
pub fn projector_distance(a: &BandStructure, b: &BandStructure, family: &IsolatedFamily) -> Result<f64> {
    let (lo, hi) = family.k_range();
    let mut d = 0.0f64;
    for t in 0..a.grid.len() {
        let pa = eigenprojection(a, t, lo, hi)?;
        let pb = eigenprojection(b, t, lo, hi)?;
        d = d.max(linalg::op_norm((&pa - &pb).as_ref()));
    }
    Ok(d)
}

/// ‖Ĥ P̂_B - P̂_B Ĥ‖ maximized over nodes.
pub fn fiber_commutation_defect(bands: &BandStructure, family: &IsolatedFamily) -> Result<f64> {
    let (lo, hi) = family.k_range();
    let mut d = 0.0f64;
    for t in 0..bands.grid.len() {
        let h = assemble_fiber(&bands.model, bands.grid.node(t))?.matrix;
        let p = eigenprojection(bands, t, lo, hi)?;
        d = d.max(linalg::op_norm((&h * &p - &p * &h).as_ref()));
    }
    Ok(d)
}

pub(crate) fn fix_phase(v: &mut [c64]) {
    if let Some(big) = v.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())) {
        if big.norm() > 0.0 {
            let ph = big.conj() / big.norm();
            v.iter_mut().for_each(|x| *x *= ph);
        }
    }
}

