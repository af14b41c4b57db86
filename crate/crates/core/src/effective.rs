//! Magnetic matrices on cell windows: Peierls assembly from a hopping
//! sequence, the twisted product, direct matrix elements of the tight frame,
//! covariant extraction and the first-order field correction.

use crate::bloch::PeriodicModel;
use crate::error::{invalid, Result};
use crate::frame::{HoppingSequence, WannierFrame};
use crate::geometry::{GaugeField, MagneticFieldSpec};
use crate::lattice::{LatticeVector, LatticeWindow};
use crate::linalg::{self, CsrMatrix, ZERO};
use crate::magnetic_frame::{pair_phase, TightFrameCorrection};
use crate::supercell::{unperturbed_stencil, BackgroundLinks};
use faer::{c64, Mat};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

/// Hermitian block matrix indexed by (cell, orbital) on a window.
#[derive(Clone, Debug)]
pub struct MagneticMatrix {
    pub window: LatticeWindow,
    pub n: usize,
    pub matrix: Mat<c64>,
}

impl MagneticMatrix {
    pub fn block(&self, i: usize, j: usize) -> Mat<c64> {
        let n = self.n;
        Mat::from_fn(n, n, |p, q| self.matrix[(i * n + p, j * n + q)])
    }

    /// Nonzero blocks keyed "(α)-(β)", each a list of rows of [re, im].
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        let cells = self.window.n_cells();
        for i in 0..cells {
            for j in 0..cells {
                let b = self.block(i, j);
                if linalg::max_abs(b.as_ref()) == 0.0 {
                    continue;
                }
                let rows: Vec<serde_json::Value> = (0..self.n)
                    .map(|p| (0..self.n).map(|q| serde_json::json!([b[(p, q)].re, b[(p, q)].im])).collect())
                    .collect();
                map.insert(
                    format!("{}-{}", self.window.cell(i), self.window.cell(j)),
                    serde_json::Value::Array(rows),
                );
            }
        }
        serde_json::Value::Object(map)
    }
}

fn assemble_with(hop: &HoppingSequence, gauge: &GaugeField, window: LatticeWindow) -> Result<MagneticMatrix> {
    if let LatticeWindow::Torus { m } = window {
        if 2 * hop.radius + 1 > m {
            return invalid(format!("hopping radius {} wraps around the {m}-cell torus", hop.radius));
        }
    }
    let n = hop.n;
    let mut matrix = Mat::zeros(window.n_cells() * n, window.n_cells() * n);
    for (i, j, d, img) in window.pairs(hop.radius) {
        let Some(b) = hop.get(d) else { continue };
        let ph = pair_phase(gauge, window, window.cell(i), window.cell(j), img)?;
        for p in 0..n {
            for q in 0..n {
                matrix[(i * n + p, j * n + q)] += ph * b[(p, q)];
            }
        }
    }
    Ok(MagneticMatrix { window, n, matrix })
}

/// M_{αβ} = Λ̃^ε(α,β) m̊_{α-β} with the constant part of the field.
pub fn assemble_peierls(hop: &HoppingSequence, spec: &MagneticFieldSpec, window: LatticeWindow) -> Result<MagneticMatrix> {
    spec.validate()?;
    assemble_with(hop, &spec.constant_gauge(), window)
}

/// M_{αβ} = Λ̃^{ε,c}(α,β) Λ̃^{ε,0}(α,β) m̊_{α-β}: the full field, fluctuation included.
pub fn assemble_fluctuation(hop: &HoppingSequence, spec: &MagneticFieldSpec, window: LatticeWindow) -> Result<MagneticMatrix> {
    assemble_with(hop, &spec.gauge()?, window)
}

/// [S ⋆ T]_α = Σ_γ Λ̃^ε(γ,α) S_γ T_{α-γ} for the constant field εb.
pub fn twisted_product(s: &HoppingSequence, t: &HoppingSequence, eps_b: f64) -> Result<HoppingSequence> {
    if s.n != t.n {
        return invalid("sequences have different block sizes");
    }
    let g = GaugeField::constant(eps_b);
    let mut entries: BTreeMap<LatticeVector, Mat<c64>> = BTreeMap::new();
    for (gs, ms) in &s.entries {
        for (gt, mt) in &t.entries {
            let a = gs.add(*gt);
            let ph = g.constant_phase(gs.as_f64(), a.as_f64());
            let e = entries.entry(a).or_insert_with(|| Mat::zeros(s.n, s.n));
            *e += (ms * mt) * faer::Scale(ph);
        }
    }
    Ok(HoppingSequence {
        n: s.n,
        radius: s.radius + t.radius,
        entries,
        tail: 0.0,
        decay_exponent: f64::INFINITY,
    })
}

/// Ψ* H Ψ for the corrected frame, on the frame's centre window.
pub fn direct_matrix_elements(corr: &TightFrameCorrection, h: &CsrMatrix, centers: LatticeWindow, n_b: usize) -> Result<MagneticMatrix> {
    let psi = corr.vectors.as_ref();
    if psi.nrows() != h.dim() {
        return invalid("frame and operator live on different supercells");
    }
    if psi.ncols() != centers.n_cells() * n_b {
        return invalid("frame size does not match the centre window");
    }
    let hpsi = h.matmat(psi);
    let matrix = linalg::hermitian_part((psi.adjoint() * hpsi).as_ref());
    Ok(MagneticMatrix {
        window: centers,
        n: n_b,
        matrix,
    })
}

#[derive(Clone, Debug)]
pub struct CovariantExtraction {
    pub hopping: HoppingSequence,
    /// max deviation of a block from Λ̃(α,β)·m̊_{α-β}
    pub residual: f64,
    /// largest entry beyond the extraction radius
    pub outside: f64,
}

/// Averages Λ̃(α,β)^{-1} M_{αβ} over pairs with equal separation.
pub fn covariance_extract(mat: &MagneticMatrix, gauge: &GaugeField, radius: usize) -> Result<CovariantExtraction> {
    let w = mat.window;
    if let LatticeWindow::Torus { m } = w {
        if 2 * radius + 1 > m {
            return invalid(format!("extraction radius {radius} wraps around the {m}-cell torus"));
        }
    }
    let n = mat.n;
    let mut sums: BTreeMap<LatticeVector, (Mat<c64>, usize)> = BTreeMap::new();
    let mut blocks = Vec::new();
    let mut inside = vec![false; w.n_cells() * w.n_cells()];
    for (i, j, d, img) in w.pairs(radius) {
        inside[i * w.n_cells() + j] = true;
        let ph = pair_phase(gauge, w, w.cell(i), w.cell(j), img)?.conj();
        let blk = mat.block(i, j) * faer::Scale(ph);
        let e = sums.entry(d).or_insert_with(|| (Mat::zeros(n, n), 0));
        e.0 += &blk;
        e.1 += 1;
        blocks.push((d, blk));
    }
    let entries: BTreeMap<LatticeVector, Mat<c64>> = sums
        .into_iter()
        .map(|(d, (s, c))| (d, s * faer::Scale(c64::new(1.0 / c as f64, 0.0))))
        .collect();
    let mut residual = 0.0f64;
    for (d, blk) in &blocks {
        residual = residual.max(linalg::max_abs((blk - &entries[d]).as_ref()));
    }
    let mut outside = 0.0f64;
    for i in 0..w.n_cells() {
        for j in 0..w.n_cells() {
            if !inside[i * w.n_cells() + j] {
                outside = outside.max(linalg::max_abs(mat.block(i, j).as_ref()));
            }
        }
    }
    Ok(CovariantExtraction {
        hopping: HoppingSequence {
            n,
            radius,
            entries,
            tail: outside,
            decay_exponent: f64::INFINITY,
        },
        residual,
        outside,
    })
}

/// max |A - B| over entries.
pub fn matrix_residual(a: &MagneticMatrix, b: &MagneticMatrix) -> Result<f64> {
    if a.window != b.window || a.n != b.n {
        return invalid("matrices live on different windows");
    }
    Ok(linalg::max_abs((&a.matrix - &b.matrix).as_ref()))
}

/// First-order field terms of the effective matrix, built from the
/// unperturbed Wannier functions and kernel.
pub struct CorrectionKernel<'a> {
    wannier: &'a WannierFrame,
    model: &'a PeriodicModel,
    links: BackgroundLinks,
    unit: GaugeField,
}

impl<'a> CorrectionKernel<'a> {
    pub fn new(wannier: &'a WannierFrame, model: &'a PeriodicModel, spec: &MagneticFieldSpec) -> Result<Self> {
        spec.validate()?;
        if model.fiber_dim() != wannier.sites_per_cell() {
            return invalid("Wannier functions and model use different cell grids");
        }
        Ok(CorrectionKernel {
            wannier,
            model,
            links: BackgroundLinks::new(model, wannier.ns)?,
            unit: spec.unit_gauge()?,
        })
    }

    fn psi(&self, p: usize, g: [i64; 2], center: LatticeVector) -> c64 {
        let ns = self.wannier.ns as i64;
        let r = [g[0] - center.0[0] * ns, g[1] - center.0[1] * ns];
        let c = LatticeVector([r[0].div_euclid(ns), r[1].div_euclid(ns)]);
        let s = (r[0].rem_euclid(ns) * ns + r[1].rem_euclid(ns)) as usize;
        self.wannier.value(p, c, s)
    }

    fn support(&self, center: LatticeVector) -> impl Iterator<Item = [i64; 2]> + '_ {
        let ns = self.wannier.ns as i64;
        self.wannier.window.cells().into_iter().flat_map(move |c| {
            (0..ns * ns).map(move |s| [(c.0[0] + center.0[0]) * ns + s / ns, (c.0[1] + center.0[1]) * ns + s % ns])
        })
    }

    fn pos(&self, g: [i64; 2]) -> [f64; 2] {
        let h = 1.0 / self.wannier.ns as f64;
        [g[0] as f64 * h, g[1] as f64 * h]
    }

    /// -i Σ ψ̄_α(x) K°(x,y) ψ_β(y) [Φ(α,x,y) + Φ(α,y,β)].
    pub fn kernel_term(&self, alpha: LatticeVector, beta: LatticeVector) -> Result<Mat<c64>> {
        let n = self.wannier.n_b;
        let a = alpha.as_f64();
        let b = beta.as_f64();
        let mut out = Mat::<c64>::zeros(n, n);
        for gy in self.support(beta) {
            let py: Vec<c64> = (0..n).map(|q| self.psi(q, gy, beta)).collect();
            if py.iter().all(|v| *v == ZERO) {
                continue;
            }
            let y = self.pos(gy);
            let st = unperturbed_stencil(self.model, &self.links, gy)?;
            for (d, k_yx) in st {
                let gx = [gy[0] + d[0], gy[1] + d[1]];
                let px: Vec<c64> = (0..n).map(|p| self.psi(p, gx, alpha)).collect();
                if px.iter().all(|v| *v == ZERO) {
                    continue;
                }
                let x = self.pos(gx);
                let w = self.unit.triangle_flux(a, x, y) + self.unit.triangle_flux(a, y, b);
                let k = k_yx.conj() * w;
                for p in 0..n {
                    for q in 0..n {
                        out[(p, q)] += px[p].conj() * k * py[q];
                    }
                }
            }
        }
        Ok(out * faer::Scale(c64::new(0.0, -1.0)))
    }

    /// -i Σ ψ̄_α(x) ψ_β(x) Φ(α,x,β), the first-order Gram block.
    pub fn gram_term(&self, alpha: LatticeVector, beta: LatticeVector) -> Mat<c64> {
        let n = self.wannier.n_b;
        let a = alpha.as_f64();
        let b = beta.as_f64();
        let mut out = Mat::<c64>::zeros(n, n);
        for g in self.support(beta) {
            let pb: Vec<c64> = (0..n).map(|q| self.psi(q, g, beta)).collect();
            let pa: Vec<c64> = (0..n).map(|p| self.psi(p, g, alpha)).collect();
            if pb.iter().all(|v| *v == ZERO) || pa.iter().all(|v| *v == ZERO) {
                continue;
            }
            let w = self.unit.triangle_flux(a, self.pos(g), b);
            for p in 0..n {
                for q in 0..n {
                    out[(p, q)] += pa[p].conj() * pb[q] * w;
                }
            }
        }
        out * faer::Scale(c64::new(0.0, -1.0))
    }
}

/// m¹(α,β) = k¹(α,β) - ½ Σ_γ [g¹(α,γ) m̊_{γ-β} + m̊_{α-γ} g¹(γ,β)], so that the
/// effective matrix is Λ̃^ε(α,β)[m̊_{α-β} + ε m¹(α,β)] + O(ε²).
pub fn first_order_correction(
    kernel: &CorrectionKernel<'_>,
    hop0: &HoppingSequence,
    alpha: LatticeVector,
    beta: LatticeVector,
) -> Result<Mat<c64>> {
    let n = hop0.n;
    let mut out = kernel.kernel_term(alpha, beta)?;
    let r = hop0.radius as i64;
    let mut conv = Mat::<c64>::zeros(n, n);
    for d1 in -r..=r {
        for d2 in -r..=r {
            let d = LatticeVector([d1, d2]);
            let Some(m) = hop0.get(d) else { continue };
            // γ = β + d on the left, γ = α - d on the right
            conv += kernel.gram_term(alpha, beta.add(d)) * m;
            conv += m * kernel.gram_term(alpha.sub(d), beta);
        }
    }
    out -= conv * faer::Scale(c64::new(0.5, 0.0));
    Ok(out)
}

/// The correction as a sequence m¹_δ = m¹(δ, 0); exact only for a constant field,
/// where m¹ depends on α - β alone.
pub fn first_order_sequence(kernel: &CorrectionKernel<'_>, hop0: &HoppingSequence, radius: usize) -> Result<HoppingSequence> {
    if !kernel.unit.periodic.is_empty() {
        return invalid("the correction is a sequence only for a constant field");
    }
    let n = hop0.n;
    let r = radius as i64;
    let rg = hop0.radius as i64;
    let mut gram = BTreeMap::new();
    for d1 in -(r + rg)..=(r + rg) {
        for d2 in -(r + rg)..=(r + rg) {
            let d = LatticeVector([d1, d2]);
            gram.insert(d, kernel.gram_term(d, LatticeVector::ZERO));
        }
    }
    let mut entries = BTreeMap::new();
    for d1 in -r..=r {
        for d2 in -r..=r {
            let d = LatticeVector([d1, d2]);
            let mut m1 = kernel.kernel_term(d, LatticeVector::ZERO)?;
            let mut conv = Mat::<c64>::zeros(n, n);
            for (g, m) in &hop0.entries {
                // g¹_{d-g} m̊_g + m̊_g g¹_{d-g}
                if let Some(gt) = gram.get(&d.sub(*g)) {
                    conv += gt * m + m * gt;
                }
            }
            m1 -= conv * faer::Scale(c64::new(0.5, 0.0));
            entries.insert(d, m1);
        }
    }
    Ok(HoppingSequence {
        n,
        radius,
        entries,
        tail: 0.0,
        decay_exponent: f64::INFINITY,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralPoint {
    pub value: f64,
    pub interior_weight: f64,
}

impl SpectralPoint {
    pub fn is_bulk(&self) -> bool {
        self.interior_weight >= 0.9
    }
}

/// Eigenvalues with the weight of each eigenvector on cells at least
/// `depth` away from the window edge.
pub fn window_spectrum(mat: &MagneticMatrix, depth: usize) -> Result<Vec<SpectralPoint>> {
    let (vals, vecs) = linalg::eigh(mat.matrix.as_ref())?;
    let inner = mat.window.interior(depth);
    let n = mat.n;
    Ok(vals
        .iter()
        .enumerate()
        .map(|(k, &value)| {
            let interior_weight = (0..vecs.nrows())
                .filter(|&i| inner[i / n])
                .map(|i| vecs[(i, k)].norm_sqr())
                .sum();
            SpectralPoint { value, interior_weight }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ButterflyPoint {
    pub flux: f64,
    pub eigenvalue: f64,
    pub interior_weight: f64,
}

/// Spectra of the Peierls matrix on [-L, L]² for flux values εb/2π per cell.
pub fn butterfly(hop: &HoppingSequence, fluxes: &[f64], l: usize) -> Result<Vec<ButterflyPoint>> {
    let window = LatticeWindow::Open { l };
    let mut out = Vec::new();
    for &flux in fluxes {
        if !flux.is_finite() {
            return invalid("flux values must be finite");
        }
        let spec = MagneticFieldSpec::constant(1.0, 2.0 * PI * flux);
        let mat = assemble_peierls(hop, &spec, window)?;
        for p in window_spectrum(&mat, 1)? {
            out.push(ButterflyPoint {
                flux,
                eigenvalue: p.value,
                interior_weight: p.interior_weight,
            });
        }
    }
    Ok(out)
}

pub fn write_butterfly_csv(points: &[ButterflyPoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "flux,eigenvalue,interior_weight")?;
    for p in points {
        writeln!(w, "{:.17e},{:.17e},{:.17e}", p.flux, p.eigenvalue, p.interior_weight)?;
    }
    Ok(())
}

/// Harper sequence: unit hopping to the four nearest cells.
pub fn harper_hopping() -> HoppingSequence {
    let mut entries = BTreeMap::new();
    for g in [[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1]] {
        let v = if g[0] * g[1] == 0 && g != [0, 0] { 1.0 } else { 0.0 };
        entries.insert(LatticeVector(g), Mat::from_fn(1, 1, |_, _| c64::new(v, 0.0)));
    }
    HoppingSequence {
        n: 1,
        radius: 1,
        entries,
        tail: 0.0,
        decay_exponent: f64::INFINITY,
    }
}

/// Spectrum edges of the bulk part of a butterfly slice.
pub fn bulk_edges(points: &[ButterflyPoint]) -> Option<(f64, f64)> {
    let bulk: Vec<f64> = points.iter().filter(|p| p.interior_weight >= 0.9).map(|p| p.eigenvalue).collect();
    let lo = bulk.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = bulk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (!bulk.is_empty()).then_some((lo, hi))
}
