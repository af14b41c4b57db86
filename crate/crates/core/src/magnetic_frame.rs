//! The magnetically phased frame ψ̃^ε, its Gram quasi-projection and the
//! tight-frame correction ψ^ε = Σ f(G) ψ̃^ε.

use crate::error::{invalid, Error, Result};
use crate::frame::WannierFrame;
use crate::geometry::MagneticFieldSpec;
use crate::lattice::{LatticeVector, LatticeWindow};
use crate::linalg::{self, CsrMatrix, WindowEigen, ZERO};
use crate::supercell::{Boundary, Supercell, TorusFlux};
use faer::{c64, Mat, MatRef};
use std::io::Write;

#[derive(Clone, Debug)]
pub struct MagneticFrame {
    /// sites × (centre·n_b + p)
    pub vectors: Mat<c64>,
    pub centers: LatticeWindow,
    pub n_b: usize,
    pub spec: MagneticFieldSpec,
}

impl MagneticFrame {
    pub fn n_vectors(&self) -> usize {
        self.vectors.ncols()
    }
}

/// ψ̃^ε_{γ,p}(x) = Λ̃^ε(x, γ) ψ_p(x - γ) for every cell γ of the supercell.
/// On a magnetic torus the translate is folded back with the boundary
/// factors, so it satisfies the same quasi-periodicity as the operator.
pub fn build_magnetic_frame(wannier: &WannierFrame, spec: &MagneticFieldSpec, cell: &Supercell) -> Result<MagneticFrame> {
    spec.validate()?;
    if wannier.ns != cell.ns() {
        return invalid("Wannier functions and supercell use different cell grids");
    }
    let gauge = spec.gauge()?;
    let flux = match cell.boundary() {
        Boundary::Torus => {
            if wannier.window.side() > cell.m() {
                return invalid("Wannier window exceeds the torus");
            }
            Some(TorusFlux::new(gauge.b, cell.m())?)
        }
        Boundary::Open => None,
    };
    let centers = match cell.boundary() {
        Boundary::Torus => LatticeWindow::Torus { m: cell.m() },
        Boundary::Open => {
            if cell.m() % 2 == 0 {
                return invalid("open supercells carrying a frame need an odd number of cells");
            }
            LatticeWindow::Open { l: cell.m() / 2 }
        }
    };
    let ns = cell.ns() as i64;
    let per = wannier.sites_per_cell();
    let n_b = wannier.n_b;
    let wcells = wannier.window.cells();
    let mut vectors = Mat::zeros(cell.n_sites(), centers.n_cells() * n_b);
    for ci in 0..centers.n_cells() {
        let gamma = centers.cell(ci);
        let gf = gamma.as_f64();
        for (wi, d) in wcells.iter().enumerate() {
            let c = gamma.add(*d);
            for s in 0..per {
                let g = [c.0[0] * ns + (s / cell.ns()) as i64, c.0[1] * ns + (s % cell.ns()) as i64];
                let Some((site, img)) = cell.locate(g) else { continue };
                let x = [g[0] as f64 / ns as f64, g[1] as f64 / ns as f64];
                let mut phase = gauge.line_phase(x, gf);
                if let Some(f) = &flux {
                    phase *= f.factor(cell.position(site), img).conj();
                }
                for p in 0..n_b {
                    let v = wannier.samples[p][wi * per + s];
                    if v != ZERO {
                        vectors[(site, ci * n_b + p)] += phase * v;
                    }
                }
            }
        }
    }
    Ok(MagneticFrame {
        vectors,
        centers,
        n_b,
        spec: spec.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct GramSpectrum {
    pub gram: Mat<c64>,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat<c64>,
    /// size of the cluster above 1/2
    pub rank: usize,
    /// max distance of an eigenvalue to {0, 1}
    pub half_width: f64,
    /// ‖G² - G‖
    pub idempotency_defect: f64,
}

impl GramSpectrum {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "index,eigenvalue,cluster")?;
        for (i, v) in self.eigenvalues.iter().enumerate() {
            writeln!(w, "{i},{v:.17e},{}", if *v > 0.5 { 1 } else { 0 })?;
        }
        Ok(())
    }
}

pub fn gram_spectrum(frame: &MagneticFrame) -> Result<GramSpectrum> {
    let v = frame.vectors.as_ref();
    let gram = linalg::hermitian_part((v.adjoint() * v).as_ref());
    let (eigenvalues, eigenvectors) = linalg::eigh(gram.as_ref())?;
    if let Some(bad) = eigenvalues.iter().find(|&&z| (0.25..=0.75).contains(&z)) {
        return Err(Error::Numerical(format!(
            "Gram eigenvalue {bad:.4} inside [0.25, 0.75]: ε too large for this window"
        )));
    }
    let rank = eigenvalues.iter().filter(|&&z| z > 0.5).count();
    let half_width = eigenvalues
        .iter()
        .map(|&z| z.abs().min((z - 1.0).abs()))
        .fold(0.0, f64::max);
    let idempotency_defect = eigenvalues.iter().map(|&z| (z * z - z).abs()).fold(0.0, f64::max);
    Ok(GramSpectrum {
        gram,
        eigenvalues,
        eigenvectors,
        rank,
        half_width,
        idempotency_defect,
    })
}

#[derive(Clone, Debug)]
pub struct TightFrameCorrection {
    /// f(G) with f(z) = z^{-1/2} on the cluster near 1, 0 near 0
    pub coefficients: Mat<c64>,
    /// corrected vectors ψ^ε
    pub vectors: Mat<c64>,
    pub rank: usize,
    pub corrected_gram_defect: f64,
}

pub fn tighten_magnetic_frame(frame: &MagneticFrame, gram: &GramSpectrum) -> Result<TightFrameCorrection> {
    let coefficients = linalg::spectral_apply(&gram.eigenvalues, gram.eigenvectors.as_ref(), |z| {
        c64::new(if z > 0.5 { z.powf(-0.5) } else { 0.0 }, 0.0)
    });
    let vectors = &frame.vectors * &coefficients;
    let g2 = linalg::hermitian_part((vectors.adjoint() * &vectors).as_ref());
    let corrected_gram_defect = linalg::hermitian_norm((&g2 * &g2 - &g2).as_ref())?;
    Ok(TightFrameCorrection {
        coefficients,
        vectors,
        rank: gram.rank,
        corrected_gram_defect,
    })
}

/// max over columns of ‖ψ^ε - ψ̃^ε‖.
pub fn correction_size(frame: &MagneticFrame, corr: &TightFrameCorrection) -> f64 {
    let d = &corr.vectors - &frame.vectors;
    (0..d.ncols())
        .map(|j| (0..d.nrows()).map(|i| d[(i, j)].norm_sqr()).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn mask_rows(a: MatRef<'_, c64>, mask: &[bool]) -> Mat<c64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| if mask[i] { a[(i, j)] } else { ZERO })
}

/// ‖1_X [H, P] 1_X‖ with P = ΨΨ*, computed exactly: the compressed commutator
/// vanishes off span(1_X Ψ, 1_X HΨ), so its norm is that of a small matrix.
pub fn projector_commutator_norm(corr: &TightFrameCorrection, h: &CsrMatrix, mask: &[bool]) -> Result<f64> {
    let psi = corr.vectors.as_ref();
    if psi.nrows() != h.dim() || mask.len() != h.dim() {
        return invalid("frame, operator and mask live on different supercells");
    }
    let hpsi = h.matmat(psi);
    let a = mask_rows(psi, mask);
    let b = mask_rows(hpsi.as_ref(), mask);
    let k = a.ncols();
    let span = Mat::from_fn(a.nrows(), 2 * k, |i, j| if j < k { a[(i, j)] } else { b[(i, j - k)] });
    let q = basis_of(span.as_ref())?;
    // C = 1_X (HΨΨ* - ΨΨ*H) 1_X = b a* - a b*, compressed to span q
    let qa = q.adjoint() * &a;
    let qb = q.adjoint() * &b;
    let c = &qb * qa.adjoint() - &qa * qb.adjoint();
    Ok(linalg::op_norm(c.as_ref()))
}

/// Orthonormal basis of a column span, dropping numerically dependent directions.
fn basis_of(a: MatRef<'_, c64>) -> Result<Mat<c64>> {
    let g = linalg::hermitian_part((a.adjoint() * a).as_ref());
    let (vals, vecs) = linalg::eigh(g.as_ref())?;
    let top = vals.last().copied().unwrap_or(0.0);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > 1e-13 * top).collect();
    let w = Mat::from_fn(vecs.nrows(), keep.len(), |i, j| vecs[(i, keep[j])] * vals[keep[j]].powf(-0.5));
    Ok(a * w)
}

/// The same norm by power iteration on C*C, used as an independent route.
pub fn projector_commutator_norm_power(
    corr: &TightFrameCorrection,
    h: &CsrMatrix,
    mask: &[bool],
    seed: u64,
    max_iter: usize,
) -> Result<f64> {
    let psi = corr.vectors.as_ref();
    let n = h.dim();
    if psi.nrows() != n || mask.len() != n {
        return invalid("frame, operator and mask live on different supercells");
    }
    let apply = |v: &[c64]| -> Vec<c64> {
        let vm: Vec<c64> = v.iter().zip(mask).map(|(x, &m)| if m { *x } else { ZERO }).collect();
        // H P v - P H v
        let pv = project(psi, &vm);
        let hpv = h.apply(&pv);
        let hv = h.apply(&vm);
        let phv = project(psi, &hv);
        hpv.iter()
            .zip(&phv)
            .zip(mask)
            .map(|((a, b), &m)| if m { a - b } else { ZERO })
            .collect()
    };
    let mut v = linalg::random_unit_vector(n, seed);
    let mut est = 0.0;
    for _ in 0..max_iter {
        let cv = apply(&v);
        let nrm = linalg::norm(&cv);
        if nrm == 0.0 {
            return Ok(0.0);
        }
        // C is anti-Hermitian: C*C v = -C(Cv)
        let w: Vec<c64> = apply(&cv).iter().map(|x| -x).collect();
        let wn = linalg::norm(&w);
        // Rayleigh estimate ‖Cv‖ for unit v: error quadratic in the vector error
        let new = nrm;
        v = w.iter().map(|x| x / wn).collect();
        if (new - est).abs() <= 1e-12 * new {
            return Ok(new);
        }
        est = new;
    }
    Ok(est)
}

fn project(psi: MatRef<'_, c64>, v: &[c64]) -> Vec<c64> {
    let coeff: Vec<c64> = (0..psi.ncols())
        .map(|j| (0..psi.nrows()).map(|i| psi[(i, j)].conj() * v[i]).sum())
        .collect();
    let mut out = vec![ZERO; psi.nrows()];
    for (j, c) in coeff.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += psi[(i, j)] * c;
        }
    }
    out
}

/// ‖P φ(H) - φ(H)‖ from the eigenpairs of H covering supp φ.
pub fn spectral_flattening_check(corr: &TightFrameCorrection, window: &WindowEigen, phi: impl Fn(f64) -> f64) -> Result<f64> {
    if window.values.is_empty() {
        return Err(Error::Numerical("spectral window is empty".into()));
    }
    let v = &window.vectors;
    let x = Mat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * phi(window.values[j]));
    let psi = &corr.vectors;
    let y = &x - psi * (psi.adjoint() * &x);
    Ok(linalg::op_norm(y.as_ref()))
}

/// Largest deviation of interior Gram blocks from Λ̃^ε(α,β)·g_{α-β}, where g
/// is averaged over pairs with the same separation.
pub fn zak_covariance_defect(frame: &MagneticFrame, gram: &GramSpectrum, interior: &[bool], radius: usize) -> Result<f64> {
    let gauge = frame.spec.constant_gauge();
    let n = frame.n_b;
    let pairs = frame.centers.pairs(radius);
    let mut sums: std::collections::BTreeMap<LatticeVector, (Mat<c64>, usize)> = Default::default();
    let mut blocks = Vec::new();
    for (i, j, d, img) in pairs {
        if !(interior[i] && interior[j]) {
            continue;
        }
        let a = frame.centers.cell(i);
        let b = frame.centers.cell(j);
        let ph = pair_phase(&gauge, frame.centers, a, b, img)?.conj();
        let blk = Mat::from_fn(n, n, |p, q| gram.gram[(i * n + p, j * n + q)] * ph);
        let e = sums.entry(d).or_insert_with(|| (Mat::zeros(n, n), 0));
        e.0 += &blk;
        e.1 += 1;
        blocks.push((d, blk));
    }
    let mut dev = 0.0f64;
    for (d, blk) in blocks {
        let (s, c) = &sums[&d];
        let avg = s * faer::Scale(c64::new(1.0 / *c as f64, 0.0));
        dev = dev.max(linalg::max_abs((&blk - &avg).as_ref()));
    }
    Ok(dev)
}

/// Phase multiplying m̊_{α-β-Mm} in block (α, β) of a covariant matrix:
/// Λ̃(α,β) on open windows, s(m)Λ̃_b(β,Mm)Λ̃(α,β+Mm) across a torus image m,
/// where only the constant part b enters the boundary factor.
pub fn pair_phase(
    gauge: &crate::geometry::GaugeField,
    window: LatticeWindow,
    a: LatticeVector,
    b: LatticeVector,
    img: LatticeVector,
) -> Result<c64> {
    match window {
        LatticeWindow::Open { .. } => Ok(gauge.line_phase(a.as_f64(), b.as_f64())),
        LatticeWindow::Torus { m } => {
            let f = TorusFlux::new(gauge.b, m)?;
            let mm = img.scale(m as i64);
            let shifted = b.add(mm);
            Ok(gauge.constant_phase(b.as_f64(), mm.as_f64())
                * gauge.line_phase(a.as_f64(), shifted.as_f64())
                * f.sign(img.0))
        }
    }
}
