//! Finite sampling windows of the plane: M×M cells of ns×ns sites, either
//! truncated (Dirichlet) or closed into a magnetic torus.

use crate::bloch::{Backend, PeriodicModel, STEPS};
use crate::error::{invalid, Error, Result};
use crate::geometry::{wedge, GaugeField};
use crate::lattice::LatticeVector;
use crate::linalg::{cis, CsrMatrix, ZERO};
use faer::c64;
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Open,
    Torus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Supercell {
    m: usize,
    ns: usize,
    boundary: Boundary,
}

impl Supercell {
    /// Cells [-⌊M/2⌋, M - ⌊M/2⌋)² with periodic magnetic boundary conditions.
    pub fn torus(m: usize, ns: usize) -> Result<Self> {
        Self::new(m, ns, Boundary::Torus)
    }

    /// Cells [-⌊M/2⌋, M - ⌊M/2⌋)², Dirichlet outside.
    pub fn open(m: usize, ns: usize) -> Result<Self> {
        Self::new(m, ns, Boundary::Open)
    }

    fn new(m: usize, ns: usize, boundary: Boundary) -> Result<Self> {
        if m == 0 || ns == 0 {
            return invalid("supercell needs at least one cell and one site per cell");
        }
        Ok(Supercell { m, ns, boundary })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn ns(&self) -> usize {
        self.ns
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn lo(&self) -> i64 {
        -((self.m / 2) as i64)
    }

    pub fn n_cells(&self) -> usize {
        self.m * self.m
    }

    pub fn sites_per_cell(&self) -> usize {
        self.ns * self.ns
    }

    pub fn n_sites(&self) -> usize {
        self.n_cells() * self.sites_per_cell()
    }

    pub fn cell(&self, ci: usize) -> LatticeVector {
        let lo = self.lo();
        LatticeVector([(ci / self.m) as i64 + lo, (ci % self.m) as i64 + lo])
    }

    pub fn cells(&self) -> Vec<LatticeVector> {
        (0..self.n_cells()).map(|c| self.cell(c)).collect()
    }

    pub fn cell_index(&self, c: LatticeVector) -> Option<usize> {
        let lo = self.lo();
        let a = c.0[0] - lo;
        let b = c.0[1] - lo;
        let m = self.m as i64;
        if (0..m).contains(&a) && (0..m).contains(&b) {
            Some((a * m + b) as usize)
        } else {
            None
        }
    }

    /// Integer grid coordinate c·ns + s of a site.
    pub fn grid_coord(&self, i: usize) -> [i64; 2] {
        let per = self.sites_per_cell();
        let c = self.cell(i / per);
        let s = i % per;
        let ns = self.ns as i64;
        [c.0[0] * ns + (s / self.ns) as i64, c.0[1] * ns + (s % self.ns) as i64]
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        let g = self.grid_coord(i);
        let h = 1.0 / self.ns as f64;
        [g[0] as f64 * h, g[1] as f64 * h]
    }

    pub fn sub_site(&self, i: usize) -> usize {
        i % self.sites_per_cell()
    }

    /// Site holding grid point g. On the torus also returns the image n with
    /// g = g' + M·ns·n; on the open window points outside give None.
    pub fn locate(&self, g: [i64; 2]) -> Option<(usize, [i64; 2])> {
        let ns = self.ns as i64;
        let lo = self.lo() * ns;
        let span = self.m as i64 * ns;
        let mut n = [0i64; 2];
        let mut w = [0i64; 2];
        for j in 0..2 {
            let r = g[j] - lo;
            n[j] = r.div_euclid(span);
            w[j] = r.rem_euclid(span) + lo;
        }
        if self.boundary == Boundary::Open && n != [0, 0] {
            return None;
        }
        let c = LatticeVector([w[0].div_euclid(ns), w[1].div_euclid(ns)]);
        let s = (w[0].rem_euclid(ns) * ns + w[1].rem_euclid(ns)) as usize;
        let ci = self.cell_index(c)?;
        Some((ci * self.sites_per_cell() + s, n))
    }

    /// Sites at least `depth` cells away from the window edge. The torus has no edge.
    pub fn interior_mask(&self, depth: usize) -> Vec<bool> {
        let per = self.sites_per_cell();
        (0..self.n_sites())
            .map(|i| match self.boundary {
                Boundary::Torus => true,
                Boundary::Open => {
                    let c = self.cell(i / per);
                    let lo = self.lo();
                    let hi = lo + self.m as i64 - 1;
                    let d = depth as i64;
                    c.0.iter().all(|&v| v - lo >= d && hi - v >= d)
                }
            })
            .collect()
    }
}

/// Magnetic boundary data of a torus threaded by a constant field b.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorusFlux {
    pub b: f64,
    pub m: usize,
    pub quanta: i64,
}

impl TorusFlux {
    /// The total flux b·M² must be a multiple of 2π.
    pub fn new(b: f64, m: usize) -> Result<Self> {
        let k = b * (m * m) as f64 / (2.0 * PI);
        let quanta = k.round();
        if (k - quanta).abs() > 1e-8 * k.abs().max(1.0) {
            return invalid(format!(
                "flux {k:.6}·2π through the {m}×{m} torus is not quantized"
            ));
        }
        Ok(TorusFlux {
            b,
            m,
            quanta: quanta as i64,
        })
    }

    pub fn sign(&self, n: [i64; 2]) -> f64 {
        if (self.quanta * n[0] * n[1]).rem_euclid(2) == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// f(x' + M n) = factor(x', n)·f(x') for functions on the magnetic torus.
    pub fn factor(&self, x: [f64; 2], n: [i64; 2]) -> c64 {
        let mn = [(self.m as i64 * n[0]) as f64, (self.m as i64 * n[1]) as f64];
        cis(-0.5 * self.b * wedge(x, mn)) * self.sign(n)
    }
}

/// Background link phases Λ°(x, x + h·d), which only depend on the sub-site.
#[derive(Clone, Debug)]
pub struct BackgroundLinks {
    ns: usize,
    table: Vec<[c64; 4]>,
}

impl BackgroundLinks {
    pub fn new(model: &PeriodicModel, ns: usize) -> Result<Self> {
        let a0 = model.background_potential()?;
        let h = 1.0 / ns as f64;
        let table = (0..ns * ns)
            .map(|s| {
                let x = [(s / ns) as f64 * h, (s % ns) as f64 * h];
                let mut out = [ZERO; 4];
                for (k, d) in STEPS.iter().enumerate() {
                    let y = [x[0] + d[0] as f64 * h, x[1] + d[1] as f64 * h];
                    out[k] = cis(-a0.line_integral(x, y, 4));
                }
                out
            })
            .collect();
        Ok(BackgroundLinks { ns, table })
    }

    pub fn get(&self, g: [i64; 2], step: usize) -> c64 {
        let ns = self.ns as i64;
        let s = (g[0].rem_euclid(ns) * ns + g[1].rem_euclid(ns)) as usize;
        self.table[s][step]
    }
}

fn grid_ns(model: &PeriodicModel) -> Result<usize> {
    match model.backend {
        Backend::Grid { ns } => Ok(ns),
        _ => invalid("the lattice operator needs the grid backend"),
    }
}

/// Unperturbed kernel entries K°(x, y) for y = x and its four neighbours,
/// as (grid offset, value).
pub fn unperturbed_stencil(model: &PeriodicModel, links: &BackgroundLinks, g: [i64; 2]) -> Result<[([i64; 2], c64); 5]> {
    let ns = grid_ns(model)?;
    let h = 1.0 / ns as f64;
    let inv_h2 = 1.0 / (h * h);
    let x = [g[0] as f64 * h, g[1] as f64 * h];
    let mut out = [([0i64, 0i64], c64::new(4.0 * inv_h2 + model.potential_value(x) + model.energy_shift, 0.0)); 5];
    for (k, d) in STEPS.iter().enumerate() {
        out[k + 1] = (*d, links.get(g, k) * (-inv_h2));
    }
    Ok(out)
}

impl Supercell {
    /// Lattice Schrödinger operator of the model in the extra field `pert`.
    pub fn hamiltonian(&self, model: &PeriodicModel, pert: &GaugeField) -> Result<CsrMatrix> {
        let ns = grid_ns(model)?;
        if ns != self.ns {
            return invalid(format!("model has ns={ns}, supercell has ns={}", self.ns));
        }
        let flux = match self.boundary {
            Boundary::Torus => {
                let m = self.m as f64;
                for (k, _) in &pert.periodic.modes {
                    if ((k[0] * m).round() - k[0] * m).abs() > 1e-9 || ((k[1] * m).round() - k[1] * m).abs() > 1e-9 {
                        return invalid(format!("fluctuation mode {k:?} is not periodic on the {m}-cell torus"));
                    }
                }
                Some(TorusFlux::new(pert.b, self.m)?)
            }
            Boundary::Open => None,
        };
        let links = BackgroundLinks::new(model, ns)?;
        let h = 1.0 / ns as f64;
        let n = self.n_sites();
        let mut trip = Vec::with_capacity(5 * n);
        for i in 0..n {
            let g = self.grid_coord(i);
            let x = [g[0] as f64 * h, g[1] as f64 * h];
            let st = unperturbed_stencil(model, &links, g)?;
            trip.push((i, i, st[0].1));
            for (d, k0) in &st[1..] {
                let gy = [g[0] + d[0], g[1] + d[1]];
                let Some((j, img)) = self.locate(gy) else { continue };
                let y = [gy[0] as f64 * h, gy[1] as f64 * h];
                let mut v = k0 * pert.line_phase(x, y);
                if let Some(f) = &flux {
                    v *= f.factor(self.position(j), img);
                }
                trip.push((i, j, v));
            }
        }
        let op = CsrMatrix::from_triplets(n, trip);
        let defect = op.hermiticity_defect();
        if defect > 1e-9 {
            return Err(Error::Invariant(format!("lattice operator not Hermitian ({defect:e})")));
        }
        Ok(op)
    }
}

/// (T_γ f)(x) = Λ̃(x,γ) f(x-γ) on supercell samples. Samples shifted out of
/// an open window are dropped; on a torus only the field-free shift is defined.
pub fn zak_translate(cell: &Supercell, f: &[c64], gamma: LatticeVector, gauge: &GaugeField) -> Result<Vec<c64>> {
    if f.len() != cell.n_sites() {
        return invalid("sample count does not match the supercell");
    }
    if cell.boundary() == Boundary::Torus && !gauge.is_zero() {
        return invalid("magnetic translations do not preserve the torus boundary condition");
    }
    if gamma.sup_norm() >= cell.m() as i64 {
        return invalid(format!("shift {gamma} exceeds the supercell"));
    }
    let ns = cell.ns() as i64;
    let gf = gamma.as_f64();
    let mut out = vec![ZERO; f.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let g = cell.grid_coord(i);
        let src = [g[0] - gamma.0[0] * ns, g[1] - gamma.0[1] * ns];
        if let Some((j, _)) = cell.locate(src) {
            *o = gauge.line_phase(cell.position(i), gf) * f[j];
        }
    }
    Ok(out)
}
