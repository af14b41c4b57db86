//! Square lattice Z², its dual, and the discretized Brillouin torus.

use crate::error::{invalid, Result};
use faer::c64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LatticeVector(pub [i64; 2]);

impl LatticeVector {
    pub const ZERO: LatticeVector = LatticeVector([0, 0]);

    pub fn new(a: i64, b: i64) -> Self {
        LatticeVector([a, b])
    }

    pub fn as_f64(self) -> [f64; 2] {
        [self.0[0] as f64, self.0[1] as f64]
    }

    pub fn sup_norm(self) -> i64 {
        self.0[0].abs().max(self.0[1].abs())
    }

    pub fn add(self, o: LatticeVector) -> Self {
        LatticeVector([self.0[0] + o.0[0], self.0[1] + o.0[1]])
    }

    pub fn sub(self, o: LatticeVector) -> Self {
        LatticeVector([self.0[0] - o.0[0], self.0[1] - o.0[1]])
    }

    pub fn neg(self) -> Self {
        LatticeVector([-self.0[0], -self.0[1]])
    }

    pub fn scale(self, k: i64) -> Self {
        LatticeVector([k * self.0[0], k * self.0[1]])
    }
}

impl std::fmt::Display for LatticeVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.0[0], self.0[1])
    }
}

/// Point of the dual space, in units of the dual basis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualVector(pub [f64; 2]);

/// Point of the Brillouin torus, coordinates in [-1/2, 1/2).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint([f64; 2]);

impl TorusPoint {
    pub fn new(c: [f64; 2]) -> Result<Self> {
        if c.iter().all(|v| (-0.5..0.5).contains(v)) {
            Ok(TorusPoint(c))
        } else {
            invalid(format!("torus coordinates {c:?} outside [-1/2,1/2)"))
        }
    }

    pub fn coords(self) -> [f64; 2] {
        self.0
    }
}

/// Dual pairing, 2π Σ ξ_j x_j.
pub fn pairing(xi: DualVector, x: [f64; 2]) -> f64 {
    2.0 * PI * (xi.0[0] * x[0] + xi.0[1] * x[1])
}

/// Split a dual vector into its integer part and its torus remainder.
pub fn wrap_and_split(xi: [f64; 2]) -> (DualVector, TorusPoint) {
    let mut n = [0.0; 2];
    let mut r = [0.0; 2];
    for j in 0..2 {
        let mut k = (xi[j] + 0.5).floor();
        let mut rem = xi[j] - k;
        // guard against rounding pushing the remainder onto +1/2
        if rem >= 0.5 {
            rem -= 1.0;
            k += 1.0;
        }
        if rem < -0.5 {
            rem += 1.0;
            k -= 1.0;
        }
        n[j] = k;
        r[j] = rem;
    }
    (DualVector(n), TorusPoint(r))
}

/// The character e^{-i<θ,γ>}.
pub fn character(theta: TorusPoint, gamma: LatticeVector) -> c64 {
    let p = pairing(DualVector(theta.0), gamma.as_f64());
    c64::new(p.cos(), -p.sin())
}

/// M×M uniform grid on the torus, nodes (j - M/2)/M.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrillouinGrid {
    m: usize,
}

impl BrillouinGrid {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 || m % 2 != 0 {
            return invalid(format!("grid size {m} must be positive and even"));
        }
        Ok(BrillouinGrid { m })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.m * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    /// Quadrature weight 1/M².
    pub fn weight(&self) -> f64 {
        1.0 / (self.m * self.m) as f64
    }

    /// Node with flat index j1*M + j2.
    pub fn node(&self, idx: usize) -> TorusPoint {
        let m = self.m as f64;
        let j1 = (idx / self.m) as f64;
        let j2 = (idx % self.m) as f64;
        TorusPoint([(j1 - m / 2.0) / m, (j2 - m / 2.0) / m])
    }

    pub fn nodes(&self) -> impl Iterator<Item = TorusPoint> + '_ {
        (0..self.len()).map(|i| self.node(i))
    }

    /// Flat index of θ=0.
    pub fn origin_index(&self) -> usize {
        (self.m / 2) * self.m + self.m / 2
    }
}

/// Discrete inverse transform (1/M²) Σ_θ e^{i<θ,γ>} f(θ).
pub fn torus_fourier(grid: &BrillouinGrid, samples: &[c64], gamma: LatticeVector) -> Result<c64> {
    if samples.len() != grid.len() {
        return invalid(format!(
            "{} samples for a grid of {} nodes",
            samples.len(),
            grid.len()
        ));
    }
    let mut acc = c64::new(0.0, 0.0);
    for (i, f) in samples.iter().enumerate() {
        acc += character(grid.node(i), gamma).conj() * f;
    }
    Ok(acc * grid.weight())
}

/// Finite set of lattice cells carrying a block matrix: the open square
/// [-L, L]² or the torus [-M/2, M/2)² with period M.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatticeWindow {
    Open { l: usize },
    Torus { m: usize },
}

impl LatticeWindow {
    pub fn side(&self) -> usize {
        match *self {
            LatticeWindow::Open { l } => 2 * l + 1,
            LatticeWindow::Torus { m } => m,
        }
    }

    pub fn lo(&self) -> i64 {
        -((self.side() / 2) as i64)
    }

    pub fn n_cells(&self) -> usize {
        self.side() * self.side()
    }

    pub fn cell(&self, i: usize) -> LatticeVector {
        let s = self.side();
        LatticeVector([(i / s) as i64 + self.lo(), (i % s) as i64 + self.lo()])
    }

    pub fn cells(&self) -> Vec<LatticeVector> {
        (0..self.n_cells()).map(|i| self.cell(i)).collect()
    }

    pub fn index(&self, c: LatticeVector) -> Option<usize> {
        let s = self.side() as i64;
        let a = c.0[0] - self.lo();
        let b = c.0[1] - self.lo();
        ((0..s).contains(&a) && (0..s).contains(&b)).then(|| (a * s + b) as usize)
    }

    pub fn period(&self) -> Option<usize> {
        match *self {
            LatticeWindow::Torus { m } => Some(m),
            LatticeWindow::Open { .. } => None,
        }
    }

    /// Pairs (α, β) whose separation, reduced by a torus image M·m when
    /// periodic, has sup-norm ≤ r. Yields (i, j, α-β-M·m, m).
    pub fn pairs(&self, r: usize) -> Vec<(usize, usize, LatticeVector, LatticeVector)> {
        let r = r as i64;
        let mut out = Vec::new();
        let n = self.n_cells();
        for i in 0..n {
            let a = self.cell(i);
            for j in 0..n {
                let b = self.cell(j);
                let d = a.sub(b);
                match *self {
                    LatticeWindow::Open { .. } => {
                        if d.sup_norm() <= r {
                            out.push((i, j, d, LatticeVector::ZERO));
                        }
                    }
                    LatticeWindow::Torus { m } => {
                        let m = m as i64;
                        for m1 in -1..=1 {
                            for m2 in -1..=1 {
                                let img = LatticeVector([m1, m2]);
                                let dd = d.sub(img.scale(m));
                                if dd.sup_norm() <= r {
                                    out.push((i, j, dd, img));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Cells at least `depth` away from the edge; every cell of a torus.
    pub fn interior(&self, depth: usize) -> Vec<bool> {
        (0..self.n_cells())
            .map(|i| match *self {
                LatticeWindow::Torus { .. } => true,
                LatticeWindow::Open { l } => self.cell(i).sup_norm() + depth as i64 <= l as i64,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairing_example() {
        assert!((pairing(DualVector([1.0, 0.0]), [1.0, 0.0]) - 2.0 * PI).abs() < 1e-15);
        assert!((pairing(DualVector([0.25, 0.0]), [1.0, 0.0]) - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn wrap_examples() {
        let (n, t) = wrap_and_split([0.75, -0.25]);
        assert_eq!(n.0, [1.0, 0.0]);
        assert_eq!(t.coords(), [-0.25, -0.25]);
        let (n, t) = wrap_and_split([-0.5, 0.5]);
        assert_eq!(n.0, [0.0, 1.0]);
        assert_eq!(t.coords(), [-0.5, -0.5]);
    }

    #[test]
    fn character_example() {
        let c = character(TorusPoint::new([0.25, 0.0]).unwrap(), LatticeVector([1, 0]));
        assert!((c - c64::new(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn fourier_of_constant() {
        let g = BrillouinGrid::new(4).unwrap();
        let s = vec![c64::new(1.0, 0.0); 16];
        assert!((torus_fourier(&g, &s, LatticeVector::ZERO).unwrap() - 1.0).norm() < 1e-14);
        assert!(torus_fourier(&g, &s, LatticeVector([1, 0])).unwrap().norm() < 1e-14);
        let e: Vec<c64> = g.nodes().map(|t| character(t, LatticeVector([1, 0]))).collect();
        assert!((torus_fourier(&g, &e, LatticeVector([1, 0])).unwrap() - 1.0).norm() < 1e-14);
    }

    #[test]
    fn odd_grid_rejected() {
        assert!(BrillouinGrid::new(5).is_err());
    }
}
