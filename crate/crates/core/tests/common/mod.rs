#![allow(dead_code)]

use peierls_core::bloch::{self, Backend, BandStructure, IsolatedFamily, Mode, PeriodicModel};
use faer::{c64, Mat};
use peierls_core::frame::HoppingSequence;
use peierls_core::lattice::{BrillouinGrid, LatticeVector};
use peierls_core::linalg::{self, ZERO};
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub fn mode(k: [i64; 2], re: f64) -> Mode {
    Mode { k, re, im: 0.0 }
}

/// 50(cos 2πx₁ + cos 2πx₂) with background field 8cos 2πx₁.
pub fn gapped_model(backend: Backend) -> PeriodicModel {
    PeriodicModel {
        potential: vec![mode([1, 0], 25.0), mode([-1, 0], 25.0), mode([0, 1], 25.0), mode([0, -1], 25.0)],
        background_field: vec![mode([1, 0], 4.0), mode([-1, 0], 4.0)],
        backend,
        energy_shift: 0.0,
    }
}

pub fn free_model(backend: Backend) -> PeriodicModel {
    PeriodicModel {
        potential: Vec::new(),
        background_field: Vec::new(),
        backend,
        energy_shift: 0.0,
    }
}

/// Bands of `model` shifted to min λ₁ = 1, with the lowest band as family.
pub fn lowest_family(model: &PeriodicModel, m: usize, n_bands: usize) -> (BandStructure, IsolatedFamily) {
    let grid = BrillouinGrid::new(m).unwrap();
    let shifted = bloch::normalize_energy_shift(model, &grid, 1.0).unwrap();
    let bands = bloch::compute_bands(&shifted, &grid, n_bands).unwrap();
    let family = bloch::detect_isolated_family(&bands, 1, 0).unwrap();
    (bands, family)
}

pub fn random_sequence(n: usize, r: i64, seed: u64, hermitian: bool) -> HoppingSequence {
    let mut entries = BTreeMap::new();
    let mut k = 0;
    for a in -r..=r {
        for b in -r..=r {
            k += 1;
            entries.insert(LatticeVector([a, b]), linalg::random_matrix(n, n, seed.wrapping_mul(31).wrapping_add(k)));
        }
    }
    if hermitian {
        let keys: Vec<LatticeVector> = entries.keys().copied().collect();
        for g in keys {
            if g > g.neg() {
                let adj = entries[&g].adjoint().to_owned();
                entries.insert(g.neg(), adj);
            } else if g == LatticeVector::ZERO {
                let h = linalg::hermitian_part(entries[&g].as_ref());
                entries.insert(g, h);
            }
        }
    }
    HoppingSequence {
        n,
        radius: r as usize,
        entries,
        tail: 0.0,
        decay_exponent: f64::INFINITY,
    }
}

/// Band edges of the Harper model at flux p/q from the q×q Bloch matrix.
pub fn harper_oracle(p: i64, q: usize, samples: usize) -> Vec<(f64, f64)> {
    let phi = p as f64 / q as f64;
    let mut bands = vec![(f64::INFINITY, f64::NEG_INFINITY); q];
    for i in 0..samples {
        for j in 0..samples {
            let kx = 2.0 * PI * i as f64 / samples as f64;
            let ky = 2.0 * PI * j as f64 / samples as f64;
            let h = Mat::from_fn(q, q, |a, b| {
                let mut v = ZERO;
                if a == b {
                    v += c64::new(2.0 * (ky + 2.0 * PI * phi * a as f64).cos(), 0.0);
                }
                if (a + 1) % q == b {
                    v += if a + 1 == q { linalg::cis(-kx) } else { c64::new(1.0, 0.0) };
                }
                if (b + 1) % q == a {
                    v += if b + 1 == q { linalg::cis(kx) } else { c64::new(1.0, 0.0) };
                }
                v
            });
            let vals = linalg::eigvalsh(h.as_ref()).unwrap();
            for (k, v) in vals.into_iter().enumerate() {
                bands[k].0 = bands[k].0.min(v);
                bands[k].1 = bands[k].1.max(v);
            }
        }
    }
    bands
}
