mod common;

use common::{harper_oracle, random_sequence};
use faer::{c64, Mat};
use peierls_core::effective::{
    assemble_fluctuation, assemble_peierls, bulk_edges, butterfly, covariance_extract, harper_hopping, twisted_product,
    window_spectrum, MagneticMatrix,
};
use peierls_core::frame::{flat_quantization, HoppingSequence};
use peierls_core::geometry::{FieldMode, GaugeField, MagneticFieldSpec};
use peierls_core::lattice::{LatticeVector, LatticeWindow};
use peierls_core::linalg;
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::f64::consts::PI;

fn delta_at(g: [i64; 2]) -> HoppingSequence {
    let mut entries = BTreeMap::new();
    entries.insert(LatticeVector(g), Mat::from_fn(1, 1, |_, _| c64::new(1.0, 0.0)));
    HoppingSequence {
        n: 1,
        radius: 1,
        entries,
        tail: 0.0,
        decay_exponent: f64::INFINITY,
    }
}

fn interior_blocks(window: LatticeWindow, depth: usize) -> Vec<usize> {
    let inner = window.interior(depth);
    (0..window.n_cells()).filter(|&i| inner[i]).collect()
}

fn interior_residual(a: &MagneticMatrix, b: &Mat<c64>, depth: usize) -> f64 {
    let n = a.n;
    let idx = interior_blocks(a.window, depth);
    let mut d = 0.0f64;
    for &i in &idx {
        for &j in &idx {
            for p in 0..n {
                for q in 0..n {
                    d = d.max((a.matrix[(i * n + p, j * n + q)] - b[(i * n + p, j * n + q)]).norm());
                }
            }
        }
    }
    d
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn twisted_product_is_the_matrix_product(seed in any::<u64>(), eb in -1.5f64..1.5, n in 1usize..3) {
        let s = random_sequence(n, 1, seed, false);
        let t = random_sequence(n, 1, seed ^ 7, false);
        let window = LatticeWindow::Open { l: 5 };
        let spec = MagneticFieldSpec::constant(1.0, eb);
        let ms = assemble_peierls(&s, &spec, window).unwrap();
        let mt = assemble_peierls(&t, &spec, window).unwrap();
        let st = assemble_peierls(&twisted_product(&s, &t, eb).unwrap(), &spec, window).unwrap();
        let prod = &ms.matrix * &mt.matrix;
        // blocks at least r_S + r_T from the edge see every intermediate cell
        prop_assert!(interior_residual(&st, &prod, 2) <= 1e-10);
    }
}

#[test]
fn twisted_product_unit_and_noncommutativity() {
    let eb = 0.4;
    let t = random_sequence(2, 1, 3, false);
    let mut unit = HoppingSequence::zero(2);
    unit.entries.insert(LatticeVector::ZERO, linalg::identity(2));
    let ut = twisted_product(&unit, &t, eb).unwrap();
    assert!(ut.distance(&t) < 1e-15);

    let (s, t) = (delta_at([1, 0]), delta_at([0, 1]));
    let st = twisted_product(&s, &t, eb).unwrap();
    let ts = twisted_product(&t, &s, eb).unwrap();
    let g = LatticeVector([1, 1]);
    assert!((st.get(g).unwrap()[(0, 0)] - linalg::cis(-eb / 2.0)).norm() < 1e-15);
    assert!((ts.get(g).unwrap()[(0, 0)] - linalg::cis(eb / 2.0)).norm() < 1e-15);
}

#[test]
fn peierls_assembly_basics() {
    let hop = random_sequence(2, 2, 11, true);
    let window = LatticeWindow::Open { l: 4 };
    let zero = assemble_peierls(&hop, &MagneticFieldSpec::constant(0.0, 1.0), window).unwrap();
    let flat = flat_quantization(&hop, window).unwrap();
    assert!(linalg::max_abs((&zero.matrix - &flat).as_ref()) < 1e-15);

    let spec = MagneticFieldSpec::constant(0.3, 1.0);
    let m = assemble_peierls(&hop, &spec, window).unwrap();
    assert!(linalg::max_abs((&m.matrix - m.matrix.adjoint()).as_ref()) < 1e-12);
    for i in 0..window.n_cells() {
        assert!(linalg::max_abs((m.block(i, i) - hop.get(LatticeVector::ZERO).unwrap()).as_ref()) < 1e-15);
    }
    // diagonal-only sequence: block diagonal
    let mut diag = HoppingSequence::zero(2);
    diag.entries.insert(LatticeVector::ZERO, hop.get(LatticeVector::ZERO).unwrap().clone());
    let d = assemble_peierls(&diag, &spec, window).unwrap();
    let n = window.n_cells();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                assert_eq!(linalg::max_abs(d.block(i, j).as_ref()), 0.0);
            }
        }
    }
    // block-diagonal spectrum is the union of block spectra
    let pts = window_spectrum(&d, 0).unwrap();
    let blk = linalg::eigvalsh(hop.get(LatticeVector::ZERO).unwrap().as_ref()).unwrap();
    for p in pts {
        assert!(blk.iter().any(|b| (b - p.value).abs() < 1e-12));
    }
}

#[test]
fn fluctuation_assembly_reduces_to_constant_field() {
    let hop = random_sequence(1, 1, 5, true);
    let window = LatticeWindow::Open { l: 3 };
    let spec = MagneticFieldSpec::constant(0.2, 1.3);
    let a = assemble_peierls(&hop, &spec, window).unwrap();
    let b = assemble_fluctuation(&hop, &spec, window).unwrap();
    assert!(linalg::max_abs((&a.matrix - &b.matrix).as_ref()) < 1e-14);
    let mut wavy = spec.clone();
    wavy.fluctuation_c = 0.5;
    wavy.modes = vec![
        FieldMode { k: [1.0, 0.0], re: 1.0, im: 0.0 },
        FieldMode { k: [-1.0, 0.0], re: 1.0, im: 0.0 },
    ];
    let c = assemble_fluctuation(&hop, &wavy, window).unwrap();
    assert!(linalg::max_abs((&c.matrix - c.matrix.adjoint()).as_ref()) < 1e-12);
}

#[test]
fn torus_assembly_rejects_wrapping_radius() {
    let hop = random_sequence(1, 2, 1, true);
    let spec = MagneticFieldSpec::constant(0.0, 1.0);
    assert!(assemble_peierls(&hop, &spec, LatticeWindow::Torus { m: 4 }).is_err());
    assert!(assemble_peierls(&hop, &spec, LatticeWindow::Torus { m: 6 }).is_ok());
}

#[test]
fn covariant_extraction_inverts_assembly() {
    let hop = random_sequence(2, 1, 8, true);
    for window in [LatticeWindow::Open { l: 3 }, LatticeWindow::Torus { m: 6 }] {
        // torus flux must be quantized: εb·36 = 2π
        let spec = MagneticFieldSpec::constant(1.0, 2.0 * PI / 36.0);
        let m = assemble_peierls(&hop, &spec, window).unwrap();
        let ex = covariance_extract(&m, &spec.constant_gauge(), 1).unwrap();
        assert!(ex.residual <= 1e-12, "{:?}: {}", window, ex.residual);
        assert!(ex.hopping.distance(&hop) <= 1e-12);
    }
}

#[test]
fn harper_half_flux_edges() {
    let oracle = harper_oracle(1, 2, 64);
    assert!((oracle[1].1 - 2.0 * 2f64.sqrt()).abs() < 1e-9);
    let pts = butterfly(&harper_hopping(), &[0.5], 16).unwrap();
    let (lo, hi) = bulk_edges(&pts).unwrap();
    assert!((lo + 2.0 * 2f64.sqrt()).abs() <= 0.05, "{lo}");
    assert!((hi - 2.0 * 2f64.sqrt()).abs() <= 0.05, "{hi}");
}

#[test]
fn harper_third_flux_edges() {
    let oracle = harper_oracle(1, 3, 96);
    let pts = butterfly(&harper_hopping(), &[1.0 / 3.0], 16).unwrap();
    let (lo, hi) = bulk_edges(&pts).unwrap();
    assert!((lo - oracle[0].0).abs() <= 0.05, "{lo} vs {}", oracle[0].0);
    assert!((hi - oracle[2].1).abs() <= 0.05, "{hi} vs {}", oracle[2].1);
    let bulk: Vec<f64> = pts.iter().filter(|p| p.interior_weight >= 0.9).map(|p| p.eigenvalue).collect();
    for &(a, b) in &oracle {
        for e in [a, b] {
            assert!(bulk.iter().any(|x| (x - e).abs() <= 0.05), "no bulk level near oracle edge {e}");
        }
    }
}

#[test]
fn butterfly_rows_and_zero_flux() {
    let pts = butterfly(&harper_hopping(), &[0.0, 0.25], 3).unwrap();
    assert_eq!(pts.len(), 2 * 49);
    // zero flux: the open square's spectrum lies in [-4, 4]
    assert!(pts.iter().filter(|p| p.flux == 0.0).all(|p| p.eigenvalue.abs() < 4.0));
    assert!(butterfly(&harper_hopping(), &[f64::NAN], 3).is_err());
}

#[test]
fn constant_phase_matches_line_phase_for_lattice_points() {
    let g = GaugeField::constant(0.77);
    for (a, b) in [([1.0, 0.0], [0.0, 2.0]), ([-3.0, 1.0], [2.0, 2.0])] {
        assert!((g.constant_phase(a, b) - g.line_phase(a, b)).norm() < 1e-14);
    }
}
