mod common;

use common::{free_model, gapped_model, lowest_family};
use faer::{c64, Mat};
use peierls_core::bloch::{self, Backend, BandStructure, IsolatedFamily};
use peierls_core::frame::{
    self, build_fiber_frame, fiber_parseval_defect, frame_analysis, frame_bounds, frame_synthesis, hopping_from_bands,
    synthesize_wannier, tighten_frame, FiberFrame,
};
use peierls_core::lattice::{character, wrap_and_split, BrillouinGrid, LatticeVector, LatticeWindow};
use peierls_core::linalg::{self, ZERO};
use peierls_core::Error;
use proptest::prelude::*;
use std::f64::consts::PI;

fn setup() -> (BandStructure, IsolatedFamily, FiberFrame) {
    let (bands, family) = lowest_family(&gapped_model(Backend::Grid { ns: 6 }), 8, 3);
    let f = frame::build_fiber_frame_auto(&bands, &family, 1).unwrap();
    (bands, family, f)
}

/// Samples of P f for the band range, through the Bloch-Floquet transform.
fn project(bands: &BandStructure, f: &[c64], k_range: (usize, usize)) -> Vec<c64> {
    let ns = 6;
    let u = bloch::bloch_floquet_transform(f, &bands.grid, ns, false).unwrap();
    let pu: Vec<Vec<c64>> = u
        .iter()
        .enumerate()
        .map(|(t, v)| {
            let p = bloch::eigenprojection(bands, t, k_range.0, k_range.1).unwrap();
            linalg::col((p * linalg::column_matrix(v)).as_ref(), 0)
        })
        .collect();
    bloch::inverse_bloch_floquet_transform(&pu, &bands.grid, ns, false).unwrap()
}

#[test]
fn fiber_parseval_at_every_node() {
    let (bands, family, f) = setup();
    assert!(fiber_parseval_defect(&bands, &family, &f).unwrap() <= 1e-10);
    assert_eq!(f.n_b, 1);
}

#[test]
fn rank_one_frame_is_the_normalized_projection() {
    let (bands, family, _) = setup();
    let v = linalg::random_unit_vector(36, 5);
    let f = build_fiber_frame(&bands, &family, linalg::column_matrix(&v).as_ref()).unwrap();
    for t in 0..bands.grid.len() {
        let p = bloch::eigenprojection(&bands, t, 1, 1).unwrap();
        let pv = linalg::col((p * linalg::column_matrix(&v)).as_ref(), 0);
        let n = linalg::norm(&pv);
        for r in 0..36 {
            assert!((f.sections[t][(r, 0)] - pv[r] / n).norm() < 1e-12);
        }
    }
    let dup = Mat::from_fn(36, 2, |r, _| v[r]);
    let f2 = build_fiber_frame(&bands, &family, dup.as_ref()).unwrap();
    assert!(fiber_parseval_defect(&bands, &family, &f2).unwrap() < 1e-12);
    for t in 0..bands.grid.len() {
        for r in 0..36 {
            let want = f.sections[t][(r, 0)] / 2f64.sqrt();
            assert!((f2.sections[t][(r, 0)] - want).norm() < 1e-12);
            assert!((f2.sections[t][(r, 1)] - want).norm() < 1e-12);
        }
    }
}

#[test]
fn random_trials_for_a_two_band_family() {
    let (bands, _) = lowest_family(&gapped_model(Backend::Grid { ns: 6 }), 8, 5);
    let family = bloch::detect_isolated_family(&bands, 2, 1).or_else(|_| bloch::detect_isolated_family(&bands, 1, 1));
    let family = match family {
        Ok(f) => f,
        Err(e) => panic!("no isolated two-band family: {e}"),
    };
    let trials = linalg::random_matrix(36, 3, 77);
    let f = build_fiber_frame(&bands, &family, trials.as_ref()).unwrap();
    assert!(fiber_parseval_defect(&bands, &family, &f).unwrap() <= 1e-10);
}

#[test]
fn too_few_trials_are_rejected() {
    let (bands, _) = lowest_family(&gapped_model(Backend::Grid { ns: 6 }), 8, 5);
    if let Ok(family) = bloch::detect_isolated_family(&bands, 2, 1) {
        let trials = linalg::random_matrix(36, 1, 3);
        assert!(matches!(build_fiber_frame(&bands, &family, trials.as_ref()), Err(Error::InvalidInput(_))));
    }
}

#[test]
fn wannier_plancherel_and_translation() {
    let (bands, _, f) = setup();
    let w = synthesize_wannier(&f, &bands, None).unwrap();
    let fiber: f64 = f.sections.iter().map(|s| (0..36).map(|r| s[(r, 0)].norm_sqr()).sum::<f64>()).sum::<f64>()
        * bands.grid.weight();
    assert!((w.norm_sqr(0) - fiber).abs() < 1e-12);
    assert!((w.norm_sqr(0) - 1.0).abs() < 1e-10);

    // multiplying the sections by e^{i<θ,α>} shifts ψ by -α
    let alpha = LatticeVector([1, 0]);
    let mut g = f.clone();
    for (t, s) in g.sections.iter_mut().enumerate() {
        let ph = character(bands.grid.node(t), alpha).conj();
        *s = &*s * faer::Scale(ph);
    }
    let ws = synthesize_wannier(&g, &bands, None).unwrap();
    let m = 8i64;
    for c in w.window.cells() {
        let shifted = LatticeVector([(c.0[0] + alpha.0[0] + m / 2).rem_euclid(m) - m / 2, (c.0[1] + alpha.0[1] + m / 2).rem_euclid(m) - m / 2]);
        for s in 0..36 {
            assert!((ws.value(0, c, s) - w.value(0, shifted, s)).norm() < 1e-12);
        }
    }
}

#[test]
fn wannier_functions_decay() {
    let (bands, _, f) = setup();
    let w = synthesize_wannier(&f, &bands, Some(3)).unwrap();
    let p = &w.decay_profile;
    assert!(p.windows(2).all(|s| s[1] < s[0]), "{p:?}");
    assert!(p[3] < 1e-3 * p[0]);
    assert!(synthesize_wannier(&f, &bands, Some(1)).is_err());
    assert!(synthesize_wannier(&f, &bands, Some(4)).is_err());
}

#[test]
fn analysis_reproduces_the_subspace() {
    let (bands, _, f) = setup();
    let w = synthesize_wannier(&f, &bands, None).unwrap();
    let m = 8;
    // f = ψ_0 in the transform layout
    let mut psi = vec![ZERO; m * m * 36];
    for c in 0..m * m {
        let cell = bloch::cell_of(m, c);
        for s in 0..36 {
            psi[c * 36 + s] = w.value(0, cell, s);
        }
    }
    let coords = frame_analysis(&psi, &w, m).unwrap();
    let back = frame_synthesis(&coords, &w).unwrap();
    let err = back.iter().zip(&psi).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(err < 1e-10);

    // Parseval on random elements of ran P_B
    for seed in 0..5 {
        let r = linalg::random_unit_vector(m * m * 36, seed);
        let pf = project(&bands, &r, (1, 1));
        let coords = frame_analysis(&r, &w, m).unwrap();
        let norm2: f64 = pf.iter().map(|x| x.norm_sqr()).sum();
        assert!((coords.norm_sqr() - norm2).abs() < 1e-10 * norm2.max(1e-3), "{} {}", coords.norm_sqr(), norm2);
    }

    // a vector built from the next band has vanishing coordinates
    let r = linalg::random_unit_vector(m * m * 36, 99);
    let other = project(&bands, &r, (2, 2));
    let coords = frame_analysis(&other, &w, m).unwrap();
    assert!(coords.norm_sqr().sqrt() <= 1e-8);
}

#[test]
fn tightening_examples() {
    let dup = Mat::from_fn(2, 2, |r, _| if r == 0 { c64::new(1.0, 0.0) } else { ZERO });
    let t = tighten_frame(dup.as_ref(), 1e-12).unwrap();
    for c in 0..2 {
        assert!((t.vectors[(0, c)] - c64::new(0.5f64.sqrt(), 0.0)).norm() < 1e-14);
        assert!(t.vectors[(1, c)].norm() < 1e-14);
    }
    let g = t.vectors.adjoint() * &t.vectors;
    assert!(linalg::max_abs((&g * &g - &g).as_ref()) < 1e-14);
    assert_eq!(t.rank, 1);

    let q = linalg::orthonormalize(linalg::random_matrix(5, 3, 2).as_ref());
    let t = tighten_frame(q.as_ref(), 1e-12).unwrap();
    assert!(linalg::max_abs((&t.vectors - &q).as_ref()) < 1e-13);

    assert_eq!(frame_bounds(linalg::identity(3).as_ref(), 1e-12).unwrap(), (1.0, 1.0));
    let e1e1 = Mat::from_fn(2, 2, |r, _| if r == 0 { c64::new(1.0, 0.0) } else { ZERO });
    let (a, b) = frame_bounds(e1e1.as_ref(), 1e-12).unwrap();
    assert!((a - 2.0).abs() < 1e-14 && (b - 2.0).abs() < 1e-14);
    assert!(tighten_frame(Mat::<c64>::zeros(2, 2).as_ref(), 1e-12).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tightened_frames_are_parseval(seed in any::<u64>(), dim in 2usize..6, extra in 0usize..4) {
        let v = linalg::random_matrix(dim, dim + extra, seed);
        let t = tighten_frame(v.as_ref(), 1e-12).unwrap();
        let g = t.vectors.adjoint() * &t.vectors;
        prop_assert!(linalg::max_abs((&g * &g - &g).as_ref()) <= 1e-12);
        let tr: f64 = (0..g.nrows()).map(|i| g[(i, i)].re).sum();
        prop_assert!((tr - dim as f64).abs() <= 1e-10);
        let (a, b) = frame_bounds(t.vectors.as_ref(), 1e-10).unwrap();
        prop_assert!((a - 1.0).abs() <= 1e-12 && (b - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn hopping_symmetries() {
    let (bands, family, f) = setup();
    let hop = hopping_from_bands(&bands, &family, &f, Some(3)).unwrap();
    assert!(hop.hermiticity_defect() < 1e-13);
    let mean: f64 = bands.band(1).iter().sum::<f64>() * bands.grid.weight();
    assert!((hop.get(LatticeVector::ZERO).unwrap()[(0, 0)].re - mean).abs() < 1e-10);
    assert!(hopping_from_bands(&bands, &family, &f, Some(4)).is_err());
    let auto = hopping_from_bands(&bands, &family, &f, None).unwrap();
    assert!(auto.radius <= 3);
}

#[test]
fn flat_quantization_structure() {
    let (bands, family, f) = setup();
    let hop = hopping_from_bands(&bands, &family, &f, Some(2)).unwrap();
    let window = LatticeWindow::Open { l: 4 };
    let t = frame::flat_quantization(&hop, window).unwrap();
    assert!(linalg::max_abs((&t - t.adjoint()).as_ref()) < 1e-13);
    let mut diag = frame::HoppingSequence::zero(1);
    diag.entries.insert(LatticeVector::ZERO, hop.get(LatticeVector::ZERO).unwrap().clone());
    let d = frame::flat_quantization(&diag, window).unwrap();
    for i in 0..d.nrows() {
        for j in 0..d.ncols() {
            if i != j {
                assert_eq!(d[(i, j)], ZERO);
            }
        }
    }
    // spectrum sits inside the symbol range up to the truncation error
    let vals = linalg::eigvalsh(t.as_ref()).unwrap();
    let band = bands.band(1);
    let (lo, hi) = band.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let slack = 0.02 + 25.0 * hop.tail;
    assert!(vals.iter().all(|&x| x > lo - slack && x < hi + slack), "{vals:?} vs [{lo}, {hi}]");
    assert!(frame::flat_quantization(&hop, LatticeWindow::Open { l: 1 }).is_err());
}

#[test]
fn free_bands_are_explicit() {
    let k = 2usize;
    let model = free_model(Backend::PlaneWave { cutoff: k });
    let grid = BrillouinGrid::new(4).unwrap();
    let bands = bloch::compute_bands(&model, &grid, 6).unwrap();
    for (t, vals) in bands.eigenvalues.iter().enumerate() {
        let th = grid.node(t).coords();
        let mut want: Vec<f64> = (-(k as i64)..=k as i64)
            .flat_map(|a| (-(k as i64)..=k as i64).map(move |b| (a, b)))
            .map(|(a, b)| (2.0 * PI).powi(2) * ((th[0] + a as f64).powi(2) + (th[1] + b as f64).powi(2)))
            .collect();
        want.sort_by(f64::total_cmp);
        for (x, y) in vals.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }
    let origin = &bands.eigenvalues[grid.origin_index()];
    assert!(origin[0].abs() < 1e-12);
    for v in &origin[1..5] {
        assert!((v - (2.0 * PI).powi(2)).abs() < 1e-9);
    }
}

#[test]
fn free_lowest_band_is_not_isolated() {
    let model = free_model(Backend::Grid { ns: 6 });
    let grid = BrillouinGrid::new(8).unwrap();
    let bands = bloch::compute_bands(&model, &grid, 4).unwrap();
    assert!(matches!(bloch::detect_isolated_family(&bands, 1, 0), Err(Error::NotIsolated(_))));
    assert!(matches!(bloch::detect_isolated_family(&bands, 1, 3), Err(Error::InvalidInput(_))));
}

#[test]
fn time_reversal_and_backend_agreement() {
    let model = gapped_model(Backend::PlaneWave { cutoff: 6 });
    let mut real = model.clone();
    real.background_field.clear();
    let grid = BrillouinGrid::new(4).unwrap();
    let bands = bloch::compute_bands(&real, &grid, 4).unwrap();
    for t in 0..grid.len() {
        let th = grid.node(t).coords();
        let m = wrap_and_split([-th[0], -th[1]]).1;
        let f = bloch::assemble_fiber(&real, m).unwrap();
        let vals = linalg::eigvalsh(f.matrix.as_ref()).unwrap();
        for k in 0..4 {
            assert!((vals[k] - bands.eigenvalues[t][k]).abs() < 1e-9);
        }
    }
    // weak potential: grid and plane waves agree on the low bands
    let weak = |b| {
        let mut m = common::free_model(b);
        m.potential = vec![common::mode([1, 0], 1.0), common::mode([-1, 0], 1.0), common::mode([0, 1], 1.0), common::mode([0, -1], 1.0)];
        m
    };
    let g2 = BrillouinGrid::new(2).unwrap();
    let pw = bloch::compute_bands(&weak(Backend::PlaneWave { cutoff: 4 }), &g2, 4).unwrap();
    let gr = bloch::compute_bands(&weak(Backend::Grid { ns: 40 }), &g2, 4).unwrap();
    let rel = pw.eigenvalues[0][0] - gr.eigenvalues[0][0];
    // the five-point Laplacian converges at O(h²)
    assert!(rel.abs() < 0.05 * (2.0 * PI).powi(2), "{rel}");
}

#[test]
fn band_transform_roundtrip_and_parseval() {
    let grid = BrillouinGrid::new(4).unwrap();
    let ns = 3;
    let f = linalg::random_unit_vector(16 * 9, 8);
    for zak in [false, true] {
        let u = bloch::bloch_floquet_transform(&f, &grid, ns, zak).unwrap();
        assert!((bloch::fiber_norm(&u, &grid) - 1.0).abs() < 1e-12);
        let back = bloch::inverse_bloch_floquet_transform(&u, &grid, ns, zak).unwrap();
        assert!(back.iter().zip(&f).all(|(a, b)| (a - b).norm() < 1e-12));
    }
    // one-cell support at γ = 0 gives the same fiber at every θ
    let mut g = vec![ZERO; 16 * 9];
    let c0 = (0..16).find(|&c| bloch::cell_of(4, c) == LatticeVector::ZERO).unwrap();
    for s in 0..9 {
        g[c0 * 9 + s] = c64::new(s as f64, 1.0);
    }
    let u = bloch::bloch_floquet_transform(&g, &grid, ns, false).unwrap();
    for v in &u {
        assert!(v.iter().enumerate().all(|(s, x)| (x - c64::new(s as f64, 1.0)).norm() < 1e-14));
    }
}

#[test]
fn three_block_decomposition_is_consistent() {
    let (bands, _) = lowest_family(&gapped_model(Backend::Grid { ns: 6 }), 4, 4);
    let family = bloch::detect_isolated_family(&bands, 2, 0).or_else(|_| bloch::detect_isolated_family(&bands, 1, 0)).unwrap();
    for t in 0..bands.grid.len() {
        let b = bloch::three_block_decomposition(&bands, &family, t).unwrap();
        assert!(linalg::max_abs((&b.p0 * &b.pb).as_ref()) < 1e-12);
        let full = bloch::assemble_fiber(&bands.model, bands.grid.node(t)).unwrap().matrix;
        let sum = &b.h0 + &b.hb + &b.hinf;
        assert!(linalg::max_abs((&sum - &full).as_ref()) < 1e-10);
        let hb = linalg::eigvalsh(b.hb.as_ref()).unwrap();
        for v in hb.into_iter().filter(|v| v.abs() > 1e-9) {
            assert!(v >= family.e_prime_minus - 1e-9 && v <= family.e_prime_plus + 1e-9);
        }
    }
}
