use faer::{c64, Mat};
use ode_solvers::{DVector, Dop853, System};
use peierls_core::linalg::{self, CsrMatrix, ZERO};
use peierls_core::reference::{
    cutoff, evolved_derivatives, finite_difference, loglog_slope, propagate, propagate_dense, quasi_analytic_extension,
    schur_resolvent, schur_singularities, spectral_distance, split_projection, EvolutionRecord,
};
use peierls_core::Error;
use proptest::prelude::*;

fn random_hermitian(n: usize, seed: u64) -> Mat<c64> {
    linalg::hermitian_part(linalg::random_matrix(n, n, seed).as_ref())
}

fn random_projection(n: usize, rank: usize, seed: u64) -> Mat<c64> {
    let q = linalg::orthonormalize(linalg::random_matrix(n, rank, seed).as_ref());
    &q * q.adjoint()
}

fn shifted(h: &Mat<c64>, lambda: c64) -> Mat<c64> {
    Mat::from_fn(h.nrows(), h.ncols(), |i, j| h[(i, j)] - if i == j { lambda } else { ZERO })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn schur_block_inverse_is_the_resolvent(seed in any::<u64>(), n in 3usize..10, r in 1usize..9, re in -3.0f64..3.0, im in 0.05f64..2.0) {
        let rank = r.min(n - 1);
        let h = random_hermitian(n, seed);
        let pi = random_projection(n, rank, seed ^ 0x5eed);
        let lambda = c64::new(re, im);
        let blocks = schur_resolvent(h.as_ref(), pi.as_ref(), lambda).unwrap();
        let direct = linalg::inverse(shifted(&h, lambda).as_ref());
        let scale = linalg::max_abs(direct.as_ref()).max(1.0);
        prop_assert!(linalg::max_abs((&blocks.inverse - &direct).as_ref()) <= 1e-12 * scale);
        let id = &blocks.inverse * shifted(&h, lambda);
        prop_assert!(linalg::max_abs((id - linalg::identity(n)).as_ref()) <= 1e-10);
    }
}

#[test]
fn block_diagonal_operator_decouples() {
    let n = 6;
    let pi = random_projection(n, 3, 4);
    let a = random_hermitian(n, 5);
    let perp = linalg::identity(n) - &pi;
    let h = &pi * &a * &pi + &perp * &a * &perp;
    let lambda = c64::new(0.3, 0.7);
    let b = schur_resolvent(h.as_ref(), pi.as_ref(), lambda).unwrap();
    let off = &pi * &b.inverse * &perp;
    assert!(linalg::max_abs(off.as_ref()) < 1e-12);
    // R̃ is (ΠHΠ - λ)^{-1} on ran Π
    let (u, _) = split_projection(pi.as_ref()).unwrap();
    let huu = u.adjoint() * &h * &u;
    let rt = &u * linalg::inverse(shifted(&huu, lambda).as_ref()) * u.adjoint();
    assert!(linalg::max_abs((&b.r_tilde - &rt).as_ref()) < 1e-12);
}

#[test]
fn random_six_dim_rank_three_at_i() {
    let h = random_hermitian(6, 12);
    let pi = random_projection(6, 3, 13);
    let b = schur_resolvent(h.as_ref(), pi.as_ref(), c64::new(0.0, 1.0)).unwrap();
    let direct = linalg::inverse(shifted(&h, c64::new(0.0, 1.0)).as_ref());
    assert!(linalg::max_abs((&b.inverse - &direct).as_ref()) <= 1e-12);
}

#[test]
fn perpendicular_spectrum_point_is_rejected() {
    let h = random_hermitian(6, 21);
    let pi = random_projection(6, 2, 22);
    let (_, v) = split_projection(pi.as_ref()).unwrap();
    let hvv = linalg::hermitian_part((v.adjoint() * &h * &v).as_ref());
    let mu = linalg::eigvalsh(hvv.as_ref()).unwrap()[1];
    match schur_resolvent(h.as_ref(), pi.as_ref(), c64::new(mu, 0.0)) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("not invertible"), "{msg}"),
        other => panic!("expected a numerical error, got {other:?}"),
    }
}

#[test]
fn non_projection_is_rejected() {
    let a = random_hermitian(4, 1);
    assert!(split_projection(a.as_ref()).is_err());
}

#[test]
fn schur_singularities_are_the_spectrum() {
    for seed in 0..10u64 {
        let n = 10;
        let h = random_hermitian(n, 100 + seed);
        let pi = random_projection(n, 4, 200 + seed);
        let (lo, hi) = (-1.0, 1.0);
        let (_, v) = split_projection(pi.as_ref()).unwrap();
        let perp = linalg::eigvalsh(linalg::hermitian_part((v.adjoint() * &h * &v).as_ref()).as_ref()).unwrap();
        let spec: Vec<f64> = linalg::eigvalsh(h.as_ref())
            .unwrap()
            .into_iter()
            .filter(|&x| x > lo && x < hi)
            // the equivalence holds away from σ(Π⊥HΠ⊥)
            .filter(|x| perp.iter().all(|mu| (mu - x).abs() > 1e-6))
            .collect();
        let found = schur_singularities(h.as_ref(), pi.as_ref(), lo, hi).unwrap();
        assert_eq!(found.len(), spec.len(), "seed {seed}: {found:?} vs {spec:?}");
        for (a, b) in found.iter().zip(&spec) {
            assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn spectral_distance_examples() {
    assert_eq!(spectral_distance(&[1.0, 2.0], &[1.0, 2.0], (0.0, 3.0)).value, 0.0);
    let d = spectral_distance(&[1.0, 2.0], &[1.1, 2.0], (0.0, 3.0));
    assert!((d.value - 0.1).abs() < 1e-14);
    assert!(!d.empty);
    let e = spectral_distance(&[5.0], &[6.0], (0.0, 3.0));
    assert!(e.empty);
    assert_eq!(e.value, 0.0);
    // only points inside J are measured, against the whole other spectrum
    let f = spectral_distance(&[1.0, 2.9], &[1.0, 3.05], (0.0, 3.0));
    assert!((f.value - 0.15).abs() < 1e-14);
}

proptest! {
    #[test]
    fn spectral_distance_is_symmetric(a in prop::collection::vec(-2.0f64..2.0, 1..8), b in prop::collection::vec(-2.0f64..2.0, 1..8)) {
        let j = (-1.0, 1.0);
        prop_assert_eq!(spectral_distance(&a, &b, j).value, spectral_distance(&b, &a, j).value);
        prop_assert_eq!(spectral_distance(&a, &a, j).value, 0.0);
    }
}

struct Schrodinger {
    h: Mat<c64>,
}

impl System<f64, DVector<f64>> for Schrodinger {
    // y = (Re ψ, Im ψ), i dψ/dt = Hψ
    fn system(&self, _t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let n = self.h.nrows();
        for i in 0..n {
            let mut acc = ZERO;
            for j in 0..n {
                acc += self.h[(i, j)] * c64::new(y[j], y[n + j]);
            }
            // dψ/dt = -i Hψ
            dy[i] = acc.im;
            dy[n + i] = -acc.re;
        }
    }
}

fn ode_oracle(h: &Mat<c64>, v: &[c64], t: f64) -> Vec<c64> {
    let n = v.len();
    let y0 = DVector::from_iterator(2 * n, v.iter().map(|z| z.re).chain(v.iter().map(|z| z.im)));
    // the output step also bounds the step size
    let mut solver = Dop853::new(Schrodinger { h: h.clone() }, 0.0, t, t / 512.0, y0, 1e-13, 1e-14);
    solver.integrate().unwrap();
    let y = solver.y_out().last().unwrap();
    (0..n).map(|i| c64::new(y[i], y[n + i])).collect()
}

#[test]
fn propagation_matches_integrator() {
    for seed in 0..4u64 {
        let h = random_hermitian(8, 300 + seed);
        let v = linalg::random_unit_vector(8, 400 + seed);
        for t in [0.3, 1.0, 2.5] {
            let a = propagate_dense(h.as_ref(), &v, t).unwrap();
            let b = ode_oracle(&h, &v, t);
            let err = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
            assert!(err <= 1e-9, "seed {seed} t {t}: {err:e}");
        }
    }
}

fn sparse_of(h: &Mat<c64>) -> CsrMatrix {
    let n = h.nrows();
    let mut t = Vec::new();
    for i in 0..n {
        for j in 0..n {
            t.push((i, j, h[(i, j)]));
        }
    }
    CsrMatrix::from_triplets(n, t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn propagation_is_unitary(seed in any::<u64>(), t in -5.0f64..5.0) {
        let h = random_hermitian(8, seed);
        let v = linalg::random_unit_vector(8, seed.wrapping_add(1));
        let w = propagate(&sparse_of(&h), &v, t).unwrap();
        prop_assert!((linalg::norm(&w) - 1.0).abs() <= 1e-10);
        let back = propagate(&sparse_of(&h), &w, -t).unwrap();
        let err = back.iter().zip(&v).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-10);
    }
}

#[test]
fn propagation_at_zero_time_is_identity() {
    let h = random_hermitian(5, 9);
    let v = linalg::random_unit_vector(5, 10);
    let w = propagate(&sparse_of(&h), &v, 0.0).unwrap();
    for (a, b) in w.iter().zip(&v) {
        assert!((a - b).norm() < 1e-14);
    }
}

#[test]
fn loglog_slope_of_power_law() {
    let x = [0.01, 0.02, 0.04, 0.08];
    let y: Vec<f64> = x.iter().map(|e: &f64| 3.0 * e.powi(2)).collect();
    assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    assert!(loglog_slope(&[0.0, 1.0], &[1.0, 1.0]).is_nan());
}

#[test]
fn evolution_record_slopes_skip_zero_field() {
    let times = vec![0.0, 1.0];
    let eps = vec![0.0, 0.02, 0.04];
    let errors = vec![vec![0.0, 1e-15], vec![0.0, 0.1], vec![0.0, 0.2]];
    let rec = EvolutionRecord::new(times, eps, errors).unwrap();
    assert!((rec.slope_at(1.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(rec.slope_at(0.0).unwrap().is_nan());
    assert!(EvolutionRecord::new(vec![0.0], vec![0.1], vec![vec![]]).is_err());
}

fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s * s)).exp()
    }
}

#[test]
fn cutoff_shape() {
    assert_eq!(cutoff(0.5), (1.0, 0.0));
    assert_eq!(cutoff(-1.0).0, 1.0);
    assert_eq!(cutoff(2.5), (0.0, 0.0));
    let (c, _) = cutoff(1.5);
    assert!((c - 0.5).abs() < 1e-14);
    for y in [1.2, 1.5, 1.8, -1.3] {
        let h = 1e-6;
        let fd = (cutoff(y + h).0 - cutoff(y - h).0) / (2.0 * h);
        assert!((fd - cutoff(y).1).abs() < 1e-6, "y {y}");
    }
}

#[test]
fn finite_differences_of_polynomials_and_exponentials() {
    let f = |x: f64| x.powi(3) - 2.0 * x;
    assert!((finite_difference(&f, 0.7, 1) - (3.0 * 0.49 - 2.0)).abs() < 1e-9);
    assert!((finite_difference(&f, 0.7, 2) - 4.2).abs() < 1e-6);
    assert!((finite_difference(&f, 0.7, 3) - 6.0).abs() < 1e-4);
    let g = |x: f64| (0.5 * x).exp();
    assert!((finite_difference(&g, 0.3, 4) - 0.0625 * (0.15f64).exp()).abs() < 1e-3);
}

#[test]
fn evolved_derivatives_of_a_gaussian() {
    // φ(s) = e^{-s²}, φ_t(s) = e^{-its - s²}; ∂φ_t = (-it - 2s)φ_t
    let phi = |s: f64| (-s * s).exp();
    let (t, x) = (1.3, 0.4);
    let d = evolved_derivatives(&phi, t, x, 1);
    let base = c64::new(0.0, -t * x).exp() * (-x * x).exp();
    assert!((d[0] - base).norm() < 1e-14);
    assert!((d[1] - base * c64::new(-2.0 * x, -t)).norm() < 1e-9);
}

#[test]
fn extension_on_the_real_axis_and_outside_support() {
    let t = 0.7;
    for x in [-0.5, 0.0, 0.3] {
        let q = quasi_analytic_extension(&bump, t, 2, c64::new(x, 0.0)).unwrap();
        let exact = c64::new(0.0, -t * x).exp() * bump(x);
        assert!((q.value - exact).norm() < 1e-14);
    }
    let q = quasi_analytic_extension(&bump, t, 2, c64::new(1.5, 0.3)).unwrap();
    assert_eq!(q.value, ZERO);
    assert_eq!(q.dbar, ZERO);
    assert!(quasi_analytic_extension(&bump, t, 7, c64::new(0.0, 0.1)).is_err());
}

#[test]
fn extension_dbar_limit_is_third_derivative_over_2n_factorial() {
    // for |y| ≤ 1 only the top Taylor term survives: ∂z̄φ̂ = ½ ∂^{N+1}φ_t (iy)^N/N!
    let (t, x, y, n) = (0.5, 0.2, 1e-3, 2usize);
    let q = quasi_analytic_extension(&bump, t, n, c64::new(x, y)).unwrap();
    let d3 = evolved_derivatives(&bump, t, x, 3)[3].norm();
    let ratio = q.dbar.norm() / y.powi(2);
    assert!((ratio - d3 / 4.0).abs() <= 0.01 * d3 / 4.0, "{ratio} vs {}", d3 / 4.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn extension_vanishes_where_the_cutoff_does(x in -0.9f64..0.9, y in 2.0f64..4.0, t in -2.0f64..2.0) {
        let q = quasi_analytic_extension(&bump, t, 3, c64::new(x, y)).unwrap();
        prop_assert_eq!(q.value, ZERO);
        prop_assert_eq!(q.dbar, ZERO);
    }
}
