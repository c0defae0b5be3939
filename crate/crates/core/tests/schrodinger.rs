use std::f64::consts::PI;

use gni_core::schrodinger::*;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

fn setup(n: usize, eps: f64, variant: R3Variant) -> (SemiclassicalGrid, PotentialData, Zassenhaus) {
    let g = SemiclassicalGrid::new(n, eps, eps).unwrap();
    let p = PotentialData::from_id(&g, "cos").unwrap();
    let z = Zassenhaus::with_options(g.clone(), &p, variant, KrylovMode::default());
    (g, p, z)
}

fn dense_exp_skew(m: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let herm = m.map(|z| z * Complex64::new(0.0, -1.0));
    let herm = (&herm + herm.adjoint()) * Complex64::new(0.5, 0.0);
    let e = SymmetricEigen::new(herm);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| Complex64::from_polar(1.0, l)));
    &e.eigenvectors * d * e.eigenvectors.adjoint()
}

#[test]
fn free_step_is_exact_plane_wave_dispersion() {
    let eps = 1.0 / 16.0;
    let g = SemiclassicalGrid::new(64, eps, 0.3).unwrap();
    let z = Zassenhaus::new(g.clone(), &PotentialData::zero(&g));
    let modes = [(3i64, 0.7), (-5, 0.2), (11, -0.4)];
    let at = |t: f64| {
        WaveFunction::from_fn(&g, |x| {
            modes
                .iter()
                .map(|&(k, a)| {
                    let kk = PI * k as f64;
                    Complex64::from_polar(a, kk * x - eps * kk * kk * t)
                })
                .sum()
        })
    };
    let u1 = z.step(&at(0.0)).unwrap();
    assert!(u1.distance(&at(0.3)) <= 1e-12);
}

#[test]
fn dense_reference_free_case_and_unitarity() {
    let eps = 1.0 / 8.0;
    let g = SemiclassicalGrid::new(64, eps, eps).unwrap();
    let zero = PotentialData::zero(&g);
    let p0 = reference_propagator(&g, &zero, eps).unwrap();
    let u = semiclassical_packet(&g);
    let r1 = apply_exp_r1(&g.spectral(), &u.values, Complex64::new(0.0, eps * eps));
    assert!(apply_dense(&p0, &u).distance(&WaveFunction::new(r1)) <= 1e-12);

    let pot = PotentialData::from_id(&g, "cos").unwrap();
    let p = reference_propagator(&g, &pot, eps).unwrap();
    let defect = (p.adjoint() * &p - DMatrix::identity(64, 64)).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(defect <= 1e-12, "{defect:e}");

    let big = SemiclassicalGrid::new(1024, eps, eps).unwrap();
    assert!(reference_propagator(&big, &PotentialData::zero(&big), eps).is_err());
}

#[test]
fn commutator_identities_hold_spectrally() {
    let g = SemiclassicalGrid::new(128, 0.25, 0.25).unwrap();
    let sp = g.spectral();
    let p = PotentialData::from_id(&g, "double-well").unwrap();
    let u = WaveFunction::from_fn(&g, |x| Complex64::from_polar((PI * x).sin().exp(), 2.0 * (PI * x).cos()));
    let mul = |f: &[f64], w: &[Complex64]| -> Vec<Complex64> { f.iter().zip(w).map(|(a, b)| b * *a).collect() };
    let v = p.derivative(0);
    let d2 = |w: &[Complex64]| sp.derivative(w, 2);
    let comm = |w: &[Complex64]| -> Vec<Complex64> {
        let a = mul(v, &d2(w));
        let b = d2(&mul(v, w));
        a.iter().zip(&b).map(|(x, y)| x - y).collect()
    };

    let lhs = comm(&u.values);
    let du = sp.derivative(&u.values, 1);
    let rhs: Vec<Complex64> = (0..g.n)
        .map(|j| -p.derivative(2)[j] * u.values[j] - 2.0 * p.derivative(1)[j] * du[j])
        .collect();
    let scale = WaveFunction::new(lhs.clone()).norm();
    let err = WaveFunction::new(lhs).distance(&WaveFunction::new(rhs));
    assert!(err <= 1e-10 * scale, "{err:e}");

    // [[V,∂²],∂²] = V⁗ + 4V‴∂ + 4V″∂²
    let c = comm(&u.values);
    let t = comm(&d2(&u.values));
    let lhs2: Vec<Complex64> = t.iter().zip(&d2(&c)).map(|(x, y)| x - y).collect();
    let d2u = d2(&u.values);
    let rhs2: Vec<Complex64> = (0..g.n)
        .map(|j| p.derivative(4)[j] * u.values[j] + 4.0 * p.derivative(3)[j] * du[j] + 4.0 * p.derivative(2)[j] * d2u[j])
        .collect();
    let scale = WaveFunction::new(lhs2.clone()).norm();
    let err = WaveFunction::new(lhs2).distance(&WaveFunction::new(rhs2));
    assert!(err <= 1e-9 * scale, "{err:e}");
}

#[test]
fn step_is_unitary() {
    let (g, _, z) = setup(256, 1.0 / 16.0, R3Variant::Raised);
    let mut u = semiclassical_packet(&g);
    for _ in 0..10 {
        let w = z.step(&u).unwrap();
        assert!((w.norm() / u.norm() - 1.0).abs() <= 1e-10);
        u = w;
    }
}

#[test]
fn step_is_time_symmetric_with_converged_exponentials() {
    let eps = 1.0 / 16.0;
    let g = SemiclassicalGrid::new(256, eps, eps).unwrap();
    let p = PotentialData::from_id(&g, "cos").unwrap();
    let mode = KrylovMode::Adaptive { tol: 1e-13, max_dim: 64 };
    let fwd = Zassenhaus::with_options(g.clone(), &p, R3Variant::Raised, mode);
    let bwd = Zassenhaus::with_options(g.with_step(-eps).unwrap(), &p, R3Variant::Raised, mode);
    let u = semiclassical_packet(&g);
    let back = bwd.step(&fwd.step(&u).unwrap()).unwrap();
    assert!(back.distance(&u) <= 1e-8, "{:e}", back.distance(&u));

    let seq = Zassenhaus::exponent_sequence();
    let mut rev = seq;
    rev.reverse();
    assert_eq!(seq, rev);
}

#[test]
fn krylov_r2_three_vectors_against_dense() {
    let (g, _, z) = setup(128, 1.0 / 16.0, R3Variant::Raised);
    let u = semiclassical_packet(&g);
    let r2 = &z.operators().r2;
    let exact = dense_exp_skew(&r2.to_dense()) * DVector::from_column_slice(&u.values);
    let out = krylov_exp_apply(|x| r2.apply(x), &u.values, 3).unwrap();
    let err = WaveFunction::new(out.value).distance(&WaveFunction::new(exact.as_slice().to_vec()));
    assert!(err <= 1e-6, "R2 Krylov(3) error {err:e} at ε = 1/16");
}

#[test]
fn krylov_r2_error_decays_like_eps_to_the_sixth() {
    let mut errs = Vec::new();
    for eps in [1.0 / 16.0, 1.0 / 32.0] {
        let (g, _, z) = setup(128, eps, R3Variant::Raised);
        let u = semiclassical_packet(&g);
        let r2 = &z.operators().r2;
        let exact = dense_exp_skew(&r2.to_dense()) * DVector::from_column_slice(&u.values);
        let out = krylov_exp_apply(|x| r2.apply(x), &u.values, 3).unwrap();
        errs.push(WaveFunction::new(out.value).distance(&WaveFunction::new(exact.as_slice().to_vec())));
    }
    let slope = (errs[0] / errs[1]).log2();
    assert!(slope >= 5.5, "slope {slope}");
}

fn operator_norms(variant: R3Variant) -> Vec<(f64, f64)> {
    [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]
        .iter()
        .map(|&eps| {
            let (g, _, z) = setup(256, eps, variant);
            let u = semiclassical_packet(&g);
            let ops = z.operators();
            (
                WaveFunction::new(ops.r2.apply(&u.values)).norm(),
                WaveFunction::new(ops.r3.apply(&u.values)).norm(),
            )
        })
        .collect()
}

#[test]
fn operator_sizes_scale_with_eps() {
    let raised = operator_norms(R3Variant::Raised);
    for w in raised.windows(2) {
        let r2 = w[0].0 / w[1].0;
        assert!((3.5..=4.5).contains(&r2), "R2 ratio {r2}");
        let r3 = (w[0].1 / w[1].1).log2();
        assert!((3.0..=5.0).contains(&r3), "R3 log-ratio {r3}");
    }
    // The literal ε⁻³ coefficient makes R3 grow as ε shrinks.
    let printed = operator_norms(R3Variant::Printed);
    for w in printed.windows(2) {
        assert!(w[1].1 > w[0].1);
    }
}

fn one_step_errors(variant: R3Variant) -> Vec<f64> {
    [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0]
        .iter()
        .map(|&eps| {
            let (g, p, z) = setup(256, eps, variant);
            let u = semiclassical_packet(&g);
            let reference = apply_dense(&reference_propagator(&g, &p, eps).unwrap(), &u);
            z.step(&u).unwrap().distance(&reference)
        })
        .collect()
}

#[test]
fn one_step_error_slope() {
    let e = one_step_errors(R3Variant::Raised);
    let slope = (e[0] / e[2]).log2() / 2.0;
    assert!(slope >= 3.5, "slope {slope} from {e:?}");
    for w in e.windows(2) {
        assert!((w[0] / w[1]).log2() >= 3.5, "{e:?}");
    }
}

#[test]
fn printed_r3_does_not_converge() {
    let e = one_step_errors(R3Variant::Printed);
    assert!(e.iter().all(|&x| x > 0.1), "{e:?}");
}
