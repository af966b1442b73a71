mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use ouexec::linalg::{integrated_covariance, matrix_exp, min_eigenvalue, psd_leq, symmetrize};
use ouexec::OuParams;

#[test]
fn exp_of_zero_is_identity() {
    for d in 1..=4 {
        assert_eq!(matrix_exp(&DMatrix::zeros(d, d)).unwrap(), DMatrix::identity(d, d));
    }
}

#[test]
fn exp_of_diagonal() {
    let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, -3.0, 0.25]));
    let e = matrix_exp(&m).unwrap();
    for (i, x) in [1.5f64, -3.0, 0.25].into_iter().enumerate() {
        assert!((e[(i, i)] - x.exp()).abs() <= 1e-14 * x.exp());
    }
    assert_eq!(e[(0, 1)], 0.0);
}

#[test]
fn exp_times_exp_of_negative_is_identity() {
    let mut g = rng(11);
    for _ in 0..200 {
        let m = rand_mat(2, &mut g) * 3.0;
        let p = matrix_exp(&m).unwrap() * matrix_exp(&-&m).unwrap();
        assert!((p - DMatrix::identity(2, 2)).amax() < 1e-10);
    }
}

#[test]
fn exp_of_commuting_sum_factorizes() {
    let mut g = rng(12);
    for d in 2..=4 {
        for _ in 0..50 {
            let a = rand_mat(d, &mut g);
            // Polynomials in `a` commute with `a`.
            let b = &a * &a * 0.3 - &a * 0.7 + DMatrix::identity(d, d) * 0.2;
            let lhs = matrix_exp(&(&a + &b)).unwrap();
            let rhs = matrix_exp(&a).unwrap() * matrix_exp(&b).unwrap();
            assert!(rel_err(&lhs, &rhs) < 1e-10, "d={d}");
        }
    }
}

#[test]
fn exp_agrees_with_nalgebra() {
    let mut g = rng(13);
    for d in 1..=5 {
        for scale in [0.01, 1.0, 5.0] {
            let m = rand_mat(d, &mut g) * scale;
            let ours = matrix_exp(&m).unwrap();
            let theirs = m.clone().exp();
            assert!(rel_err(&ours, &theirs) < 1e-12, "d={d} scale={scale}");
        }
    }
}

#[test]
fn exp_of_large_symmetric_matches_spectral_formula() {
    let mut g = rng(14);
    for d in 2..=4 {
        let q = rand_mat(d, &mut g).qr().q();
        let lam = DVector::from_fn(d, |i, _| -50.0 + 100.0 * i as f64 / (d - 1) as f64);
        let m = &q * DMatrix::from_diagonal(&lam) * q.transpose();
        let want = &q * DMatrix::from_diagonal(&lam.map(f64::exp)) * q.transpose();
        assert!(rel_err(&matrix_exp(&m).unwrap(), &want) < 1e-12, "d={d}");
    }
}

#[test]
fn exp_of_jordan_block() {
    // e^{λI + N} = e^λ (I + N) for a 2x2 Jordan block.
    let m = DMatrix::from_row_slice(2, 2, &[0.7, 1.0, 0.0, 0.7]);
    let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]) * 0.7f64.exp();
    assert!(rel_err(&matrix_exp(&m).unwrap(), &want) < 1e-14);
}

#[test]
fn exp_reports_overflow() {
    assert!(matrix_exp(&scalar(1000.0)).is_err());
    assert!(matrix_exp(&scalar(f64::NAN)).is_err());
    assert!(matrix_exp(&scalar(f64::INFINITY)).is_err());
}

fn van_loan(ou: &OuParams, tau: f64) -> DMatrix<f64> {
    // exp([[R, Σ], [0, −Rᵀ]]τ) = [[·, G], [0, F]] and Σ_τ = FᵀG.
    let d = ou.dim();
    let mut blk = DMatrix::zeros(2 * d, 2 * d);
    blk.view_mut((0, 0), (d, d)).copy_from(&ou.r);
    blk.view_mut((0, d), (d, d)).copy_from(&ou.sigma);
    blk.view_mut((d, d), (d, d)).copy_from(&-ou.r.transpose());
    let e = (blk * tau).exp();
    let g = e.view((0, d), (d, d)).into_owned();
    let f = e.view((d, d), (d, d)).into_owned();
    symmetrize(&(f.transpose() * g))
}

#[test]
fn covariance_at_zero_horizon_is_zero() {
    let ou = pair_ou();
    assert_eq!(integrated_covariance(&ou, 0.0).unwrap().value, DMatrix::zeros(2, 2));
}

#[test]
fn covariance_without_reversion_is_linear() {
    let ou = OuParams::brownian(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
    let c = integrated_covariance(&ou, 0.37).unwrap();
    assert_eq!(c.horizon, 0.37);
    assert!(rel_err(&c.value, &(&ou.sigma * 0.37)) < 1e-14);
}

#[test]
fn covariance_scalar_antiderivative() {
    for (r, tau) in [(5.1, 1.0), (0.01, 3.0), (40.0, 0.5), (-0.3, 2.0)] {
        let s2 = SA_SIGMA * SA_SIGMA;
        let ou = OuParams::new(scalar(r), vec1(0.0), scalar(s2)).unwrap();
        let want = s2 * -f64::exp_m1(-2.0 * r * tau) / (2.0 * r);
        let got = integrated_covariance(&ou, tau).unwrap().value[(0, 0)];
        assert!((got - want).abs() <= 1e-8 * want.abs(), "r={r}: {got} vs {want}");
    }
}

#[test]
fn covariance_matches_van_loan() {
    let mut g = rng(15);
    let mut cases = vec![(pair_ou(), 1.0), (pair_ou(), 1.0 / 510.0)];
    for d in 1..=4 {
        let r = rand_stable_r(d, &mut g);
        cases.push((OuParams::new(r, DVector::zeros(d), rand_spd(d, &mut g, 1.0)).unwrap(), 0.8));
    }
    // Defective generator.
    let jordan = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
    cases.push((OuParams::new(jordan, DVector::zeros(2), pair_ou().sigma).unwrap(), 1.3));
    for (ou, tau) in cases {
        let got = integrated_covariance(&ou, tau).unwrap().value;
        assert!(rel_err(&got, &van_loan(&ou, tau)) < 1e-8);
        assert_eq!(got, got.transpose());
    }
}

#[test]
fn covariance_is_monotone_in_horizon() {
    let mut g = rng(16);
    for _ in 0..10 {
        let r = rand_stable_r(3, &mut g);
        let ou = OuParams::new(r, DVector::zeros(3), rand_spd(3, &mut g, 1.0)).unwrap();
        let mut prev = integrated_covariance(&ou, 0.0).unwrap().value;
        for k in 1..=20 {
            let cur = integrated_covariance(&ou, 0.1 * k as f64).unwrap().value;
            assert!(psd_leq(&prev, &cur, 1e-10));
            assert!(min_eigenvalue(&cur) >= -1e-12);
            prev = cur;
        }
    }
}

#[test]
fn covariance_derivative_is_transported_sigma() {
    let ou = pair_ou();
    let h = 1e-6;
    for tau in [0.05, 0.3, 1.0] {
        let fd = (integrated_covariance(&ou, tau + h).unwrap().value - integrated_covariance(&ou, tau - h).unwrap().value)
            / (2.0 * h);
        let e = matrix_exp(&(&ou.r * -tau)).unwrap();
        let want = &e * &ou.sigma * e.transpose();
        assert!(rel_err(&fd, &want) < 1e-5, "tau={tau}");
    }
}

#[test]
fn psd_order_examples() {
    let i = DMatrix::<f64>::identity(3, 3);
    let z = DMatrix::<f64>::zeros(3, 3);
    assert!(psd_leq(&z, &i, 0.0));
    assert!(!psd_leq(&i, &z, 0.0));
    let mut g = rng(17);
    for _ in 0..20 {
        let a = rand_sym(3, &mut g) * 100.0;
        assert!(psd_leq(&a, &a, 1e-12));
    }
}
