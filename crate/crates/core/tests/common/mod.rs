//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ouexec::{ExecutionSpec, OuParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn scalar(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

pub fn vec1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

/// Single-asset futures instance.
pub const SA_R: f64 = 5.1;
pub const SA_SBAR: f64 = 79887.0;
pub const SA_SIGMA: f64 = 243.67;
pub const SA_ETA: f64 = 5e-3;
pub const SA_GAMMA_PEN: f64 = 100.0;
pub const SA_GAMMA: f64 = 2e-5;
pub const SA_Q0: f64 = 2250.0;
pub const SA_S0: f64 = 79835.0;
pub const SA_SIGMA_AC: f64 = 244.02;
pub const SA_BARS: usize = 840;

pub fn single_asset() -> (OuParams, ExecutionSpec) {
    let ou = OuParams::new(scalar(SA_R), vec1(SA_SBAR), scalar(SA_SIGMA * SA_SIGMA)).unwrap();
    let exec = ExecutionSpec::without_impact(scalar(SA_ETA), scalar(SA_GAMMA_PEN), SA_GAMMA, 1.0).unwrap();
    (ou, exec)
}

/// Two-asset instance; `gamma` is 2e-5 or 2e-3.
pub const PAIR_BARS: usize = 510;

pub fn pair_ou() -> OuParams {
    OuParams::new(
        DMatrix::from_row_slice(2, 2, &[0.33, 3.95, -2.52, 10.23]),
        DVector::from_vec(vec![54.23, 27.45]),
        DMatrix::from_row_slice(2, 2, &[0.47, 0.20, 0.20, 0.14]),
    )
    .unwrap()
}

pub fn pair(gamma: f64) -> (OuParams, ExecutionSpec) {
    let exec = ExecutionSpec::without_impact(
        DMatrix::from_diagonal(&DVector::from_vec(vec![4e-7, 2e-7])),
        DMatrix::identity(2, 2) * 100.0,
        gamma,
        1.0,
    )
    .unwrap();
    (pair_ou(), exec)
}

pub fn t4_q0() -> DVector<f64> {
    DVector::from_vec(vec![75000.0, 75000.0])
}

pub fn t4_s0() -> DVector<f64> {
    DVector::from_vec(vec![54.4, 27.48])
}

pub fn rand_mat(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0))
}

pub fn rand_vec(d: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
}

pub fn rand_sym(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let m = rand_mat(d, rng);
    (&m + m.transpose()) * 0.5
}

/// `scale·(MMᵀ + 0.1·I)`.
pub fn rand_spd(d: usize, rng: &mut impl Rng, scale: f64) -> DMatrix<f64> {
    let m = rand_mat(d, rng);
    (&m * m.transpose() + DMatrix::identity(d, d) * 0.1) * scale
}

/// A generator whose symmetric part is positive definite, so every
/// eigenvalue has positive real part.
pub fn rand_stable_r(d: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let m = rand_mat(d, rng) * 3.0;
    let sym = (&m + m.transpose()) * 0.5;
    let lo = sym.symmetric_eigenvalues().min();
    m + DMatrix::identity(d, d) * (0.5 - lo.min(0.0))
}

pub fn rel_err(got: &DMatrix<f64>, want: &DMatrix<f64>) -> f64 {
    (got - want).amax() / want.amax().max(f64::MIN_POSITIVE)
}

/// Eigen-pair of the paired generator with the faster reversion: returns
/// `(λ, u, v)` with `Ru = λu` and `vᵀR = λvᵀ`, `v` scaled so `v₁ = 1`.
pub fn fast_mode() -> (f64, DVector<f64>, DVector<f64>) {
    let r = pair_ou().r;
    let (tr, det) = (r.trace(), r.determinant());
    let lam = 0.5 * (tr + (tr * tr - 4.0 * det).sqrt());
    // (R − λI)u = 0 from the first row, vᵀ(R − λI) = 0 from the first column.
    let u = DVector::from_vec(vec![r[(0, 1)], lam - r[(0, 0)]]);
    let v = DVector::from_vec(vec![1.0, -(r[(0, 0)] - lam) / r[(1, 0)]]);
    (lam, u, v)
}

/// Cointegrated pair keeping only the fast mode of the paired generator:
/// `R₁ = λ·u vᵀ/(vᵀu)` has rank one, so `vᵀS` mean-reverts while the
/// orthogonal direction is a random walk.
pub fn rank_one_pair() -> OuParams {
    let base = pair_ou();
    let (lam, u, v) = fast_mode();
    let r1 = &u * v.transpose() * (lam / v.dot(&u));
    OuParams::new(r1, base.sbar, base.sigma).unwrap()
}

/// Simulates `n` bars of `dS = R(S̄ − S)dt + μdt + VdW`; exact when `Rμ = 0`.
pub fn simulate_drifted(
    ou: &OuParams,
    drift: &DVector<f64>,
    dt: f64,
    n: usize,
    s0: &DVector<f64>,
    g: &mut impl Rng,
) -> ouexec::MarketPath {
    use rand_distr::StandardNormal;
    let d = ou.dim();
    let stepper = ouexec::simulation::OuStepper::new(ou, dt).unwrap();
    let mut prices = DMatrix::zeros(n + 1, d);
    let mut s: Vec<f64> = s0.iter().copied().collect();
    let mut noise = vec![0.0; d];
    let mut next = vec![0.0; d];
    prices.row_mut(0).copy_from_slice(&s);
    for k in 1..=n {
        for z in noise.iter_mut() {
            *z = g.sample(StandardNormal);
        }
        stepper.step_into(&s, &noise, &mut next);
        for i in 0..d {
            s[i] = next[i] + drift[i] * dt;
        }
        prices.row_mut(k).copy_from_slice(&s);
    }
    let times = (0..=n).map(|k| k as f64 * dt).collect();
    ouexec::MarketPath::new(times, prices, ouexec::MarketPath::default_names(d)).unwrap()
}

/// Drift along the common-trend direction (orthogonal to `v`) equal to
/// `ratio` bar standard deviations per bar.
pub fn common_trend_drift(ou: &OuParams, v: &DVector<f64>, ratio: f64, dt: f64) -> DVector<f64> {
    let w = DVector::from_vec(vec![-v[1], v[0]]).normalize();
    let sd = (w.dot(&(&ou.sigma * &w)) * dt).sqrt();
    w * (ratio * sd / dt)
}

/// Angle in degrees between the lines spanned by `a` and `b`.
pub fn line_angle_deg(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos().to_degrees()
}
