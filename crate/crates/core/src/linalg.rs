//! Dense kernels: matrix exponential, integrated OU covariance, symmetric
//! eigenvalue checks and the PSD (Loewner) order.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::OuParams;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let mut ev = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    ev.as_mut_slice().sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().copied().fold(f64::INFINITY, f64::min)
}

/// Largest absolute eigenvalue of the symmetric part.
pub fn spectral_radius_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// PSD test with the relative tolerance used throughout the crate:
/// every eigenvalue must be at least `-rel_tol` times the spectral radius.
pub fn is_psd(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let ev = sym_eigenvalues(m);
    let rho = ev.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    ev.iter().all(|&x| x >= -rel_tol * rho)
}

/// Symmetric positive definite: all eigenvalues strictly positive.
pub fn is_pd(m: &DMatrix<f64>) -> bool {
    m.nrows() > 0 && min_eigenvalue(m) > 0.0
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax();
    (m - m.transpose()).amax() <= rel_tol * scale
}

/// `Mlow ⪯ Mhigh` in the Loewner order, up to `tol`.
pub fn psd_leq(m_low: &DMatrix<f64>, m_high: &DMatrix<f64>, tol: f64) -> bool {
    min_eigenvalue(&(m_high - m_low)) >= -tol
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
pub fn sym_fn(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let v = &eig.eigenvectors;
    let lam = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(v * lam * v.transpose()))
}

/// Principal square root of a symmetric PSD matrix. Tiny negative
/// eigenvalues from rounding are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_fn(m, |x| x.max(0.0).sqrt())
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrtm_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_pd(m) {
        return Err(Error::numerical("inverse square root of a matrix that is not positive definite"));
    }
    Ok(sym_fn(m, |x| 1.0 / x.sqrt()))
}

pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|x| x.is_finite()))
        .ok_or_else(|| Error::numerical(format!("{what} is singular")))
}

/// Inverse of a symmetric positive definite matrix through Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::numerical(format!("{what} is not positive definite")))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Ratio of extreme eigenvalues of a symmetric positive definite matrix.
pub fn condition_number_spd(m: &DMatrix<f64>) -> f64 {
    let ev = sym_eigenvalues(m);
    let lo = ev[0];
    let hi = ev[ev.len() - 1];
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norms for which each diagonal approximant is accurate to
// double precision without scaling.
const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.539398330063230e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068e0;
const THETA13: f64 = 5.371920351148152e0;

/// Matrix exponential by scaling and squaring with diagonal Padé
/// approximants (degree 13 beyond the small-norm cutoffs).
///
/// Returns an error instead of infinities when the result overflows.
pub fn matrix_exp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::validation("matrix_exp needs a square matrix"));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation("matrix_exp input has non-finite entries"));
    }
    let n = m.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    if n == 0 {
        return Ok(ident);
    }
    let nrm = norm1(m);

    let low_degree = [
        (THETA3, &PADE3[..]),
        (THETA5, &PADE5[..]),
        (THETA7, &PADE7[..]),
        (THETA9, &PADE9[..]),
    ];
    for (theta, coeffs) in low_degree {
        if nrm <= theta {
            return finish(pade_odd_even(m, coeffs, &ident), 0);
        }
    }

    let s = if nrm > THETA13 {
        (nrm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    if s > 1023 {
        return Err(Error::numerical(format!(
            "matrix_exp overflow: norm {nrm:e} is too large"
        )));
    }
    let a = m * 2f64.powi(-s);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &ident * b[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &ident * b[0];
    finish(solve_pade(&u, &v), s as u32)
}

/// Low-degree approximant: odd part `u`, even part `v`.
fn pade_odd_even(
    a: &DMatrix<f64>,
    coeffs: &[f64],
    ident: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let a2 = a * a;
    let mut pow = ident.clone();
    let mut u_inner = DMatrix::zeros(a.nrows(), a.ncols());
    let mut v = DMatrix::zeros(a.nrows(), a.ncols());
    for k in 0..coeffs.len() / 2 {
        v += &pow * coeffs[2 * k];
        u_inner += &pow * coeffs[2 * k + 1];
        pow = &pow * &a2;
    }
    let u = a * u_inner;
    solve_pade(&u, &v)
}

fn solve_pade(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let denom = v - u;
    let numer = v + u;
    denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::numerical("matrix_exp: singular Padé denominator"))
}

fn finish(r: Result<DMatrix<f64>>, squarings: u32) -> Result<DMatrix<f64>> {
    let mut r = r?;
    for _ in 0..squarings {
        r = &r * &r;
        if r.iter().any(|x| !x.is_finite()) {
            break;
        }
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("matrix_exp overflow: result is not finite"));
    }
    Ok(r)
}

/// `Σ_τ = ∫_0^τ e^{-Ru} Σ e^{-Rᵀu} du`, the covariance accumulated by an OU
/// process over a horizon `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovIntegral {
    pub horizon: f64,
    pub value: DMatrix<f64>,
}

/// Composite Simpson rule on `max(64, ⌈256·τ·‖R‖₁⌉)` panels. The integrand
/// nodes are successive powers of one small-step exponential.
pub fn integrated_covariance(ou: &OuParams, tau: f64) -> Result<CovIntegral> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(Error::validation(format!(
            "integration horizon must be finite and non-negative, got {tau}"
        )));
    }
    let d = ou.dim();
    if tau == 0.0 {
        return Ok(CovIntegral {
            horizon: 0.0,
            value: DMatrix::zeros(d, d),
        });
    }
    let panels = 64usize.max((256.0 * tau * norm1(&ou.r)).ceil() as usize);
    let nodes = 2 * panels;
    let h = tau / nodes as f64;
    let step = matrix_exp(&(&ou.r * -h))?;
    let mut e = DMatrix::<f64>::identity(d, d);
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for j in 0..=nodes {
        let w = if j == 0 || j == nodes {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += (&e * &ou.sigma * e.transpose()) * w;
        e = &e * &step;
    }
    Ok(CovIntegral {
        horizon: tau,
        value: symmetrize(&(acc * (h / 3.0))),
    })
}
