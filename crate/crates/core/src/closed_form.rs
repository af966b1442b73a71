//! Analytic solutions: the Brownian case `R = 0` and the frictionless
//! (Merton) portfolio problem.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ExecutionSpec, OuParams};

/// Closed-form `A(t)` when prices are arithmetic Brownian motions.
///
/// With `Â = √(γ/2)·(η^{-1/2} Σ η^{-1/2})^{1/2}` and `C = η^{-1/2} Γ η^{-1/2}`,
/// `A(t) = η^{1/2}(Â + ξ(t)^{-1})η^{1/2}` where `ξ` solves `ξ' = Âξ + ξÂ + I`.
#[derive(Debug, Clone)]
pub struct BrownianClosedForm {
    pub ahat: DMatrix<f64>,
    pub cmat: DMatrix<f64>,
    pub eta_half: DMatrix<f64>,
    horizon: f64,
    // Â = V diag(λ) Vᵀ
    lambda: DVector<f64>,
    vecs: DMatrix<f64>,
    c_plus_a_inv: DMatrix<f64>,
}

impl BrownianClosedForm {
    pub fn new(ou: &OuParams, exec: &ExecutionSpec) -> Result<Self> {
        if ou.r.iter().any(|&x| x != 0.0) {
            return Err(Error::validation("Brownian closed form requires R = 0"));
        }
        if exec.dim() != ou.dim() {
            return Err(Error::validation("dimension mismatch between price model and execution spec"));
        }
        if !linalg::is_pd(&ou.sigma) {
            return Err(Error::numerical("Brownian closed form requires positive definite Sigma"));
        }
        let eta_half = linalg::sqrtm_psd(&exec.eta);
        let eta_mhalf = linalg::inv_sqrtm_pd(&exec.eta)?;
        let inner = linalg::symmetrize(&(&eta_mhalf * &ou.sigma * &eta_mhalf));
        let ahat = linalg::sqrtm_psd(&inner) * (0.5 * exec.risk_aversion).sqrt();
        let cmat = linalg::symmetrize(&(&eta_mhalf * exec.penalty() * &eta_mhalf));
        let eig = SymmetricEigen::new(ahat.clone());
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::numerical("Â is not positive definite"));
        }
        let c_plus_a_inv = linalg::spd_inverse(&(&cmat + &ahat), "C + Â")?;
        Ok(BrownianClosedForm {
            ahat,
            cmat,
            eta_half,
            horizon: exec.horizon,
            lambda: eig.eigenvalues,
            vecs: eig.eigenvectors,
            c_plus_a_inv,
        })
    }

    fn tau(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::Range(format!("t = {t}"), format!("[0, {}]", self.horizon)));
        }
        Ok((self.horizon - t).max(0.0))
    }

    /// `ξ(t) = −Â^{-1}/2·(I − e^{−2Âτ}) − e^{−Âτ}(C + Â)^{-1}e^{−Âτ}`, `τ = T − t`.
    pub fn xi(&self, t: f64) -> Result<DMatrix<f64>> {
        let tau = self.tau(t)?;
        let v = &self.vecs;
        // −expm1(−2λτ)/(2λ) keeps accuracy for small λτ.
        let first = self.lambda.map(|l| -f64::exp_m1(-2.0 * l * tau) / (2.0 * l));
        let decay = self.lambda.map(|l| (-l * tau).exp());
        let e = v * DMatrix::from_diagonal(&decay) * v.transpose();
        let xi = -(v * DMatrix::from_diagonal(&first) * v.transpose()) - &e * &self.c_plus_a_inv * &e;
        Ok(linalg::symmetrize(&xi))
    }

    pub fn a(&self, t: f64) -> Result<DMatrix<f64>> {
        let xi_inv = linalg::inverse(&self.xi(t)?, "xi")?;
        Ok(linalg::symmetrize(&(&self.eta_half * (&self.ahat + xi_inv) * &self.eta_half)))
    }
}

/// `A(t)` for `R = 0`.
pub fn brownian_a(ou: &OuParams, exec: &ExecutionSpec, t: f64) -> Result<DMatrix<f64>> {
    BrownianClosedForm::new(ou, exec)?.a(t)
}

/// `ξ(t)` for `R = 0`.
pub fn riccati_flow_xi(ou: &OuParams, exec: &ExecutionSpec, t: f64) -> Result<DMatrix<f64>> {
    BrownianClosedForm::new(ou, exec)?.xi(t)
}

/// Frictionless problem: `θ̂(t,S) = SᵀĈS + ÊᵀS + F̂` with `M = RᵀΣ⁻¹R`,
/// `Ĉ = (T−t)/(2γ)·M`, `Ê = −(T−t)/γ·M S̄` and
/// `F̂ = (T−t)²/(4γ)·Tr(MΣ) + (T−t)/(2γ)·S̄ᵀMS̄`.
#[derive(Debug, Clone)]
pub struct MertonSolution {
    pub gamma: f64,
    pub horizon: f64,
    m: DMatrix<f64>,
    m_sbar: DVector<f64>,
    tr_m_sigma: f64,
    sbar_m_sbar: f64,
    sbar: DVector<f64>,
    /// `Σ⁻¹R`.
    sig_inv_r: DMatrix<f64>,
    r_t: DMatrix<f64>,
}

impl MertonSolution {
    pub fn new(ou: &OuParams, gamma: f64, horizon: f64) -> Result<Self> {
        if !(gamma > 0.0) || !(horizon > 0.0) {
            return Err(Error::validation("Merton problem needs gamma > 0 and T > 0"));
        }
        let sig_inv = linalg::spd_inverse(&ou.sigma, "Sigma")
            .map_err(|_| Error::numerical("Merton problem requires positive definite Sigma"))?;
        let sig_inv_r = &sig_inv * &ou.r;
        let m = linalg::symmetrize(&(ou.r.transpose() * &sig_inv_r));
        let m_sbar = &m * &ou.sbar;
        Ok(MertonSolution {
            gamma,
            horizon,
            tr_m_sigma: (&m * &ou.sigma).trace(),
            sbar_m_sbar: ou.sbar.dot(&m_sbar),
            m_sbar,
            m,
            sbar: ou.sbar.clone(),
            sig_inv_r,
            r_t: ou.r.transpose(),
        })
    }

    fn tau(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::Range(format!("t = {t}"), format!("[0, {}]", self.horizon)));
        }
        Ok((self.horizon - t).max(0.0))
    }

    /// `RᵀΣ⁻¹R`.
    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn chat(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(&self.m * (self.tau(t)? / (2.0 * self.gamma)))
    }

    pub fn ehat(&self, t: f64) -> Result<DVector<f64>> {
        Ok(&self.m_sbar * (-self.tau(t)? / self.gamma))
    }

    pub fn fhat(&self, t: f64) -> Result<f64> {
        let tau = self.tau(t)?;
        Ok(tau * tau / (4.0 * self.gamma) * self.tr_m_sigma + tau / (2.0 * self.gamma) * self.sbar_m_sbar)
    }

    pub fn theta(&self, t: f64, s: &DVector<f64>) -> Result<f64> {
        Ok(s.dot(&(self.chat(t)? * s)) + self.ehat(t)?.dot(s) + self.fhat(t)?)
    }

    /// `q* = γ⁻¹(I + (T−t)Rᵀ)Σ⁻¹R(S̄ − S)`.
    pub fn position(&self, t: f64, s: &DVector<f64>) -> Result<DVector<f64>> {
        let tau = self.tau(t)?;
        let d = self.sbar.len();
        let gap = &self.sbar - s;
        let inner = &self.sig_inv_r * gap;
        Ok((DMatrix::<f64>::identity(d, d) + &self.r_t * tau) * inner / self.gamma)
    }
}

pub fn merton_theta(ou: &OuParams, gamma: f64, horizon: f64, t: f64, s: &DVector<f64>) -> Result<f64> {
    MertonSolution::new(ou, gamma, horizon)?.theta(t, s)
}

pub fn merton_position(ou: &OuParams, gamma: f64, horizon: f64, t: f64, s: &DVector<f64>) -> Result<DVector<f64>> {
    MertonSolution::new(ou, gamma, horizon)?.position(t, s)
}
