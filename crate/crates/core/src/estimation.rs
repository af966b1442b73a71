//! Parameter estimation from bars: VAR(1) least squares converted to OU
//! parameters, the Bachelier covariance of increments and the Johansen
//! trace test for the cointegration rank.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{MarketPath, OuParams};

/// `S_{k+1} = a + Φ S_k + ε_k`, with `Qres` the residual covariance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Var1Fit {
    #[serde(serialize_with = "ser_mat")]
    pub phi: DMatrix<f64>,
    #[serde(serialize_with = "ser_vec")]
    pub a: DVector<f64>,
    #[serde(serialize_with = "ser_mat")]
    pub qres: DMatrix<f64>,
    pub dt: f64,
    pub n_obs: usize,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub r_squared: Vec<f64>,
    pub residual_mean: Vec<f64>,
    pub residual_std: Vec<f64>,
}

fn ser_mat<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&crate::model::to_rows(m), s)
}

fn ser_vec<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    serde::Serialize::serialize(v.as_slice(), s)
}

/// Rows `0..n-1` and `1..n` of the price matrix.
fn lagged(path: &MarketPath) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = path.len() - 1;
    let d = path.dim();
    (
        path.prices.view((0, 0), (n, d)).into_owned(),
        path.prices.view((1, 0), (n, d)).into_owned(),
    )
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn demean(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mu = column_means(m);
    let mut out = m.clone();
    for (j, mut c) in out.column_iter_mut().enumerate() {
        c.add_scalar_mut(-mu[j]);
    }
    (out, mu)
}

fn check_path(path: &MarketPath) -> Result<f64> {
    let d = path.dim();
    if d == 0 {
        return Err(Error::validation("path has no price columns"));
    }
    let n_obs = path.len().saturating_sub(1);
    if n_obs < d + 2 {
        return Err(Error::validation(format!(
            "need at least {} transitions for {d} assets, got {n_obs}",
            d + 2
        )));
    }
    path.uniform_dt()
}

/// Fails with the names of the regressors that are constant or collinear.
fn check_rank(xc: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let d = xc.ncols();
    let scale: Vec<f64> = xc.column_iter().map(|c| c.norm()).collect();
    let max_scale = scale.iter().copied().fold(0.0, f64::max);
    let constant: Vec<&str> = (0..d)
        .filter(|&j| scale[j] <= 1e-12 * max_scale || scale[j] == 0.0)
        .map(|j| names[j].as_str())
        .collect();
    if !constant.is_empty() {
        return Err(Error::numerical(format!(
            "rank-deficient regressors: {} constant (collinear with the intercept)",
            constant.join(", ")
        )));
    }
    let mut normalized = xc.clone();
    for (j, mut c) in normalized.column_iter_mut().enumerate() {
        c /= scale[j];
    }
    let corr = normalized.transpose() * &normalized;
    let eig = SymmetricEigen::new(corr);
    let (imin, lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc });
    let lmax = eig.eigenvalues.amax();
    if lmin <= 1e-12 * lmax {
        let v = eig.eigenvectors.column(imin);
        let vmax = v.amax();
        let cols: Vec<&str> = (0..d)
            .filter(|&j| v[j].abs() > 0.1 * vmax)
            .map(|j| names[j].as_str())
            .collect();
        return Err(Error::numerical(format!(
            "rank-deficient regressors: columns {} are collinear",
            cols.join(", ")
        )));
    }
    Ok(())
}

/// OLS of `S_{k+1}` on `(1, S_k)`; residual covariance uses the
/// denominator `n − d − 1`.
pub fn fit_var1(path: &MarketPath) -> Result<Var1Fit> {
    let dt = check_path(path)?;
    let d = path.dim();
    let (x, y) = lagged(path);
    let n = x.nrows();
    let (xc, xmu) = demean(&x);
    let (yc, ymu) = demean(&y);
    check_rank(&xc, &path.names)?;

    let qr = xc.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &yc;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::numerical("singular regression matrix"))?;
    let phi = beta.transpose();
    let a = &ymu - &phi * &xmu;

    let resid = &yc - &xc * &beta;
    let dof = (n - d - 1) as f64;
    let qres = linalg::symmetrize(&(resid.transpose() * &resid / dof));

    let mut diag = FitDiagnostics {
        r_squared: Vec::with_capacity(d),
        residual_mean: Vec::with_capacity(d),
        residual_std: Vec::with_capacity(d),
    };
    for j in 0..d {
        let e = resid.column(j);
        let sst = yc.column(j).norm_squared();
        let ssr = e.norm_squared();
        diag.r_squared.push(if sst > 0.0 { 1.0 - ssr / sst } else { f64::NAN });
        let mean = e.sum() / n as f64;
        diag.residual_mean.push(mean);
        diag.residual_std.push((e.map(|v| (v - mean).powi(2)).sum() / (n - 1) as f64).sqrt());
    }
    Ok(Var1Fit {
        phi,
        a,
        qres,
        dt,
        n_obs: n,
        diagnostics: diag,
    })
}

/// Principal logarithm of a real matrix through a complex eigendecomposition.
/// Imaginary parts above `1e-8` (relative) are an error.
pub fn matrix_log(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let ev = m.complex_eigenvalues();
    if let Some(l) = ev.iter().find(|l| !(l.re > 0.0)) {
        return Err(Error::numerical(format!(
            "matrix logarithm undefined: eigenvalue {} has non-positive real part",
            l
        )));
    }
    let mc: DMatrix<Complex64> = m.map(|x| Complex64::new(x, 0.0));
    let scale = ev.iter().map(|l| l.norm()).fold(0.0, f64::max);
    let cluster_tol = 1e-9 * scale;

    let mut vecs: Vec<DVector<Complex64>> = Vec::with_capacity(d);
    let mut logs: Vec<Complex64> = Vec::with_capacity(d);
    let mut used = vec![false; d];
    for i in 0..d {
        if used[i] {
            continue;
        }
        let members: Vec<usize> = (i..d)
            .filter(|&j| !used[j] && (ev[j] - ev[i]).norm() <= cluster_tol)
            .collect();
        let k = members.len();
        let lam = members.iter().map(|&j| ev[j]).sum::<Complex64>() / k as f64;
        for &j in &members {
            used[j] = true;
        }
        let shifted = &mc - DMatrix::<Complex64>::identity(d, d) * lam;
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::numerical("eigenvector computation failed"))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
        for &idx in order.iter().take(k) {
            let v = vt.row(idx).adjoint();
            vecs.push(v);
            logs.push(lam.ln());
        }
    }
    let v = DMatrix::from_columns(&vecs);
    let v_inv = v
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numerical("matrix logarithm: matrix is not diagonalizable"))?;
    let l = &v * DMatrix::from_diagonal(&DVector::from_vec(logs)) * v_inv;
    let re = l.map(|z| z.re);
    let im = l.map(|z| z.im).amax();
    if im > 1e-8 * re.amax().max(1.0) {
        return Err(Error::numerical(format!(
            "matrix logarithm has imaginary residue {im:e}"
        )));
    }
    Ok(re)
}

/// `R = −log(Φ)/dt`, `S̄ = (I − Φ)⁻¹a`, `Σ = Qres/dt`.
pub fn var1_to_ou(fit: &Var1Fit) -> Result<OuParams> {
    let d = fit.phi.nrows();
    let log_phi = matrix_log(&fit.phi)?;
    let r = log_phi / -fit.dt;
    let i_phi = DMatrix::<f64>::identity(d, d) - &fit.phi;
    let sv = i_phi.singular_values();
    if sv.min() <= 1e-14 * sv.max().max(1.0) {
        return Err(Error::numerical("no stationary mean (unit root): I − Phi is singular"));
    }
    let sbar = i_phi
        .lu()
        .solve(&fit.a)
        .ok_or_else(|| Error::numerical("no stationary mean (unit root): I − Phi is singular"))?;
    OuParams::new(r, sbar, linalg::symmetrize(&(&fit.qres / fit.dt)))
}

/// Sample covariance of increments divided by the sampling interval.
pub fn fit_bachelier(path: &MarketPath) -> Result<DMatrix<f64>> {
    let dt = check_path(path)?;
    let (x, y) = lagged(path);
    let (inc, _) = demean(&(y - x));
    let n = inc.nrows() as f64;
    Ok(linalg::symmetrize(&(inc.transpose() * &inc / ((n - 1.0) * dt))))
}

/// 95% trace-test critical values, constant in the error-correction term and
/// no trend, indexed by `d − r = 1..=5`.
pub const TRACE_CRITICAL_95: [f64; 5] = [3.8415, 15.4943, 29.7961, 47.8545, 69.8189];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JohansenResult {
    /// Statistic for the null `rank ≤ r`, `r = 0..d`.
    pub trace_stats: Vec<f64>,
    pub critical_values_95: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub selected_rank: usize,
    /// `d × selected_rank`, leading eigenvectors as columns.
    #[serde(serialize_with = "ser_mat")]
    pub coint_vectors: DMatrix<f64>,
    /// All `d` eigenvectors, ordered like `eigenvalues`.
    #[serde(serialize_with = "ser_mat")]
    pub all_vectors: DMatrix<f64>,
    pub n_obs: usize,
}

impl JohansenResult {
    /// Rows of the classical report: null, statistic, critical value, verdict.
    pub fn table(&self) -> Vec<(String, f64, f64, &'static str)> {
        self.trace_stats
            .iter()
            .zip(&self.critical_values_95)
            .enumerate()
            .map(|(r, (&s, &c))| {
                (format!("r <= {r}"), s, c, if s > c { "Rejected" } else { "Not rejected" })
            })
            .collect()
    }
}

/// Johansen trace test for `ΔS_t = a + Π S_{t−1} + ε_t` (lag one, constant).
///
/// Ranks are tested upward from zero; the first null that is not rejected at
/// 95% gives the selected rank.
pub fn johansen_trace(path: &MarketPath) -> Result<JohansenResult> {
    let d = path.dim();
    if d == 0 || d > TRACE_CRITICAL_95.len() {
        return Err(Error::validation(format!(
            "Johansen test supports 1 to {} assets, got {d}",
            TRACE_CRITICAL_95.len()
        )));
    }
    let n = path.len().saturating_sub(1);
    if n < 10 * d {
        return Err(Error::validation(format!(
            "Johansen test needs at least {} transitions, got {n}",
            10 * d
        )));
    }
    let (lag, next) = lagged(path);
    let (r0, _) = demean(&(next - &lag));
    let (r1, _) = demean(&lag);
    let nf = n as f64;
    let s00 = linalg::symmetrize(&(r0.transpose() * &r0 / nf));
    let s11 = linalg::symmetrize(&(r1.transpose() * &r1 / nf));
    let s01 = r0.transpose() * &r1 / nf;
    let degenerate = || Error::numerical("degenerate covariance in Johansen test");
    let c00 = Cholesky::new(s00).ok_or_else(degenerate)?;
    let c11 = Cholesky::new(s11).ok_or_else(degenerate)?;
    let l11 = c11.l();
    // L⁻¹ S10 S00⁻¹ S01 L⁻ᵀ is symmetric with the canonical correlations.
    let s10 = s01.transpose();
    let left = l11
        .solve_lower_triangular(&s10)
        .ok_or_else(degenerate)?;
    let mid = &left * c00.solve(&left.transpose());
    let eig = SymmetricEigen::new(linalg::symmetrize(&mid));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambdas: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].clamp(0.0, 1.0 - 1e-15)).collect();
    let u = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    let vectors = l11
        .transpose()
        .solve_upper_triangular(&u)
        .ok_or_else(degenerate)?;

    let trace_stats: Vec<f64> = (0..d)
        .map(|r| -nf * lambdas[r..].iter().map(|l| (1.0 - l).ln()).sum::<f64>())
        .collect();
    let critical: Vec<f64> = (0..d).map(|r| TRACE_CRITICAL_95[d - r - 1]).collect();
    let selected = (0..d).find(|&r| trace_stats[r] <= critical[r]).unwrap_or(d);
    Ok(JohansenResult {
        coint_vectors: vectors.columns(0, selected).into_owned(),
        all_vectors: vectors,
        trace_stats,
        critical_values_95: critical,
        eigenvalues: lambdas,
        selected_rank: selected,
        n_obs: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_from(rows: &[Vec<f64>], dt: f64) -> MarketPath {
        let d = rows[0].len();
        let prices = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        let times = (0..rows.len()).map(|i| i as f64 * dt).collect();
        MarketPath::new(times, prices, MarketPath::default_names(d)).unwrap()
    }

    #[test]
    fn constant_path_is_rank_deficient() {
        let rows = vec![vec![5.0]; 20];
        let err = fit_var1(&path_from(&rows, 0.1)).unwrap_err().to_string();
        assert!(err.contains("rank-deficient") && err.contains("S1"), "{err}");
    }

    #[test]
    fn scalar_inversion() {
        let (r, sbar, dt) = (3.0, 40.0, 0.01);
        let phi = (-r * dt as f64).exp();
        let fit = Var1Fit {
            phi: DMatrix::from_element(1, 1, phi),
            a: DVector::from_element(1, sbar * (1.0 - phi)),
            qres: DMatrix::from_element(1, 1, 0.5),
            dt,
            n_obs: 100,
            diagnostics: FitDiagnostics {
                r_squared: vec![],
                residual_mean: vec![],
                residual_std: vec![],
            },
        };
        let ou = var1_to_ou(&fit).unwrap();
        assert!((ou.r[(0, 0)] - r).abs() < 1e-12);
        assert!((ou.sbar[0] - sbar).abs() < 1e-10);

        let unit = Var1Fit {
            phi: DMatrix::identity(1, 1),
            a: DVector::from_element(1, 1.0),
            ..fit.clone()
        };
        assert!(var1_to_ou(&unit).unwrap_err().to_string().contains("unit root"));
        let neg = Var1Fit {
            phi: DMatrix::from_element(1, 1, -0.5),
            ..fit
        };
        assert!(var1_to_ou(&neg).unwrap_err().to_string().contains("logarithm undefined"));
    }

    #[test]
    fn linear_path_has_zero_bachelier_covariance() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![1.0 + 2.0 * i as f64, 3.0 - i as f64]).collect();
        let s = fit_bachelier(&path_from(&rows, 0.5)).unwrap();
        assert!(s.amax() < 1e-20);
    }

    #[test]
    fn non_uniform_sampling_rejected() {
        let times = vec![0.0, 1.0, 2.0, 3.5, 4.5, 5.5];
        let prices = DMatrix::from_fn(6, 1, |i, _| i as f64 * i as f64);
        let p = MarketPath::new(times, prices, MarketPath::default_names(1)).unwrap();
        assert!(fit_var1(&p).unwrap_err().to_string().contains("non-uniform"));
    }
}
