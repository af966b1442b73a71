//! Domain types and parameter validation.
//!
//! Units: time in days, prices in currency per share, inventories in shares,
//! trading rates in shares per day.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative eigenvalue tolerance for PSD checks.
pub const PSD_TOL: f64 = 1e-10;

/// Price model `dS = R(S̄ − S) dt + V dW` with `Σ = VVᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OuParamsJson", into = "OuParamsJson")]
pub struct OuParams {
    /// Mean-reversion generator (1/day).
    pub r: DMatrix<f64>,
    /// Long-run mean (currency).
    pub sbar: DVector<f64>,
    /// Instantaneous covariance (currency²/day).
    pub sigma: DMatrix<f64>,
}

impl OuParams {
    /// Checks shapes, finiteness and that `Σ` is symmetric PSD.
    pub fn new(r: DMatrix<f64>, sbar: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let ou = OuParams { r, sbar, sigma };
        let issues = ou.violations();
        if issues.is_empty() {
            Ok(OuParams {
                sigma: linalg::symmetrize(&ou.sigma),
                ..ou
            })
        } else {
            Err(Error::validation(join(&issues)))
        }
    }

    pub fn dim(&self) -> usize {
        self.sbar.len()
    }

    /// Same `Σ` and `S̄` with `R = 0` (arithmetic Brownian prices).
    pub fn brownian(sbar: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = sbar.len();
        OuParams::new(DMatrix::zeros(d, d), sbar, sigma)
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let d = self.sbar.len();
        if d == 0 {
            out.push(Violation::new(ViolationKind::Shape, "dimension must be positive"));
            return out;
        }
        for (name, m) in [("R", &self.r), ("Sigma", &self.sigma)] {
            if m.shape() != (d, d) {
                out.push(Violation::new(
                    ViolationKind::Shape,
                    format!("{name} is {}x{}, expected {d}x{d}", m.nrows(), m.ncols()),
                ));
            }
        }
        if !out.is_empty() {
            return out;
        }
        let finite = self.r.iter().chain(self.sbar.iter()).chain(self.sigma.iter());
        if let Some(x) = finite.into_iter().find(|x| !x.is_finite()) {
            out.push(Violation::new(
                ViolationKind::NonFinite,
                format!("OU parameters contain a non-finite entry ({x})"),
            ));
            return out;
        }
        if !linalg::is_symmetric(&self.sigma, 1e-12) {
            out.push(Violation::new(ViolationKind::NotSymmetric, "Sigma not symmetric"));
        }
        if !linalg::is_psd(&self.sigma, PSD_TOL) {
            out.push(Violation::new(
                ViolationKind::NotPsd,
                format!(
                    "Sigma not PSD (min eigenvalue {:e})",
                    linalg::min_eigenvalue(&self.sigma)
                ),
            ));
        }
        out
    }
}

/// Execution costs, penalties and preferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ExecutionSpecJson", into = "ExecutionSpecJson")]
pub struct ExecutionSpec {
    /// Temporary impact: `L(v) = vᵀηv` (currency·day/share²).
    pub eta: DMatrix<f64>,
    /// Permanent impact (currency/share²).
    pub k: DMatrix<f64>,
    /// Terminal penalty on market-price accounting (currency/share²).
    pub gamma_tilde: DMatrix<f64>,
    /// Absolute risk aversion (1/currency).
    pub risk_aversion: f64,
    /// Horizon (days).
    pub horizon: f64,
}

impl ExecutionSpec {
    /// Builds a spec and rejects it unless `η` is SPD, `K` symmetric and
    /// `Γ = Γ̃ − K/2` symmetric PSD.
    pub fn new(
        eta: DMatrix<f64>,
        k: DMatrix<f64>,
        gamma_tilde: DMatrix<f64>,
        risk_aversion: f64,
        horizon: f64,
    ) -> Result<Self> {
        let spec = ExecutionSpec {
            eta,
            k,
            gamma_tilde,
            risk_aversion,
            horizon,
        };
        let issues = spec.violations();
        if !issues.is_empty() {
            return Err(Error::validation(join(&issues)));
        }
        Ok(ExecutionSpec {
            eta: linalg::symmetrize(&spec.eta),
            k: linalg::symmetrize(&spec.k),
            gamma_tilde: linalg::symmetrize(&spec.gamma_tilde),
            ..spec
        })
    }

    /// Spec without permanent impact.
    pub fn without_impact(
        eta: DMatrix<f64>,
        gamma_tilde: DMatrix<f64>,
        risk_aversion: f64,
        horizon: f64,
    ) -> Result<Self> {
        let d = eta.nrows();
        ExecutionSpec::new(eta, DMatrix::zeros(d, d), gamma_tilde, risk_aversion, horizon)
    }

    pub fn dim(&self) -> usize {
        self.eta.nrows()
    }

    /// `Γ = Γ̃ − K/2`, the penalty in fundamental-price accounting.
    pub fn penalty(&self) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.gamma_tilde - &self.k * 0.5))
    }

    /// Copy with a different terminal penalty `Γ̃`.
    pub fn with_gamma_tilde(&self, gamma_tilde: DMatrix<f64>) -> Result<Self> {
        ExecutionSpec::new(
            self.eta.clone(),
            self.k.clone(),
            gamma_tilde,
            self.risk_aversion,
            self.horizon,
        )
    }

    /// Copy whose derived `Γ` is zero (`Γ̃ = K/2`).
    pub fn without_penalty(&self) -> Result<Self> {
        self.with_gamma_tilde(&self.k * 0.5)
    }

    fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let d = self.eta.nrows();
        if d == 0 {
            out.push(Violation::new(ViolationKind::Shape, "eta must be non-empty"));
            return out;
        }
        for (name, m) in [("eta", &self.eta), ("K", &self.k), ("GammaTilde", &self.gamma_tilde)] {
            if m.shape() != (d, d) {
                out.push(Violation::new(
                    ViolationKind::Shape,
                    format!("{name} is {}x{}, expected {d}x{d}", m.nrows(), m.ncols()),
                ));
            }
        }
        if !out.is_empty() {
            return out;
        }
        let entries = self.eta.iter().chain(self.k.iter()).chain(self.gamma_tilde.iter());
        if entries.into_iter().any(|x| !x.is_finite()) {
            out.push(Violation::new(
                ViolationKind::NonFinite,
                "execution parameters contain a non-finite entry",
            ));
            return out;
        }
        if !(self.risk_aversion > 0.0 && self.risk_aversion.is_finite()) {
            out.push(Violation::new(
                ViolationKind::NotPositive,
                format!("gamma must be positive, got {}", self.risk_aversion),
            ));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            out.push(Violation::new(
                ViolationKind::NotPositive,
                format!("T must be positive, got {}", self.horizon),
            ));
        }
        for (name, m) in [("eta", &self.eta), ("K", &self.k), ("GammaTilde", &self.gamma_tilde)] {
            if !linalg::is_symmetric(m, 1e-12) {
                out.push(Violation::new(
                    ViolationKind::NotSymmetric,
                    format!("{name} not symmetric"),
                ));
            }
        }
        let eta_min = linalg::min_eigenvalue(&self.eta);
        if !(eta_min > 0.0) {
            out.push(Violation::new(
                ViolationKind::NotPositiveDefinite,
                format!("eta not positive definite (min eigenvalue {eta_min:e})"),
            ));
        }
        let gamma = self.penalty();
        if !linalg::is_psd(&gamma, PSD_TOL) {
            out.push(Violation::new(
                ViolationKind::NotPsd,
                format!(
                    "Gamma = GammaTilde − K/2 not PSD (min eigenvalue {:e})",
                    linalg::min_eigenvalue(&gamma)
                ),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Shape,
    NonFinite,
    NotPositive,
    NotSymmetric,
    NotPositiveDefinite,
    NotPsd,
}

/// One failed invariant with a human-readable description.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl Violation {
    fn new(kind: ViolationKind, message: impl Into<String>) -> Self {
        Violation {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.message.as_str()).collect::<Vec<_>>().join("; ")
}

/// Every violated invariant of the pair; empty when both are usable together.
pub fn validate_spec(ou: &OuParams, exec: &ExecutionSpec) -> Vec<Violation> {
    let mut out = ou.violations();
    out.extend(exec.violations());
    if exec.eta.nrows() != ou.dim() {
        out.push(Violation::new(
            ViolationKind::Shape,
            format!(
                "execution spec has dimension {}, price model has {}",
                exec.eta.nrows(),
                ou.dim()
            ),
        ));
    }
    out
}

pub(crate) fn ensure_valid(ou: &OuParams, exec: &ExecutionSpec) -> Result<()> {
    let v = validate_spec(ou, exec);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::validation(join(&v)))
    }
}

/// Uniform grid `t_k = kT/N`, `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::validation(format!("grid horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::validation(format!("grid needs at least 2 steps, got {steps}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// `t_k`; the last node is exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Interval index `k` and weight `w` with `t = (1−w)·t_k + w·t_{k+1}`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::Range(format!("t = {t}"), format!("[0, {}]", self.horizon)));
        }
        let x = (t / self.dt()).clamp(0.0, self.steps as f64);
        let k = (x.floor() as usize).min(self.steps - 1);
        Ok((k, (x - k as f64).clamp(0.0, 1.0)))
    }
}

/// Timestamped price series.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketPath {
    pub times: Vec<f64>,
    /// One row per timestamp, one column per asset.
    pub prices: DMatrix<f64>,
    pub names: Vec<String>,
}

impl MarketPath {
    pub fn new(times: Vec<f64>, prices: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if times.len() != prices.nrows() {
            return Err(Error::validation(format!(
                "{} timestamps but {} price rows",
                times.len(),
                prices.nrows()
            )));
        }
        if names.len() != prices.ncols() {
            return Err(Error::validation(format!(
                "{} asset names but {} price columns",
                names.len(),
                prices.ncols()
            )));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::validation(format!(
                "timestamps not strictly increasing at row {}",
                i + 1
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::validation("non-finite timestamp"));
        }
        for (i, row) in prices.row_iter().enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("non-finite price at row {i}")));
            }
        }
        Ok(MarketPath {
            times,
            prices,
            names,
        })
    }

    /// Generic column names `S1..Sd`.
    pub fn default_names(d: usize) -> Vec<String> {
        (1..=d).map(|i| format!("S{i}")).collect()
    }

    pub fn dim(&self) -> usize {
        self.prices.ncols()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn price(&self, k: usize) -> DVector<f64> {
        self.prices.row(k).transpose()
    }

    /// Median sampling interval, after checking that no interval deviates
    /// from it by more than 1%.
    pub fn uniform_dt(&self) -> Result<f64> {
        if self.times.len() < 2 {
            return Err(Error::validation("path needs at least two observations"));
        }
        let mut dts: Vec<f64> = self.times.windows(2).map(|w| w[1] - w[0]).collect();
        let raw = dts.clone();
        dts.sort_by(f64::total_cmp);
        let median = dts[dts.len() / 2];
        if let Some(i) = raw.iter().position(|x| (x - median).abs() > 0.01 * median) {
            return Err(Error::validation(format!(
                "non-uniform sampling: interval {} is {:e} vs median {:e}",
                i + 1,
                raw[i],
                median
            )));
        }
        Ok(median)
    }
}

/// Trader state; `s` is the fundamental price, `s_tilde` the market price
/// including permanent impact.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionState {
    pub t: f64,
    pub q: DVector<f64>,
    pub s: DVector<f64>,
    pub s_tilde: DVector<f64>,
    pub x: f64,
}

impl ExecutionState {
    /// State at `t = 0` before any trade, so `S̃ = S`.
    pub fn initial(q: DVector<f64>, s: DVector<f64>, x: f64) -> Self {
        ExecutionState {
            t: 0.0,
            q,
            s_tilde: s.clone(),
            s,
            x,
        }
    }
}

/// Liquidation value net of the terminal penalty.
///
/// Market accounting: `X + qᵀS̃ − qᵀΓ̃q`. Fundamental accounting:
/// `X + qᵀS − qᵀΓq`. Pass the cash process that matches the accounting.
pub fn terminal_wealth(state: &ExecutionState, exec: &ExecutionSpec, use_market_price: bool) -> f64 {
    let q = &state.q;
    if use_market_price {
        state.x + q.dot(&state.s_tilde) - q.dot(&(&exec.gamma_tilde * q))
    } else {
        state.x + q.dot(&state.s) - q.dot(&(exec.penalty() * q))
    }
}

type Rows = Vec<Vec<f64>>;

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &Rows, what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::validation(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

#[derive(Serialize, Deserialize)]
struct OuParamsJson {
    d: usize,
    #[serde(rename = "R")]
    r: Rows,
    #[serde(rename = "Sbar")]
    sbar: Vec<f64>,
    #[serde(rename = "Sigma")]
    sigma: Rows,
}

impl TryFrom<OuParamsJson> for OuParams {
    type Error = Error;

    fn try_from(j: OuParamsJson) -> Result<Self> {
        if j.sbar.len() != j.d {
            return Err(Error::validation(format!(
                "d = {} but Sbar has {} entries",
                j.d,
                j.sbar.len()
            )));
        }
        OuParams::new(
            from_rows(&j.r, "R")?,
            DVector::from_vec(j.sbar),
            from_rows(&j.sigma, "Sigma")?,
        )
    }
}

impl From<OuParams> for OuParamsJson {
    fn from(p: OuParams) -> Self {
        OuParamsJson {
            d: p.dim(),
            r: to_rows(&p.r),
            sbar: p.sbar.iter().copied().collect(),
            sigma: to_rows(&p.sigma),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ExecutionSpecJson {
    eta: Rows,
    #[serde(rename = "K", default)]
    k: Option<Rows>,
    #[serde(rename = "GammaTilde")]
    gamma_tilde: Rows,
    gamma: f64,
    #[serde(rename = "T")]
    horizon: f64,
}

impl TryFrom<ExecutionSpecJson> for ExecutionSpec {
    type Error = Error;

    fn try_from(j: ExecutionSpecJson) -> Result<Self> {
        let eta = from_rows(&j.eta, "eta")?;
        let d = eta.nrows();
        let k = match j.k {
            Some(rows) => from_rows(&rows, "K")?,
            None => DMatrix::zeros(d, d),
        };
        ExecutionSpec::new(eta, k, from_rows(&j.gamma_tilde, "GammaTilde")?, j.gamma, j.horizon)
    }
}

impl From<ExecutionSpec> for ExecutionSpecJson {
    fn from(e: ExecutionSpec) -> Self {
        ExecutionSpecJson {
            eta: to_rows(&e.eta),
            k: Some(to_rows(&e.k)),
            gamma_tilde: to_rows(&e.gamma_tilde),
            gamma: e.risk_aversion,
            horizon: e.horizon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(d: usize) -> DMatrix<f64> {
        DMatrix::identity(d, d)
    }

    #[test]
    fn zero_sigma_is_valid() {
        let ou = OuParams {
            r: eye(2),
            sbar: DVector::zeros(2),
            sigma: DMatrix::zeros(2, 2),
        };
        let exec = ExecutionSpec::without_impact(eye(2), eye(2), 1.0, 1.0).unwrap();
        assert!(validate_spec(&ou, &exec).is_empty());
    }

    #[test]
    fn negative_eta_reported() {
        let ou = OuParams::new(eye(1), DVector::zeros(1), eye(1)).unwrap();
        let exec = ExecutionSpec {
            eta: -eye(1),
            k: DMatrix::zeros(1, 1),
            gamma_tilde: eye(1),
            risk_aversion: 1.0,
            horizon: 1.0,
        };
        let v = validate_spec(&ou, &exec);
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("eta not positive definite"));
    }

    #[test]
    fn impact_larger_than_penalty_rejected() {
        let r = ExecutionSpec::new(eye(2), eye(2) * 300.0, eye(2) * 100.0, 1.0, 1.0);
        let msg = r.unwrap_err().to_string();
        assert!(msg.contains("Gamma = GammaTilde − K/2 not PSD"), "{msg}");
    }

    #[test]
    fn wealth_accountings() {
        let exec = ExecutionSpec::without_impact(eye(1), eye(1) * 100.0, 1.0, 1.0).unwrap();
        let mut st = ExecutionState::initial(DVector::zeros(1), DVector::from_element(1, 50.0), 7.0);
        assert_eq!(terminal_wealth(&st, &exec, true), 7.0);
        assert_eq!(terminal_wealth(&st, &exec, false), 7.0);
        st.q[0] = 3.0;
        assert_eq!(terminal_wealth(&st, &exec, true), terminal_wealth(&st, &exec, false));
    }

    #[test]
    fn json_round_trip_and_default_k() {
        let json = r#"{"eta":[[0.005]],"GammaTilde":[[100]],"gamma":2e-5,"T":1}"#;
        let e: ExecutionSpec = serde_json::from_str(json).unwrap();
        assert_eq!(e.k, DMatrix::zeros(1, 1));
        let back: ExecutionSpec = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
        assert_eq!(back, e);

        let json = r#"{"d":1,"R":[[5.1]],"Sbar":[79887],"Sigma":[[59375.0]]}"#;
        let p: OuParams = serde_json::from_str(json).unwrap();
        assert_eq!(p.r[(0, 0)], 5.1);
        let bad = r#"{"d":1,"R":[[5.1]],"Sbar":[1],"Sigma":[[-1]]}"#;
        assert!(serde_json::from_str::<OuParams>(bad).is_err());
    }

    #[test]
    fn grid_location() {
        let g = TimeGrid::new(2.0, 4).unwrap();
        assert_eq!(g.times(), vec![0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.locate(2.0).unwrap(), (3, 1.0));
        assert_eq!(g.locate(0.75).unwrap(), (1, 0.5));
        assert!(g.locate(2.1).is_err());
        assert!(TimeGrid::new(1.0, 1).is_err());
    }
}
