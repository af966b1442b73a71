//! Trading controls built from solutions: the optimal feedback law, the
//! Almgren-Chriss rate, the Merton target, TWAP and scaled variants.
//!
//! Every control here is affine in `(q, S)` between bars, so it is compiled
//! into an [`AffineSchedule`] on the bar grid before a rollout.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::closed_form::{BrownianClosedForm, MertonSolution};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ExecutionSpec, OuParams};
use crate::riccati::RiccatiSolution;

/// `H(p) = sup_v vᵀp − vᵀηv = ¼pᵀη⁻¹p`, attained at `v = ½η⁻¹p`.
pub fn hamiltonian(p: &DVector<f64>, exec: &ExecutionSpec) -> Result<(f64, DVector<f64>)> {
    let eta_inv = linalg::spd_inverse(&exec.eta, "eta")?;
    let v = &eta_inv * p * 0.5;
    Ok((0.5 * p.dot(&v), v))
}

/// `v* = ½η⁻¹(2A(t)q + B(t)S + D(t))`.
pub fn feedback_rate(
    sol: &RiccatiSolution,
    t: f64,
    q: &DVector<f64>,
    s: &DVector<f64>,
    exec: &ExecutionSpec,
) -> Result<DVector<f64>> {
    let st = sol.state_at(t)?;
    let eta_inv = linalg::spd_inverse(&exec.eta, "eta")?;
    Ok(eta_inv * (&st.a * q * 2.0 + &st.b * s + &st.d) * 0.5)
}

/// `η⁻¹A(t)q` with `A` from the Brownian closed form.
pub fn ac_rate(ou: &OuParams, exec: &ExecutionSpec, t: f64, q: &DVector<f64>) -> Result<DVector<f64>> {
    let a = BrownianClosedForm::new(ou, exec)?.a(t)?;
    let eta_inv = linalg::spd_inverse(&exec.eta, "eta")?;
    Ok(eta_inv * a * q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum StrategyKind {
    OptimalOU,
    AlmgrenChriss,
    Merton,
    #[serde(rename = "TWAP")]
    Twap,
    Scaled { base: Box<StrategyKind>, factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Liquidation,
    #[serde(rename = "statarb")]
    StatArb,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gamma: Option<f64>,
    #[serde(rename = "GammaTilde", skip_serializing_if = "Option::is_none", default)]
    pub gamma_tilde: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub q0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    #[serde(flatten)]
    pub kind: StrategyKind,
    pub mode: Mode,
    #[serde(default)]
    pub overrides: Overrides,
    /// Cap on each component of the Merton tracking rate (shares/day).
    /// Defaults to `10·max|q₀|/T`; no cap when that is zero.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_rate: Option<f64>,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, mode: Mode) -> Self {
        StrategyConfig {
            kind,
            mode,
            overrides: Overrides::default(),
            max_rate: None,
        }
    }

    /// Applies overrides, then the mode: statistical arbitrage forces a zero
    /// terminal penalty and a flat initial inventory.
    pub fn resolve(&self, exec: &ExecutionSpec, q0: &DVector<f64>) -> Result<(ExecutionSpec, DVector<f64>)> {
        let mut exec = exec.clone();
        let mut q0 = q0.clone();
        if let Some(g) = self.overrides.gamma {
            exec = ExecutionSpec::new(exec.eta, exec.k, exec.gamma_tilde, g, exec.horizon)?;
        }
        if let Some(rows) = &self.overrides.gamma_tilde {
            exec = exec.with_gamma_tilde(crate::model::from_rows(rows, "GammaTilde")?)?;
        }
        if let Some(q) = &self.overrides.q0 {
            q0 = DVector::from_column_slice(q);
        }
        if self.mode == Mode::StatArb {
            exec = exec.without_penalty()?;
            q0 = DVector::zeros(q0.len());
        }
        if q0.len() != exec.dim() {
            return Err(Error::validation(format!(
                "q0 has {} entries, expected {}",
                q0.len(),
                exec.dim()
            )));
        }
        Ok((exec, q0))
    }
}

/// Fits and solutions a strategy may need.
#[derive(Debug, Clone, Copy)]
pub struct StrategyInputs<'a> {
    pub ou: &'a OuParams,
    /// Covariance of the arithmetic Brownian model, for Almgren-Chriss.
    pub sigma_ac: Option<&'a DMatrix<f64>>,
    pub solution: Option<&'a RiccatiSolution>,
}

#[derive(Debug, Clone)]
enum Law {
    Feedback {
        sol: Arc<RiccatiSolution>,
        eta_inv: DMatrix<f64>,
    },
    AlmgrenChriss {
        cf: BrownianClosedForm,
        eta_inv: DMatrix<f64>,
    },
    Merton(MertonSolution),
    Twap(DVector<f64>),
    Scaled(Box<Law>, f64),
}

/// A compiled control with the execution spec and initial inventory it was
/// resolved against.
#[derive(Debug, Clone)]
pub struct Strategy {
    law: Law,
    pub config: StrategyConfig,
    pub exec: ExecutionSpec,
    pub q0: DVector<f64>,
    pub max_rate: Option<f64>,
}

/// Build-time limit on the condition number of `η`.
pub const MAX_ETA_CONDITION: f64 = 1e12;

pub fn build_strategy(
    config: &StrategyConfig,
    inputs: StrategyInputs<'_>,
    exec: &ExecutionSpec,
    q0: &DVector<f64>,
) -> Result<Strategy> {
    let (exec, q0) = config.resolve(exec, q0)?;
    if exec.dim() != inputs.ou.dim() {
        return Err(Error::validation("execution spec and price model dimensions differ"));
    }
    let cond = linalg::condition_number_spd(&exec.eta);
    if !(cond <= MAX_ETA_CONDITION) {
        return Err(Error::validation(format!(
            "eta is ill-conditioned (condition number {cond:e} > {MAX_ETA_CONDITION:e})"
        )));
    }
    let law = build_law(&config.kind, inputs, &exec, &q0)?;
    let default_cap = 10.0 * q0.amax() / exec.horizon;
    let max_rate = match config.max_rate {
        Some(c) if c > 0.0 => Some(c),
        Some(c) => return Err(Error::validation(format!("max rate must be positive, got {c}"))),
        None if default_cap > 0.0 => Some(default_cap),
        None => None,
    };
    Ok(Strategy {
        law,
        config: config.clone(),
        exec,
        q0,
        max_rate,
    })
}

fn build_law(kind: &StrategyKind, inputs: StrategyInputs<'_>, exec: &ExecutionSpec, q0: &DVector<f64>) -> Result<Law> {
    let eta_inv = || linalg::spd_inverse(&exec.eta, "eta");
    Ok(match kind {
        StrategyKind::OptimalOU => {
            let sol = inputs
                .solution
                .ok_or_else(|| Error::validation("OptimalOU strategy needs a Riccati solution"))?;
            if (sol.grid.horizon() - exec.horizon).abs() > 1e-12 * exec.horizon {
                return Err(Error::validation(format!(
                    "solution horizon {} differs from T = {}",
                    sol.grid.horizon(),
                    exec.horizon
                )));
            }
            let terminal_a = &sol.states[sol.grid.steps()].a;
            if (terminal_a + exec.penalty()).amax() > 1e-9 * exec.penalty().amax().max(1.0) {
                return Err(Error::validation(
                    "solution was computed for a different terminal penalty than this strategy uses",
                ));
            }
            Law::Feedback {
                sol: Arc::new(sol.clone()),
                eta_inv: eta_inv()?,
            }
        }
        StrategyKind::AlmgrenChriss => {
            let sigma = inputs.sigma_ac.unwrap_or(&inputs.ou.sigma);
            let ou_bm = OuParams::brownian(inputs.ou.sbar.clone(), sigma.clone())?;
            Law::AlmgrenChriss {
                cf: BrownianClosedForm::new(&ou_bm, exec)?,
                eta_inv: eta_inv()?,
            }
        }
        StrategyKind::Merton => Law::Merton(MertonSolution::new(inputs.ou, exec.risk_aversion, exec.horizon)?),
        StrategyKind::Twap => Law::Twap(-q0 / exec.horizon),
        StrategyKind::Scaled { base, factor } => {
            if !factor.is_finite() {
                return Err(Error::validation("scale factor must be finite"));
            }
            Law::Scaled(Box::new(build_law(base, inputs, exec, q0)?), *factor)
        }
    })
}

/// Per-bar affine rates `v_k = clamp(G_k q + H_k S + c_k)` on a fixed grid.
#[derive(Debug, Clone)]
pub struct AffineSchedule {
    d: usize,
    pub times: Vec<f64>,
    g: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
    c: Vec<DVector<f64>>,
    /// Row-major flattened copies for the hot loop.
    flat: Vec<f64>,
    cap: Option<f64>,
}

impl AffineSchedule {
    fn new(d: usize, times: Vec<f64>, cap: Option<f64>) -> Self {
        AffineSchedule {
            d,
            times,
            g: Vec::new(),
            h: Vec::new(),
            c: Vec::new(),
            flat: Vec::new(),
            cap,
        }
    }

    fn push(&mut self, g: DMatrix<f64>, h: DMatrix<f64>, c: DVector<f64>) {
        let d = self.d;
        for i in 0..d {
            for j in 0..d {
                self.flat.push(g[(i, j)]);
            }
            for j in 0..d {
                self.flat.push(h[(i, j)]);
            }
            self.flat.push(c[i]);
        }
        self.g.push(g);
        self.h.push(h);
        self.c.push(c);
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn steps(&self) -> usize {
        self.g.len()
    }

    /// Rate at bar `k`, written into `out`.
    #[inline]
    pub fn rate_into(&self, k: usize, q: &[f64], s: &[f64], out: &mut [f64]) {
        let d = self.d;
        let stride = 2 * d + 1;
        let base = k * d * stride;
        for i in 0..d {
            let row = &self.flat[base + i * stride..base + (i + 1) * stride];
            let mut v = row[2 * d];
            for j in 0..d {
                v += row[j] * q[j] + row[d + j] * s[j];
            }
            if let Some(cap) = self.cap {
                v = v.clamp(-cap, cap);
            }
            out[i] = v;
        }
    }

    pub fn rate(&self, k: usize, q: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d);
        self.rate_into(k, q.as_slice(), s.as_slice(), out.as_mut_slice());
        out
    }

    /// `(G_k, H_k, c_k)`.
    pub fn gains(&self, k: usize) -> (&DMatrix<f64>, &DMatrix<f64>, &DVector<f64>) {
        (&self.g[k], &self.h[k], &self.c[k])
    }
}

impl Strategy {
    pub fn kind(&self) -> &StrategyKind {
        &self.config.kind
    }

    pub fn dim(&self) -> usize {
        self.q0.len()
    }

    /// Compiles the control for bars at `times` (days from the start; the
    /// last entry must equal `T`).
    pub fn schedule(&self, times: &[f64]) -> Result<AffineSchedule> {
        let t_end = self.exec.horizon;
        if times.len() < 2 {
            return Err(Error::validation("schedule needs at least two bar times"));
        }
        if times[0].abs() > 1e-9 * t_end || (times[times.len() - 1] - t_end).abs() > 1e-9 * t_end {
            return Err(Error::validation(format!(
                "grid/horizon mismatch: bars span [{}, {}] but T = {t_end}",
                times[0],
                times[times.len() - 1]
            )));
        }
        let cap = match self.law_root() {
            Law::Merton(_) => self.max_rate,
            _ => None,
        };
        let mut sched = AffineSchedule::new(self.dim(), times.to_vec(), cap);
        for k in 0..times.len() - 1 {
            let t = times[k].clamp(0.0, t_end);
            let dt = times[k + 1] - times[k];
            let (g, h, c) = gains(&self.law, t, dt, self.dim())?;
            sched.push(g, h, c);
        }
        Ok(sched)
    }

    fn law_root(&self) -> &Law {
        let mut l = &self.law;
        while let Law::Scaled(inner, _) = l {
            l = inner;
        }
        l
    }

    /// The rate this strategy trades at `(t, q, S)`; `dt` is the bar length
    /// used by the Merton tracker.
    pub fn rate(&self, t: f64, dt: f64, q: &DVector<f64>, s: &DVector<f64>) -> Result<DVector<f64>> {
        let (g, h, c) = gains(&self.law, t, dt, self.dim())?;
        let mut v = g * q + h * s + c;
        if let (Law::Merton(_), Some(cap)) = (self.law_root(), self.max_rate) {
            v.apply(|x| *x = x.clamp(-cap, cap));
        }
        Ok(v)
    }
}

fn gains(law: &Law, t: f64, dt: f64, d: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    Ok(match law {
        Law::Feedback { sol, eta_inv } => {
            let st = sol.state_at(t)?;
            (eta_inv * &st.a, eta_inv * &st.b * 0.5, eta_inv * &st.d * 0.5)
        }
        Law::AlmgrenChriss { cf, eta_inv } => (eta_inv * cf.a(t)?, DMatrix::zeros(d, d), DVector::zeros(d)),
        Law::Merton(m) => {
            // q* = K(t)(S̄ − S); track it within one bar.
            let k = m.position(t, &DVector::zeros(d))?;
            let mut slope = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut e = DVector::zeros(d);
                e[j] = 1.0;
                let col = &k - m.position(t, &e)?;
                slope.set_column(j, &col);
            }
            (
                DMatrix::<f64>::identity(d, d) * (-1.0 / dt),
                slope * (-1.0 / dt),
                k / dt,
            )
        }
        Law::Twap(rate) => (DMatrix::zeros(d, d), DMatrix::zeros(d, d), rate.clone()),
        Law::Scaled(inner, f) => {
            let (g, h, c) = gains(inner, t, dt, d)?;
            (g * *f, h * *f, c * *f)
        }
    })
}
