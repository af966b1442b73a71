//! Exact OU sampling, strategy rollouts and Monte Carlo PnL studies.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ExecutionSpec, ExecutionState, MarketPath, OuParams, TimeGrid};
use crate::strategy::{AffineSchedule, Strategy};

/// Exact transition of the OU process over a fixed `dt`:
/// `S' = S̄ + e^{−R dt}(S − S̄) + L ε` with `LLᵀ = Σ_dt`.
#[derive(Debug, Clone)]
pub struct OuStepper {
    d: usize,
    pub dt: f64,
    sbar: Vec<f64>,
    decay: Vec<f64>,
    factor: Vec<f64>,
}

impl OuStepper {
    pub fn new(ou: &OuParams, dt: f64) -> Result<Self> {
        if !(dt >= 0.0) {
            return Err(Error::validation(format!("time step must be non-negative, got {dt}")));
        }
        let d = ou.dim();
        let decay = linalg::matrix_exp(&(&ou.r * -dt))?;
        let cov = linalg::integrated_covariance(ou, dt)?.value;
        let factor = covariance_factor(&cov)?;
        let flat = |m: &DMatrix<f64>| (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
        Ok(OuStepper {
            d,
            dt,
            sbar: ou.sbar.iter().copied().collect(),
            decay: flat(&decay),
            factor: flat(&factor),
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn step_into(&self, s: &[f64], noise: &[f64], out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let mut x = self.sbar[i];
            for j in 0..d {
                x += self.decay[i * d + j] * (s[j] - self.sbar[j]) + self.factor[i * d + j] * noise[j];
            }
            out[i] = x;
        }
    }

    pub fn step(&self, s: &DVector<f64>, noise: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.d);
        self.step_into(s.as_slice(), noise.as_slice(), out.as_mut_slice());
        out
    }
}

/// Cholesky factor, or a symmetric square root when the covariance is only
/// semi-definite.
fn covariance_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let rho = eig.eigenvalues.amax();
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -1e-10 * rho) {
        return Err(Error::numerical(format!(
            "transition covariance has negative eigenvalue {bad:e}"
        )));
    }
    let v = &eig.eigenvectors;
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(v * DMatrix::from_diagonal(&root) * v.transpose())
}

pub fn ou_step_exact(ou: &OuParams, s: &DVector<f64>, dt: f64, noise: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(OuStepper::new(ou, dt)?.step(s, noise))
}

/// One `ChaCha8` stream per path, so each path's draws depend only on the
/// master seed and its index.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Simulated path on a uniform grid starting at `s0`.
pub fn simulate_path<R: Rng>(ou: &OuParams, grid: &TimeGrid, s0: &DVector<f64>, rng: &mut R) -> Result<MarketPath> {
    let stepper = OuStepper::new(ou, grid.dt())?;
    let d = ou.dim();
    let n = grid.steps();
    let mut prices = DMatrix::zeros(n + 1, d);
    let mut cur: Vec<f64> = s0.iter().copied().collect();
    let mut next = vec![0.0; d];
    let mut noise = vec![0.0; d];
    prices.row_mut(0).copy_from_slice(&cur);
    for k in 1..=n {
        for z in noise.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        stepper.step_into(&cur, &noise, &mut next);
        std::mem::swap(&mut cur, &mut next);
        prices.row_mut(k).copy_from_slice(&cur);
    }
    MarketPath::new(grid.times(), prices, MarketPath::default_names(d))
}

/// Inventory, both price processes and both cash accounts of one trader.
struct Book {
    d: usize,
    q: Vec<f64>,
    s: Vec<f64>,
    s_tilde: Vec<f64>,
    /// Cash paid at market prices.
    x: f64,
    /// Cash valued at fundamental prices.
    x_fund: f64,
}

struct CostModel {
    eta: Vec<f64>,
    k: Vec<f64>,
    has_impact: bool,
}

impl CostModel {
    fn new(exec: &ExecutionSpec) -> Self {
        let d = exec.dim();
        let flat = |m: &DMatrix<f64>| (0..d * d).map(|i| m[(i / d, i % d)]).collect::<Vec<f64>>();
        CostModel {
            eta: flat(&exec.eta),
            k: flat(&exec.k),
            has_impact: exec.k.iter().any(|&x| x != 0.0),
        }
    }

    fn quad(m: &[f64], v: &[f64]) -> f64 {
        let d = v.len();
        let mut acc = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += m[i * d + j] * v[j];
            }
            acc += v[i] * row;
        }
        acc
    }
}

impl Book {
    /// Trades at rate `v` over `dt`, then moves fundamental prices to
    /// `s_next`.
    ///
    /// Market cash also carries `−½vᵀKv·dt²`, the impact accrued inside the
    /// step, so the market and fundamental accounts differ by exactly
    /// `−½q₀ᵀKq₀` at all times.
    #[inline]
    fn trade(&mut self, costs: &CostModel, v: &[f64], dt: f64, s_next: &[f64]) {
        let d = self.d;
        let exec_cost = CostModel::quad(&costs.eta, v) * dt;
        let mut paid_market = 0.0;
        let mut paid_fund = 0.0;
        for i in 0..d {
            paid_market += v[i] * self.s_tilde[i];
            paid_fund += v[i] * self.s[i];
        }
        self.x -= paid_market * dt + exec_cost;
        self.x_fund -= paid_fund * dt + exec_cost;
        if costs.has_impact {
            self.x -= 0.5 * CostModel::quad(&costs.k, v) * dt * dt;
        }
        for i in 0..d {
            let mut impact = 0.0;
            if costs.has_impact {
                for j in 0..d {
                    impact += costs.k[i * d + j] * v[j];
                }
            }
            self.q[i] += v[i] * dt;
            self.s_tilde[i] += (s_next[i] - self.s[i]) + impact * dt;
            self.s[i] = s_next[i];
        }
    }

    fn mark(&self) -> f64 {
        self.x + self.q.iter().zip(&self.s_tilde).map(|(q, s)| q * s).sum::<f64>()
    }
}

/// Per-step record of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub times: Vec<f64>,
    /// `(N+1) × d`.
    pub q: DMatrix<f64>,
    /// `N × d`; rate held over `[t_k, t_{k+1})`.
    pub v: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub s_tilde: DMatrix<f64>,
    /// Market cash.
    pub x: Vec<f64>,
    /// Cash valued at fundamental prices.
    pub x_fundamental: Vec<f64>,
    /// `X_k + q_kᵀS̃_k − X_0 − q_0ᵀS̃_0`.
    pub pnl: Vec<f64>,
}

impl ExecutionTrace {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, k: usize) -> ExecutionState {
        ExecutionState {
            t: self.times[k],
            q: self.q.row(k).transpose(),
            s: self.s.row(k).transpose(),
            s_tilde: self.s_tilde.row(k).transpose(),
            x: self.x[k],
        }
    }

    /// State at the last bar, with the fundamental cash account.
    pub fn final_fundamental_state(&self) -> ExecutionState {
        let n = self.steps();
        ExecutionState {
            x: self.x_fundamental[n],
            ..self.state(n)
        }
    }

    /// `Σ v_kᵀηv_k Δt_k`.
    pub fn execution_cost(&self, exec: &ExecutionSpec) -> f64 {
        (0..self.steps())
            .map(|k| {
                let v = self.v.row(k).transpose();
                v.dot(&(&exec.eta * &v)) * (self.times[k + 1] - self.times[k])
            })
            .sum()
    }
}

/// Rolls `strategy` along a supplied price path. The path's first row must
/// be the initial fundamental price; bar times are taken relative to the
/// first timestamp and must end at `T`.
pub fn rollout(
    strategy: &Strategy,
    exec: &ExecutionSpec,
    initial: &ExecutionState,
    path: &MarketPath,
) -> Result<ExecutionTrace> {
    let d = exec.dim();
    if path.dim() != d || initial.q.len() != d {
        return Err(Error::validation("dimension mismatch between path, state and spec"));
    }
    let s0 = path.price(0);
    let scale = s0.amax().max(1.0);
    if (&s0 - &initial.s).amax() > 1e-12 * scale {
        return Err(Error::validation("initial fundamental price differs from the path's first row"));
    }
    let t0 = path.times[0];
    let times: Vec<f64> = path.times.iter().map(|t| t - t0).collect();
    let sched = strategy.schedule(&times)?;
    let n = times.len() - 1;
    let costs = CostModel::new(exec);

    let mut book = Book {
        d,
        q: initial.q.iter().copied().collect(),
        s: initial.s.iter().copied().collect(),
        s_tilde: initial.s_tilde.iter().copied().collect(),
        x: initial.x,
        x_fund: initial.x,
    };
    let mut tr = ExecutionTrace {
        times: times.clone(),
        q: DMatrix::zeros(n + 1, d),
        v: DMatrix::zeros(n, d),
        s: DMatrix::zeros(n + 1, d),
        s_tilde: DMatrix::zeros(n + 1, d),
        x: vec![0.0; n + 1],
        x_fundamental: vec![0.0; n + 1],
        pnl: vec![0.0; n + 1],
    };
    let record = |tr: &mut ExecutionTrace, k: usize, b: &Book, m0: f64| {
        tr.q.row_mut(k).copy_from_slice(&b.q);
        tr.s.row_mut(k).copy_from_slice(&b.s);
        tr.s_tilde.row_mut(k).copy_from_slice(&b.s_tilde);
        tr.x[k] = b.x;
        tr.x_fundamental[k] = b.x_fund;
        tr.pnl[k] = if k == 0 { 0.0 } else { b.mark() - m0 };
    };
    let m0 = book.mark();
    record(&mut tr, 0, &book, m0);
    let mut v = vec![0.0; d];
    for k in 0..n {
        sched.rate_into(k, &book.q, &book.s, &mut v);
        let s_next: Vec<f64> = path.prices.row(k + 1).iter().copied().collect();
        book.trade(&costs, &v, times[k + 1] - times[k], &s_next);
        if !book.mark().is_finite() || book.q.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(format!("non-finite state at step {}", k + 1)));
        }
        tr.v.row_mut(k).copy_from_slice(&v);
        record(&mut tr, k + 1, &book, m0);
    }
    Ok(tr)
}

/// Terminal quantities of one simulated path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathOutcome {
    /// `X_T + q_TᵀS̃_T − X_0 − q_0ᵀS̃_0`.
    pub pnl: f64,
    /// PnL net of the terminal penalty `q_TᵀΓ̃q_T`.
    pub penalized_pnl: f64,
    /// Largest `|q_T|` component.
    pub terminal_inventory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Bars per path; the rollout grid is uniform on `[0, T]`.
    pub steps: usize,
    pub bins: usize,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64, steps: usize) -> Self {
        McConfig {
            n_paths,
            seed,
            steps,
            bins: 60,
            workers: None,
        }
    }
}

fn simulate_one(
    sched: &AffineSchedule,
    stepper: &OuStepper,
    costs: &CostModel,
    gamma_tilde: &[f64],
    initial: &ExecutionState,
    seed: u64,
    index: usize,
) -> Result<PathOutcome> {
    let d = stepper.dim();
    let mut rng = path_rng(seed, index as u64);
    let mut book = Book {
        d,
        q: initial.q.iter().copied().collect(),
        s: initial.s.iter().copied().collect(),
        s_tilde: initial.s_tilde.iter().copied().collect(),
        x: initial.x,
        x_fund: initial.x,
    };
    let m0 = book.mark();
    let mut v = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut s_next = vec![0.0; d];
    for k in 0..sched.steps() {
        sched.rate_into(k, &book.q, &book.s, &mut v);
        for z in noise.iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        stepper.step_into(&book.s, &noise, &mut s_next);
        book.trade(costs, &v, stepper.dt, &s_next);
    }
    let pnl = book.mark() - m0;
    if !pnl.is_finite() {
        return Err(Error::numerical(format!("path {index}: non-finite PnL")));
    }
    Ok(PathOutcome {
        pnl,
        penalized_pnl: pnl - CostModel::quad(gamma_tilde, &book.q),
        terminal_inventory: book.q.iter().fold(0.0, |a, x| a.max(x.abs())),
    })
}

/// Simulates `cfg.n_paths` independent paths from `initial` and rolls the
/// strategy along each. Results are ordered by path index and do not depend
/// on the number of workers.
pub fn monte_carlo_outcomes(
    strategy: &Strategy,
    ou: &OuParams,
    exec: &ExecutionSpec,
    initial: &ExecutionState,
    cfg: &McConfig,
) -> Result<Vec<PathOutcome>> {
    if cfg.n_paths == 0 {
        return Err(Error::validation("need at least one path"));
    }
    let grid = TimeGrid::new(exec.horizon, cfg.steps)?;
    let sched = strategy.schedule(&grid.times())?;
    let stepper = OuStepper::new(ou, grid.dt())?;
    let costs = CostModel::new(exec);
    let d = exec.dim();
    let gt: Vec<f64> = (0..d * d).map(|i| exec.gamma_tilde[(i / d, i % d)]).collect();
    let run = || -> Result<Vec<PathOutcome>> {
        (0..cfg.n_paths)
            .into_par_iter()
            .map(|i| simulate_one(&sched, &stepper, &costs, &gt, initial, cfg.seed, i))
            .collect()
    };
    match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::numerical(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PnLSummary {
    pub n_paths: usize,
    pub mean: f64,
    pub stdev: f64,
    pub skewness: f64,
    pub histogram: Histogram,
    pub seed: u64,
}

/// Sample mean, standard deviation (`n − 1`) and moment skewness.
pub fn moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let sd = if x.len() > 1 { (m2 * n / (n - 1.0)).sqrt() } else { 0.0 };
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    (mean, sd, skew)
}

/// Equal-width bins over `mean ± 4·stdev`; values outside fall into the end
/// bins, so the counts always sum to the sample size.
pub fn histogram(x: &[f64], mean: f64, stdev: f64, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let half = if stdev > 0.0 { 4.0 * stdev } else { 0.5 * mean.abs().max(1.0) };
    let (lo, hi) = (mean - half, mean + half);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0usize; bins];
    for &v in x {
        let idx = ((v - lo) / width).floor();
        let idx = if idx.is_nan() { 0 } else { idx.clamp(0.0, (bins - 1) as f64) as usize };
        counts[idx] += 1;
    }
    Histogram { edges, counts }
}

pub fn summarize(pnls: &[f64], seed: u64, bins: usize) -> PnLSummary {
    let (mean, stdev, skewness) = moments(pnls);
    PnLSummary {
        n_paths: pnls.len(),
        mean,
        stdev,
        skewness,
        histogram: histogram(pnls, mean, stdev, bins),
        seed,
    }
}

pub fn monte_carlo_pnl(
    strategy: &Strategy,
    ou: &OuParams,
    exec: &ExecutionSpec,
    initial: &ExecutionState,
    cfg: &McConfig,
) -> Result<PnLSummary> {
    let out = monte_carlo_outcomes(strategy, ou, exec, initial, cfg)?;
    let pnls: Vec<f64> = out.iter().map(|o| o.pnl).collect();
    Ok(summarize(&pnls, cfg.seed, cfg.bins))
}
