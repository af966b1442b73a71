//! Backward solver for the coefficient ODEs of the quadratic ansatz
//! `θ(t,q,S) = qᵀAq + qᵀBS + SᵀCS + Dᵀq + EᵀS + F`.
//!
//! `(A, B, C)` form the block `P = [[A, B/2], [Bᵀ/2, C]]` which obeys the
//! matrix Riccati equation `P' = Q + YᵀP + PY + PUP`; `(D, E)` then solve a
//! linear system driven by `P`, and `F` is a quadrature. Every step is an
//! implicit Euler step taken backward from `T`, with a Newton solve for `P`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{self, ExecutionSpec, OuParams, TimeGrid};

/// Coefficients of `θ` at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct OdeState {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub e: DVector<f64>,
    pub f: f64,
}

impl OdeState {
    pub fn zeros(d: usize) -> Self {
        OdeState {
            a: DMatrix::zeros(d, d),
            b: DMatrix::zeros(d, d),
            c: DMatrix::zeros(d, d),
            d: DVector::zeros(d),
            e: DVector::zeros(d),
            f: 0.0,
        }
    }

    /// `A = −Γ`, everything else zero.
    pub fn terminal(exec: &ExecutionSpec) -> Self {
        OdeState {
            a: -exec.penalty(),
            ..OdeState::zeros(exec.dim())
        }
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn p_block(&self) -> PBlock {
        PBlock::from_abc(&self.a, &self.b, &self.c)
    }

    /// `(1−w)·self + w·other`, componentwise.
    pub fn lerp(&self, other: &OdeState, w: f64) -> OdeState {
        let u = 1.0 - w;
        OdeState {
            a: &self.a * u + &other.a * w,
            b: &self.b * u + &other.b * w,
            c: &self.c * u + &other.c * w,
            d: &self.d * u + &other.d * w,
            e: &self.e * u + &other.e * w,
            f: self.f * u + other.f * w,
        }
    }

    /// Largest absolute entry difference over all six coefficients.
    pub fn max_abs_diff(&self, other: &OdeState) -> f64 {
        [
            (&self.a - &other.a).amax(),
            (&self.b - &other.b).amax(),
            (&self.c - &other.c).amax(),
            (&self.d - &other.d).amax(),
            (&self.e - &other.e).amax(),
            (self.f - other.f).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// `qᵀAq + qᵀBS + SᵀCS + Dᵀq + EᵀS + F`.
    pub fn theta(&self, q: &DVector<f64>, s: &DVector<f64>) -> f64 {
        q.dot(&(&self.a * q))
            + q.dot(&(&self.b * s))
            + s.dot(&(&self.c * s))
            + self.d.dot(q)
            + self.e.dot(s)
            + self.f
    }
}

/// The symmetric `2d×2d` block `[[A, B/2], [Bᵀ/2, C]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PBlock {
    pub p: DMatrix<f64>,
}

impl PBlock {
    pub fn from_abc(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Self {
        let d = a.nrows();
        let mut p = DMatrix::zeros(2 * d, 2 * d);
        p.view_mut((0, 0), (d, d)).copy_from(a);
        p.view_mut((0, d), (d, d)).copy_from(&(b * 0.5));
        p.view_mut((d, 0), (d, d)).copy_from(&(b.transpose() * 0.5));
        p.view_mut((d, d), (d, d)).copy_from(c);
        PBlock { p }
    }

    pub fn dim(&self) -> usize {
        self.p.nrows() / 2
    }

    pub fn a(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.p.view((0, 0), (d, d)).into_owned()
    }

    pub fn b(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.p.view((0, d), (d, d)) * 2.0
    }

    pub fn c(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.p.view((d, d), (d, d)).into_owned()
    }
}

/// Constant matrices of the system for one `(ou, exec)` pair.
#[derive(Debug, Clone)]
struct Coeffs {
    d: usize,
    gamma: f64,
    eta_inv: DMatrix<f64>,
    sigma: DMatrix<f64>,
    r: DMatrix<f64>,
    r_sbar: DVector<f64>,
    q: DMatrix<f64>,
    y: DMatrix<f64>,
    u: DMatrix<f64>,
}

impl Coeffs {
    fn new(ou: &OuParams, exec: &ExecutionSpec) -> Result<Self> {
        let d = ou.dim();
        if exec.dim() != d {
            return Err(Error::validation(format!(
                "execution spec has dimension {}, price model has {d}",
                exec.dim()
            )));
        }
        let gamma = exec.risk_aversion;
        let eta_inv = linalg::spd_inverse(&exec.eta, "eta")?;
        let sigma = ou.sigma.clone();
        let r = ou.r.clone();
        let n = 2 * d;

        let mut q = DMatrix::zeros(n, n);
        q.view_mut((0, 0), (d, d)).copy_from(&(&sigma * (0.5 * gamma)));
        q.view_mut((0, d), (d, d)).copy_from(&(&r * 0.5));
        q.view_mut((d, 0), (d, d)).copy_from(&(r.transpose() * 0.5));

        let mut y = DMatrix::zeros(n, n);
        y.view_mut((d, 0), (d, d)).copy_from(&(&sigma * gamma));
        y.view_mut((d, d), (d, d)).copy_from(&r);

        let mut u = DMatrix::zeros(n, n);
        u.view_mut((0, 0), (d, d)).copy_from(&(-&eta_inv));
        u.view_mut((d, d), (d, d)).copy_from(&(&sigma * (2.0 * gamma)));

        Ok(Coeffs {
            d,
            gamma,
            r_sbar: &r * &ou.sbar,
            eta_inv,
            sigma,
            r,
            q,
            y,
            u,
        })
    }

    fn compact(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let yt_p = self.y.transpose() * p;
        let out = &self.q + &yt_p + yt_p.transpose() + p * &self.u * p;
        linalg::symmetrize(&out)
    }

    fn expanded(&self, s: &OdeState) -> OdeState {
        let d = self.d;
        let g = self.gamma;
        let bi = &s.b + DMatrix::<f64>::identity(d, d);
        let a_ei = &s.a * &self.eta_inv;
        let bt_ei = s.b.transpose() * &self.eta_inv;
        let sig_c = &self.sigma * &s.c;
        let c_sig = &s.c * &self.sigma;
        let sig_e = &self.sigma * &s.e;

        let a = &bi * &self.sigma * bi.transpose() * (0.5 * g) - &a_ei * &s.a;
        let b = &bi * &self.r + &bi * &sig_c * (2.0 * g) - &a_ei * &s.b;
        let c = self.r.transpose() * &s.c + &s.c * &self.r + &c_sig * &s.c * (2.0 * g)
            - &bt_ei * &s.b * 0.25;
        let dd = -(&bi * &self.r_sbar) + &bi * &sig_e * g - &a_ei * &s.d;
        let e = -(&s.c * &self.r_sbar) * 2.0 + self.r.transpose() * &s.e + &c_sig * &s.e * (2.0 * g)
            - &bt_ei * &s.d * 0.5;
        let f = -self.r_sbar.dot(&s.e) - (&self.sigma * &s.c).trace() + 0.5 * g * s.e.dot(&sig_e)
            - 0.25 * s.d.dot(&(&self.eta_inv * &s.d));
        OdeState {
            a: linalg::symmetrize(&a),
            b,
            c: linalg::symmetrize(&c),
            d: dd,
            e,
            f,
        }
    }

    /// `(D, E)` dynamics `z' = L z + c` for fixed `(A, B, C)`.
    fn linear_part(&self, p: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.d;
        let n = 2 * d;
        let blk = PBlock { p: p.clone() };
        let (a, b, c) = (blk.a(), blk.b(), blk.c());
        let bi = &b + DMatrix::<f64>::identity(d, d);
        let mut l = DMatrix::zeros(n, n);
        l.view_mut((0, 0), (d, d)).copy_from(&(-(&a * &self.eta_inv)));
        l.view_mut((0, d), (d, d)).copy_from(&(&bi * &self.sigma * self.gamma));
        l.view_mut((d, 0), (d, d)).copy_from(&(b.transpose() * &self.eta_inv * -0.5));
        l.view_mut((d, d), (d, d))
            .copy_from(&(self.r.transpose() + &c * &self.sigma * (2.0 * self.gamma)));
        let mut cv = DVector::zeros(n);
        cv.rows_mut(0, d).copy_from(&(-(&bi * &self.r_sbar)));
        cv.rows_mut(d, d).copy_from(&(&c * &self.r_sbar * -2.0));
        (l, cv)
    }

    fn f_rate(&self, p: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
        let d = self.d;
        let c = p.view((d, d), (d, d));
        let dv = z.rows(0, d);
        let e = z.rows(d, d);
        let sig_e = &self.sigma * e;
        -self.r_sbar.dot(&e) - (&self.sigma * c).trace() + 0.5 * self.gamma * e.dot(&sig_e)
            - 0.25 * dv.dot(&(&self.eta_inv * dv))
    }
}

/// Time derivatives of all six coefficients.
pub fn ode_rhs(_t: f64, s: &OdeState, ou: &OuParams, exec: &ExecutionSpec) -> Result<OdeState> {
    Ok(Coeffs::new(ou, exec)?.expanded(s))
}

/// `Q + YᵀP + PY + PUP`, symmetrized.
pub fn compact_rhs(p: &PBlock, ou: &OuParams, exec: &ExecutionSpec) -> Result<PBlock> {
    Ok(PBlock {
        p: Coeffs::new(ou, exec)?.compact(&p.p),
    })
}

/// The `Q`, `Y`, `U` matrices of the compact form.
pub fn compact_matrices(
    ou: &OuParams,
    exec: &ExecutionSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let c = Coeffs::new(ou, exec)?;
    Ok((c.q, c.y, c.u))
}

/// Time-stepping scheme for [`solve_backward_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Scheme {
    /// One implicit Euler step per grid interval; first order.
    ImplicitEuler,
    /// Implicit Euler substeps extrapolated over the step sequence 1, 2, 3
    /// with local error control at relative tolerance `rtol`. Substeps
    /// always land on the grid nodes.
    Extrapolated { rtol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverOptions {
    pub scheme: Scheme,
    /// Newton stops once the largest update is below this fraction of the
    /// largest entry of `P`.
    pub newton_tol: f64,
    pub max_newton_iter: usize,
    /// Step halvings allowed per grid interval when Newton fails.
    pub max_halvings: u32,
    /// Sandwich-bound tolerance relative to the spectral radius of `P`.
    pub bounds_rel_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            scheme: Scheme::Extrapolated { rtol: 1e-10 },
            newton_tol: 1e-12,
            max_newton_iter: 200,
            max_halvings: 10,
            bounds_rel_tol: 1e-6,
        }
    }
}

impl SolverOptions {
    pub fn implicit_euler() -> Self {
        SolverOptions {
            scheme: Scheme::ImplicitEuler,
            ..SolverOptions::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SolveStats {
    pub euler_steps: usize,
    pub rejected_steps: usize,
    pub newton_iterations: usize,
    pub halvings: usize,
}

/// Solved coefficients on a grid plus the sandwich-bound certificate.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub states: Vec<OdeState>,
    pub bounds_ok: bool,
    /// Most negative eigenvalue met in the two bound checks (absolute).
    pub bounds_margin: f64,
    /// Why the certificate could not be computed, if it could not.
    pub bounds_note: Option<String>,
    pub stats: SolveStats,
}

impl RiccatiSolution {
    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    /// Componentwise linear interpolation between grid nodes.
    pub fn state_at(&self, t: f64) -> Result<OdeState> {
        let (k, w) = self.grid.locate(t)?;
        if w == 0.0 {
            return Ok(self.states[k].clone());
        }
        if w == 1.0 {
            return Ok(self.states[k + 1].clone());
        }
        Ok(self.states[k].lerp(&self.states[k + 1], w))
    }
}

#[derive(Debug, Clone)]
struct Node {
    p: DMatrix<f64>,
    z: DVector<f64>,
    f: f64,
}

impl Node {
    fn from_state(s: &OdeState) -> Self {
        let d = s.dim();
        let mut z = DVector::zeros(2 * d);
        z.rows_mut(0, d).copy_from(&s.d);
        z.rows_mut(d, d).copy_from(&s.e);
        Node {
            p: s.p_block().p,
            z,
            f: s.f,
        }
    }

    fn to_state(&self) -> OdeState {
        let blk = PBlock { p: self.p.clone() };
        let d = blk.dim();
        OdeState {
            a: linalg::symmetrize(&blk.a()),
            b: blk.b(),
            c: linalg::symmetrize(&blk.c()),
            d: self.z.rows(0, d).into_owned(),
            e: self.z.rows(d, d).into_owned(),
            f: self.f,
        }
    }

    /// `self + k·(self − other)`.
    fn extrapolate(&self, other: &Node, k: f64) -> Node {
        Node {
            p: &self.p + (&self.p - &other.p) * k,
            z: &self.z + (&self.z - &other.z) * k,
            f: self.f + k * (self.f - other.f),
        }
    }

    fn is_finite(&self) -> bool {
        self.f.is_finite() && self.p.iter().chain(self.z.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug)]
struct StepFailure {
    residual: f64,
}

struct Stepper<'a> {
    c: &'a Coeffs,
    opts: &'a SolverOptions,
    stats: SolveStats,
    /// Upper-triangle index pairs of a `2d×2d` symmetric matrix.
    tri: Vec<(usize, usize)>,
    /// `pos[a·n + b]` is the position of `(a, b)`, `a ≤ b`, in `tri`.
    pos: Vec<usize>,
}

impl<'a> Stepper<'a> {
    fn new(c: &'a Coeffs, opts: &'a SolverOptions) -> Self {
        let n = 2 * c.d;
        let tri: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        let mut pos = vec![usize::MAX; n * n];
        for (k, &(a, b)) in tri.iter().enumerate() {
            pos[a * n + b] = k;
        }
        Stepper {
            c,
            opts,
            stats: SolveStats::default(),
            tri,
            pos,
        }
    }

    /// Jacobian of `P ↦ P + h·F(P)` at `p` on the upper-triangle unknowns:
    /// `H ↦ H + WH + HWᵀ` with `W = h(Yᵀ + PU)`.
    fn jacobian(&self, p: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        let n = p.nrows();
        let m = self.tri.len();
        let w = (self.c.y.transpose() + p * &self.c.u) * h;
        let idx = |a: usize, b: usize| self.pos[a.min(b) * n + a.max(b)];
        let mut jac = DMatrix::zeros(m, m);
        for (col, &(i, j)) in self.tri.iter().enumerate() {
            if i == j {
                for x in 0..n {
                    jac[(idx(x, i), col)] = w[(x, i)];
                }
                jac[(idx(i, i), col)] = 1.0 + 2.0 * w[(i, i)];
            } else {
                for x in 0..n {
                    if x != i && x != j {
                        jac[(idx(x, j), col)] = w[(x, i)];
                        jac[(idx(x, i), col)] = w[(x, j)];
                    }
                }
                jac[(idx(i, j), col)] = 1.0 + w[(i, i)] + w[(j, j)];
                jac[(idx(i, i), col)] = 2.0 * w[(i, j)];
                jac[(idx(j, j), col)] = 2.0 * w[(j, i)];
            }
        }
        jac
    }

    /// Solves `P + h·F(P) = P_next` by Newton's method started at `P_next`.
    /// The factorized Jacobian is kept while the iteration contracts fast.
    fn newton(&mut self, p_next: &DMatrix<f64>, h: f64) -> std::result::Result<DMatrix<f64>, StepFailure> {
        let m = self.tri.len();
        let mut p = p_next.clone();
        let mut last = f64::INFINITY;
        let mut lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
        for _ in 0..self.opts.max_newton_iter {
            self.stats.newton_iterations += 1;
            let g = &p + self.c.compact(&p) * h - p_next;
            let factor = match lu.take() {
                Some(f) => f,
                None => self.jacobian(&p, h).lu(),
            };
            let rhs = DVector::from_iterator(m, self.tri.iter().map(|&(a, b)| -g[(a, b)]));
            let delta = factor.solve(&rhs).ok_or(StepFailure { residual: g.amax() })?;
            let mut step = 0.0f64;
            for (k, &(a, b)) in self.tri.iter().enumerate() {
                p[(a, b)] += delta[k];
                if a != b {
                    p[(b, a)] += delta[k];
                }
                step = step.max(delta[k].abs());
            }
            if !step.is_finite() {
                return Err(StepFailure { residual: f64::NAN });
            }
            let scale = p.amax().max(p_next.amax()).max(f64::MIN_POSITIVE);
            if step <= self.opts.newton_tol * scale {
                return Ok(p);
            }
            // Rounding floor reached: the update stopped shrinking.
            if step <= 1e-9 * scale && step >= 0.5 * last {
                return Ok(p);
            }
            if step <= 0.1 * last {
                lu = Some(factor);
            }
            last = step;
        }
        let g = &p + self.c.compact(&p) * h - p_next;
        Err(StepFailure { residual: g.amax() })
    }

    /// One backward implicit Euler step of length `h` from `next`.
    fn euler(&mut self, next: &Node, h: f64) -> std::result::Result<Node, StepFailure> {
        self.stats.euler_steps += 1;
        let p = self.newton(&next.p, h)?;
        let (l, cv) = self.c.linear_part(&p);
        let n = l.nrows();
        let sys = DMatrix::<f64>::identity(n, n) + l * h;
        let z = sys
            .lu()
            .solve(&(&next.z - cv * h))
            .ok_or(StepFailure { residual: f64::NAN })?;
        let f = next.f - 0.5 * h * (self.c.f_rate(&p, &z) + self.c.f_rate(&next.p, &next.z));
        let node = Node { p, z, f };
        if node.is_finite() {
            Ok(node)
        } else {
            Err(StepFailure { residual: f64::NAN })
        }
    }

    fn euler_n(&mut self, next: &Node, h: f64, n: usize) -> std::result::Result<Node, StepFailure> {
        let sub = h / n as f64;
        let mut y = self.euler(next, sub)?;
        for _ in 1..n {
            y = self.euler(&y, sub)?;
        }
        Ok(y)
    }

    /// Extrapolated step: returns the order-3 value and the scaled error
    /// estimate against the order-2 value.
    fn extrapolated(&mut self, next: &Node, h: f64, rtol: f64) -> std::result::Result<(Node, f64), StepFailure> {
        let t11 = self.euler_n(next, h, 1)?;
        let t21 = self.euler_n(next, h, 2)?;
        let t31 = self.euler_n(next, h, 3)?;
        let t22 = t21.extrapolate(&t11, 1.0);
        let t32 = t31.extrapolate(&t21, 2.0);
        let t33 = t32.extrapolate(&t22, 0.5);
        let err = block_error(&t33, &t32) / rtol;
        Ok((t33, err))
    }

    fn fixed_interval(&mut self, next: &Node, dt: f64, k: usize) -> Result<Node> {
        let mut last = StepFailure { residual: f64::NAN };
        for halvings in 0..=self.opts.max_halvings {
            let pieces = 1usize << halvings;
            match self.euler_n(next, dt, pieces) {
                Ok(node) => return Ok(node),
                Err(e) => {
                    self.stats.halvings += 1;
                    last = e;
                }
            }
        }
        Err(Error::numerical(format!(
            "implicit step into node {k} did not converge after {} halvings (residual {:e})",
            self.opts.max_halvings, last.residual
        )))
    }

    fn adaptive_interval(&mut self, next: &Node, dt: f64, h: &mut f64, rtol: f64, k: usize) -> Result<Node> {
        let mut y = next.clone();
        let mut remaining = dt;
        let min_h = dt * 2f64.powi(-40);
        let mut last_residual = f64::NAN;
        while remaining > 0.0 {
            let mut h_try = h.min(remaining);
            let clipped = h_try == remaining;
            if remaining - h_try < 1e-10 * dt {
                h_try = remaining;
            }
            match self.extrapolated(&y, h_try, rtol) {
                Ok((node, err)) if err <= 1.0 => {
                    y = node;
                    remaining = if h_try == remaining { 0.0 } else { remaining - h_try };
                    let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-1.0 / 3.0)).clamp(0.2, 5.0) };
                    let proposed = h_try * fac;
                    *h = if clipped { h.max(proposed) } else { proposed };
                }
                Ok((_, err)) => {
                    self.stats.rejected_steps += 1;
                    *h = h_try * (0.9 * err.powf(-1.0 / 3.0)).clamp(0.1, 0.5);
                }
                Err(e) => {
                    self.stats.rejected_steps += 1;
                    self.stats.halvings += 1;
                    last_residual = e.residual;
                    *h = h_try * 0.25;
                }
            }
            if *h < min_h {
                return Err(Error::numerical(format!(
                    "step size underflow while integrating into node {k} (last residual {last_residual:e})"
                )));
            }
        }
        Ok(y)
    }
}

/// Relative max-difference of `P` and of `(D, E)`, each scaled by its own
/// largest entry. Coefficients that start from zero at `T` grow
/// polynomially, so per-coefficient relative errors would not shrink with
/// the step; `F` is a passive quadrature and is not controlled.
fn block_error(hi: &Node, lo: &Node) -> f64 {
    let rel = |diff: f64, scale: f64| if diff > 0.0 { diff / scale.max(f64::MIN_POSITIVE) } else { 0.0 };
    rel((&hi.p - &lo.p).amax(), hi.p.amax()).max(rel((&hi.z - &lo.z).amax(), hi.z.amax()))
}

/// Solves backward from the terminal condition with default options.
pub fn solve_backward(ou: &OuParams, exec: &ExecutionSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    solve_backward_with(ou, exec, grid, &SolverOptions::default())
}

pub fn solve_backward_with(
    ou: &OuParams,
    exec: &ExecutionSpec,
    grid: &TimeGrid,
    opts: &SolverOptions,
) -> Result<RiccatiSolution> {
    model::ensure_valid(ou, exec)?;
    if (grid.horizon() - exec.horizon).abs() > 1e-12 * exec.horizon {
        return Err(Error::validation(format!(
            "grid horizon {} does not match T = {}",
            grid.horizon(),
            exec.horizon
        )));
    }
    let coeffs = Coeffs::new(ou, exec)?;
    let mut stepper = Stepper::new(&coeffs, opts);
    let n = grid.steps();
    let dt = grid.dt();
    let terminal = OdeState::terminal(exec);
    let mut nodes = vec![Node::from_state(&terminal); n + 1];
    let mut h = dt;
    for k in (0..n).rev() {
        let next = &nodes[k + 1];
        let node = match opts.scheme {
            Scheme::ImplicitEuler => stepper.fixed_interval(next, dt, k)?,
            Scheme::Extrapolated { rtol } => stepper.adaptive_interval(next, dt, &mut h, rtol, k)?,
        };
        nodes[k] = node;
    }
    let mut states: Vec<OdeState> = nodes.iter().map(Node::to_state).collect();
    states[n] = terminal;
    let mut sol = RiccatiSolution {
        grid: grid.clone(),
        states,
        bounds_ok: false,
        bounds_margin: f64::NAN,
        bounds_note: None,
        stats: stepper.stats,
    };
    match check_bounds(&sol, ou, exec, opts.bounds_rel_tol) {
        Ok(cert) => {
            sol.bounds_ok = cert.ok;
            sol.bounds_margin = cert.margin;
        }
        Err(e) => sol.bounds_note = Some(e.to_string()),
    }
    Ok(sol)
}

/// Outcome of the sandwich-bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsCertificate {
    pub ok: bool,
    /// Most negative eigenvalue of `P − lower` and `upper − P` over the grid.
    pub margin: f64,
    /// The same, divided by the tolerance scale at the worst node.
    pub relative_margin: f64,
    /// Grid index where the relative margin is attained.
    pub worst_node: usize,
}

/// Checks `lower(t) ⪯ P(t) ⪯ upper(t)` at every node, where
/// `lower = [[−γ/2·Σ_{T−t} − Γ, −½(I − e^{−R(T−t)})], [·, 0]]` comes from the
/// hold-and-dump strategy and `upper = [[0, 0], [0, (T−t)/(2γ)·RᵀΣ⁻¹R]]`
/// from the frictionless problem. The tolerance at each node is `tol_rel`
/// times the spectral radius of `P(t)`.
pub fn check_bounds(
    sol: &RiccatiSolution,
    ou: &OuParams,
    exec: &ExecutionSpec,
    tol_rel: f64,
) -> Result<BoundsCertificate> {
    let d = ou.dim();
    let gamma = exec.risk_aversion;
    let r_is_zero = ou.r.iter().all(|&x| x == 0.0);
    let merton = if r_is_zero {
        DMatrix::zeros(d, d)
    } else {
        let sig_inv = linalg::spd_inverse(&ou.sigma, "Sigma")
            .map_err(|_| Error::numerical("upper bound requires invertible Sigma"))?;
        linalg::symmetrize(&(ou.r.transpose() * sig_inv * &ou.r))
    };
    let grid = &sol.grid;
    let n = grid.steps();
    let h = grid.dt();
    let step_exp = linalg::matrix_exp(&(&ou.r * -h))?;
    let cov_h = linalg::integrated_covariance(ou, h)?.value;
    let penalty = exec.penalty();
    let ident = DMatrix::<f64>::identity(d, d);

    let mut decay = ident.clone();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut margin = f64::INFINITY;
    let mut worst = (f64::INFINITY, n);
    let mut ok = true;
    for k in (0..=n).rev() {
        let tau = grid.horizon() - grid.time(k);
        let p = sol.states[k].p_block().p;
        let lower_tl = -(&cov * (0.5 * gamma)) - &penalty;
        let lower = PBlock::from_abc(&lower_tl, &(-(&ident - &decay)), &DMatrix::zeros(d, d)).p;
        let mut upper = DMatrix::zeros(2 * d, 2 * d);
        upper
            .view_mut((d, d), (d, d))
            .copy_from(&(&merton * (tau / (2.0 * gamma))));

        let scale = linalg::spectral_radius_sym(&p).max(f64::MIN_POSITIVE);
        let tol = tol_rel * scale;
        let lo = linalg::min_eigenvalue(&(&p - &lower));
        let hi = linalg::min_eigenvalue(&(&upper - &p));
        let m = lo.min(hi);
        margin = margin.min(m);
        if m < -tol {
            ok = false;
        }
        if m / scale < worst.0 {
            worst = (m / scale, k);
        }
        if k > 0 {
            cov = linalg::symmetrize(&(&cov_h + &step_exp * &cov * step_exp.transpose()));
            decay = &decay * &step_exp;
        }
    }
    Ok(BoundsCertificate {
        ok,
        margin,
        relative_margin: worst.0,
        worst_node: worst.1,
    })
}

/// `θ(t, q, S)` with coefficients interpolated linearly in time.
pub fn theta_eval(sol: &RiccatiSolution, t: f64, q: &DVector<f64>, s: &DVector<f64>) -> Result<f64> {
    Ok(sol.state_at(t)?.theta(q, s))
}

/// `w = −exp(−γ(x + qᵀS + θ(t,q,S)))`. Exponents beyond ±700 are reported
/// as errors; shift `x` by a reference wealth to stay in range.
pub fn value_function(
    sol: &RiccatiSolution,
    t: f64,
    x: f64,
    q: &DVector<f64>,
    s: &DVector<f64>,
    exec: &ExecutionSpec,
) -> Result<f64> {
    let theta = theta_eval(sol, t, q, s)?;
    let expo = -exec.risk_aversion * (x + q.dot(s) + theta);
    if !expo.is_finite() || expo.abs() > 700.0 {
        return Err(Error::numerical(format!(
            "value function exponent {expo:e} out of range; shift the cash reference"
        )));
    }
    Ok(-expo.exp())
}
