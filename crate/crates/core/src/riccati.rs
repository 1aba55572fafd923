//! Delay-modified Riccati equations.
//!
//! Two equivalent finite-horizon forms are integrated backward from the
//! terminal time:
//!
//! * the `P` form, whose right-hand side reads `Π` one longest-delay window
//!   ahead, with `P̂ = P − ∫₀^{h_r} e^{Ã'θ} Π(t+θ) e^{Ãθ} dθ` and the gain
//!   `K = −Ω⁻¹ B' P̂`;
//! * the `P̂` form `−dP̂/dt = P̂Ã + Ã'P̂ + Q − Π`, with `P` recovered by the
//!   same window integral.
//!
//! Here `Ã = A + (α/2) I` and `Ω = R + Σ E_i' P E_i`. The algebraic
//! equation is reached by value iteration on the `P` form and then
//! polished by Newton's method on the stationary pair `(P̂, P)`.
//!
//! Gains use the negative-feedback convention `u = K ŷ`, `K = −Ω⁻¹B'P̂`.

use std::collections::VecDeque;

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::model::{derive_maps, CostSpec, ModelError, StochasticDelaySystem, TimeGrid, GRID_TOL};

/// Smallest eigenvalue of `Ω` accepted as positive definite.
pub const OMEGA_PD_TOL: f64 = 1e-10;
/// Smallest eigenvalue of a stationary `P̂` accepted as positive definite.
pub const PHAT_PD_TOL: f64 = 1e-10;
/// Fixed-point loops stop at a relative change of 1e-15, or once the change
/// stalls below 1e-12 (round-off cycling).
fn settled(change: f64, prev: f64, scale: f64) -> bool {
    change <= 1e-15 * scale || (change <= 1e-12 * scale && change >= prev)
}

/// Value iteration gives up once `‖P‖` exceeds this.
pub const BLOWUP: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiccatiError {
    #[error("Omega is not positive definite at t = {t} (min eigenvalue {min_eig:e})")]
    Singular { t: f64, min_eig: f64 },
    #[error("implicit gain equation did not converge at t = {t}")]
    FixedPoint { t: f64 },
    #[error("grid error: {0}")]
    Grid(String),
    #[error("t = {t} is not a grid node")]
    OffGrid { t: f64 },
    #[error("no stationary solution within horizon {horizon}: {reason}")]
    NotConverged { horizon: f64, reason: String },
    #[error("stationary P_hat is not positive definite (min eigenvalue {min_eig:e})")]
    Degenerate { min_eig: f64 },
    #[error("algebraic residual {residual:e} exceeds {limit:e}")]
    Residual { residual: f64, limit: f64 },
    #[error("not stabilizable: {0}")]
    NotStabilizable(Box<RiccatiError>),
    #[error("certification check failed at alpha = {alpha}: {source}")]
    NonMonotone {
        alpha: f64,
        source: Box<RiccatiError>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Backward solution on a grid; every vector is indexed by node `0..=N`.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub phat: Vec<Matrix>,
    pub p: Vec<Matrix>,
    /// `Π(t, t)`.
    pub pi: Vec<Matrix>,
    pub omega: Vec<Matrix>,
    pub k: Vec<Matrix>,
    /// `Some(α)` when solved with `α > 0`.
    pub discounted: Option<f64>,
}

/// Stationary solution of the modified algebraic equation.
#[derive(Clone, Debug)]
pub struct SteadyGain {
    pub phat: Matrix,
    pub p: Matrix,
    pub pi0: Matrix,
    pub omega: Matrix,
    pub k: Matrix,
    pub alpha: f64,
    /// Backward steps taken by value iteration.
    pub iterations: usize,
    /// Max-norm residual of the stationary equations after polishing.
    pub residual: f64,
    /// Backward horizon reached by value iteration.
    pub horizon: f64,
}

/// Which past input the predicted cost assumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostConvention {
    /// `u = 0` on `[−h_r, 0)`, optimal afterwards: `x₀'P̂(0)x₀`.
    ZeroPrefill,
    /// `u = 0` on `[−h_r, h_r)`: `x₀'P(0)x₀`.
    ZeroThroughDelay,
}

#[derive(Clone, Debug)]
struct Node {
    p: Matrix,
    phat: Matrix,
    pi: Matrix,
    omega: Matrix,
    k: Matrix,
}

/// Equation data shared by both forms and the algebraic solver.
struct Coeffs {
    a: Matrix,
    at: Matrix,
    q: Matrix,
    r: Matrix,
    bt: Matrix,
    e: Vec<Matrix>,
    /// `e^{Ã j dt}` for `j = 0..=d`.
    kernels: Vec<Matrix>,
    dt: f64,
    d: usize,
}

fn shifted(a: &Matrix, alpha: f64) -> Matrix {
    let mut s = a.clone();
    if alpha != 0.0 {
        for i in 0..s.rows() {
            s[(i, i)] += 0.5 * alpha;
        }
    }
    s
}

impl Coeffs {
    fn new(
        sys: &StochasticDelaySystem,
        q: &Matrix,
        r: &Matrix,
        alpha: f64,
        dt: f64,
        d: usize,
    ) -> Result<Self, RiccatiError> {
        let maps = derive_maps(sys)?;
        let a = shifted(sys.a(), alpha);
        let kernels = (0..=d)
            .map(|j| linalg::mat_exp(&a, j as f64 * dt))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            at: a.transpose(),
            a,
            q: q.clone(),
            r: r.clone(),
            bt: maps.b.transpose(),
            e: maps.e,
            kernels,
            dt,
            d,
        })
    }

    /// `XÃ + Ã'X + Q`.
    fn drift(&self, x: &Matrix) -> Matrix {
        let mut out = x * &self.a;
        out += &(&self.at * x);
        out += &self.q;
        out
    }

    fn omega(&self, p: &Matrix, t: f64) -> Result<Matrix, RiccatiError> {
        let mut omega = self.r.clone();
        for e in &self.e {
            omega += &p.congruence(e);
        }
        omega.symmetrize();
        if !omega.is_finite() {
            return Err(RiccatiError::Singular {
                t,
                min_eig: f64::NAN,
            });
        }
        let min_eig = linalg::min_eigenvalue(&omega)?;
        if min_eig <= OMEGA_PD_TOL || !min_eig.is_finite() {
            return Err(RiccatiError::Singular { t, min_eig });
        }
        Ok(omega)
    }

    /// `K = −Ω⁻¹B'P̂` and `Π = K'ΩK`.
    fn gain(&self, phat: &Matrix, omega: &Matrix) -> Result<(Matrix, Matrix), RiccatiError> {
        let bp = &self.bt * phat;
        let k = -&linalg::solve(omega, &bp)?;
        let mut pi = -&(&bp.transpose() * &k);
        pi.symmetrize();
        Ok((k, pi))
    }

    /// Trapezoid weight of node `j` on a window of `len` intervals.
    fn weight(&self, j: usize, len: usize) -> f64 {
        if len == 0 {
            0.0
        } else if j == 0 || j == len {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    /// Window integral over nodes `1..=ahead.len()`, where `ahead[j-1]` is
    /// `Π` at `j` steps ahead. The `θ = 0` term is left to the caller.
    fn window_integral(&self, ahead: &[&Matrix], n: usize) -> Matrix {
        let len = ahead.len();
        let mut out = Matrix::zeros(n, n);
        for (idx, pi) in ahead.iter().enumerate() {
            let j = idx + 1;
            out.add_scaled(self.weight(j, len), &pi.congruence(&self.kernels[j]));
        }
        out
    }

    /// Closes a node of the `P` form: given `P`, solves
    /// `P̂ = P − I_ahead − w₀Π(P̂)` by fixed-point iteration.
    fn close_from_p(
        &self,
        p: Matrix,
        ahead: &[&Matrix],
        guess: Option<&Matrix>,
        t: f64,
    ) -> Result<Node, RiccatiError> {
        let n = p.rows();
        let omega = self.omega(&p, t)?;
        let mut base = p.clone();
        base -= &self.window_integral(ahead, n);
        let w0 = self.weight(0, ahead.len());
        if w0 == 0.0 {
            let (k, pi) = self.gain(&base, &omega)?;
            return Ok(Node {
                p,
                phat: base,
                pi,
                omega,
                k,
            });
        }
        let mut pi = guess.cloned().unwrap_or_else(|| Matrix::zeros(n, n));
        let mut prev = f64::INFINITY;
        for _ in 0..500 {
            let mut phat = base.clone();
            phat.add_scaled(-w0, &pi);
            let (_, next) = self.gain(&phat, &omega)?;
            let change = (&next - &pi).norm_max();
            pi = next;
            let scale = pi.norm_max().max(p.norm_max()).max(1.0);
            if settled(change, prev, scale) {
                let mut phat = base;
                phat.add_scaled(-w0, &pi);
                let (k, pi) = self.gain(&phat, &omega)?;
                return Ok(Node {
                    p,
                    phat,
                    pi,
                    omega,
                    k,
                });
            }
            if !pi.is_finite() {
                break;
            }
            prev = change;
        }
        Err(RiccatiError::FixedPoint { t })
    }

    fn terminal(&self, h: &Matrix, t: f64) -> Result<Node, RiccatiError> {
        self.close_from_p(h.clone(), &[], None, t)
    }
}

/// Backward integrator for the `P` form with a sliding window of `Π`.
struct Stepper<'a> {
    c: &'a Coeffs,
    /// `Π` at the current node and up to `d` nodes ahead, nearest first.
    window: VecDeque<Matrix>,
    node: Node,
    steps: usize,
}

impl<'a> Stepper<'a> {
    fn new(c: &'a Coeffs, h: &Matrix, t_end: f64) -> Result<Self, RiccatiError> {
        let node = c.terminal(h, t_end)?;
        let mut window = VecDeque::with_capacity(c.d + 1);
        window.push_back(node.pi.clone());
        Ok(Self {
            c,
            window,
            node,
            steps: 0,
        })
    }

    /// One step backward to time `t_new`.
    fn step(&mut self, t_new: f64) -> Result<(), RiccatiError> {
        let c = self.c;
        let dt = c.dt;
        let d = c.d;
        let p0 = &self.node.p;

        let p_new = if d == 0 {
            // The advance term is Π(t) itself: a classical Riccati right-hand side.
            let f = |p: &Matrix| -> Result<Matrix, RiccatiError> {
                let omega = c.omega(p, t_new)?;
                let (_, pi) = c.gain(p, &omega)?;
                Ok(&c.drift(p) - &pi)
            };
            rk4(p0, dt, |p, _| f(p))?
        } else if self.steps >= d {
            let psi = &c.kernels[d];
            let hi = self.window[d].congruence(psi);
            let lo = self.window[d - 1].congruence(psi);
            let mut mid = &hi + &lo;
            mid = mid.scale(0.5);
            rk4(p0, dt, |p, stage| {
                let adv = match stage {
                    Stage::Start => &hi,
                    Stage::Mid => &mid,
                    Stage::End => &lo,
                };
                Ok(&c.drift(p) - adv)
            })?
        } else {
            rk4(p0, dt, |p, _| Ok(c.drift(p)))?
        };

        self.steps += 1;
        let len = d.min(self.steps);
        let ahead: Vec<&Matrix> = self.window.iter().take(len).collect();
        let node = c.close_from_p(p_new, &ahead, self.window.front(), t_new)?;
        self.window.push_front(node.pi.clone());
        self.window.truncate(d + 1);
        self.node = node;
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Start,
    Mid,
    End,
}

/// Classical four-stage step of `dX/dτ = f(X)` in reversed time.
fn rk4(
    x: &Matrix,
    h: f64,
    mut f: impl FnMut(&Matrix, Stage) -> Result<Matrix, RiccatiError>,
) -> Result<Matrix, RiccatiError> {
    let k1 = f(x, Stage::Start)?;
    let mut y = x.clone();
    y.add_scaled(0.5 * h, &k1);
    let k2 = f(&y, Stage::Mid)?;
    let mut y = x.clone();
    y.add_scaled(0.5 * h, &k2);
    let k3 = f(&y, Stage::Mid)?;
    let mut y = x.clone();
    y.add_scaled(h, &k3);
    let k4 = f(&y, Stage::End)?;
    let mut out = x.clone();
    out.add_scaled(h / 6.0, &k1);
    out.add_scaled(h / 3.0, &k2);
    out.add_scaled(h / 3.0, &k3);
    out.add_scaled(h / 6.0, &k4);
    out.symmetrize();
    Ok(out)
}

fn check_grid(
    sys: &StochasticDelaySystem,
    cost: &CostSpec,
    grid: &TimeGrid,
) -> Result<(), RiccatiError> {
    if grid.steps_per_delay.len() != sys.channels().len() {
        return Err(RiccatiError::Grid(format!(
            "grid has {} delays, system has {} channels",
            grid.steps_per_delay.len(),
            sys.channels().len()
        )));
    }
    for (ch, &d) in sys.channels().iter().zip(&grid.steps_per_delay) {
        if (d as f64 * grid.dt - ch.delay).abs() > GRID_TOL * ch.delay.max(1.0) {
            return Err(RiccatiError::Grid(format!(
                "delay {} is not {} steps of {}",
                ch.delay, d, grid.dt
            )));
        }
    }
    if (grid.horizon() - cost.horizon).abs() > GRID_TOL * cost.horizon.max(1.0) {
        return Err(RiccatiError::Grid(format!(
            "grid horizon {} does not match T = {}",
            grid.horizon(),
            cost.horizon
        )));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<(), RiccatiError> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(RiccatiError::Invalid(format!(
            "alpha must be >= 0, got {alpha}"
        )));
    }
    Ok(())
}

fn terminal_weight(cost: &CostSpec, alpha: f64) -> Matrix {
    if alpha > 0.0 {
        Matrix::zeros(cost.h.rows(), cost.h.cols())
    } else {
        cost.h.clone()
    }
}

fn assemble(grid: &TimeGrid, mut nodes: Vec<Node>, alpha: f64) -> RiccatiSolution {
    nodes.reverse();
    let mut sol = RiccatiSolution {
        grid: grid.clone(),
        phat: Vec::with_capacity(nodes.len()),
        p: Vec::with_capacity(nodes.len()),
        pi: Vec::with_capacity(nodes.len()),
        omega: Vec::with_capacity(nodes.len()),
        k: Vec::with_capacity(nodes.len()),
        discounted: (alpha > 0.0).then_some(alpha),
    };
    for node in nodes {
        sol.phat.push(node.phat);
        sol.p.push(node.p);
        sol.pi.push(node.pi);
        sol.omega.push(node.omega);
        sol.k.push(node.k);
    }
    sol
}

/// Integrates the `P` form backward from `P(T) = H` (or `0` when `α > 0`).
pub fn solve_dre(
    sys: &StochasticDelaySystem,
    cost: &CostSpec,
    grid: &TimeGrid,
    alpha: f64,
) -> Result<RiccatiSolution, RiccatiError> {
    check_alpha(alpha)?;
    check_grid(sys, cost, grid)?;
    let c = Coeffs::new(
        sys,
        &cost.q,
        &cost.r,
        alpha,
        grid.dt,
        grid.max_delay_steps(),
    )?;
    let n_steps = grid.horizon_steps;
    let mut stepper = Stepper::new(&c, &terminal_weight(cost, alpha), grid.time(n_steps))?;
    let mut nodes = Vec::with_capacity(n_steps + 1);
    nodes.push(stepper.node.clone());
    for k in (0..n_steps).rev() {
        stepper.step(grid.time(k))?;
        nodes.push(stepper.node.clone());
    }
    Ok(assemble(grid, nodes, alpha))
}

/// Integrates the `P̂` form backward by the implicit trapezoid rule. Used to
/// cross-check [`solve_dre`]; without delays the two forms coincide and this
/// delegates.
pub fn solve_dre_hat_form(
    sys: &StochasticDelaySystem,
    cost: &CostSpec,
    grid: &TimeGrid,
    alpha: f64,
) -> Result<RiccatiSolution, RiccatiError> {
    check_alpha(alpha)?;
    check_grid(sys, cost, grid)?;
    let d = grid.max_delay_steps();
    if d == 0 {
        return solve_dre(sys, cost, grid, alpha);
    }
    let c = Coeffs::new(sys, &cost.q, &cost.r, alpha, grid.dt, d)?;
    let n = sys.state_dim();
    let dt = grid.dt;
    let n_steps = grid.horizon_steps;
    let mut node = c.terminal(&terminal_weight(cost, alpha), grid.time(n_steps))?;
    let mut window: VecDeque<Matrix> = VecDeque::with_capacity(d + 1);
    window.push_back(node.pi.clone());
    let mut nodes = Vec::with_capacity(n_steps + 1);
    nodes.push(node.clone());

    for (steps, k) in (0..n_steps).rev().enumerate() {
        let t = grid.time(k);
        let len = d.min(steps + 1);
        let ahead: Vec<&Matrix> = window.iter().take(len).collect();
        let explicit = c.window_integral(&ahead, n);
        let w0 = c.weight(0, len);
        let mut f_old = c.drift(&node.phat);
        f_old -= &node.pi;

        let mut phat = node.phat.clone();
        phat.add_scaled(dt, &f_old);
        let mut pi = node.pi.clone();
        let mut converged = false;
        let mut prev = f64::INFINITY;
        for _ in 0..500 {
            let mut p = &phat + &explicit;
            p.add_scaled(w0, &pi);
            let omega = c.omega(&p, t)?;
            let (_, pi_next) = c.gain(&phat, &omega)?;
            let mut f_new = c.drift(&phat);
            f_new -= &pi_next;
            let mut phat_next = node.phat.clone();
            phat_next.add_scaled(0.5 * dt, &f_old);
            phat_next.add_scaled(0.5 * dt, &f_new);
            phat_next.symmetrize();
            let change = (&phat_next - &phat)
                .norm_max()
                .max((&pi_next - &pi).norm_max());
            phat = phat_next;
            pi = pi_next;
            if !phat.is_finite() {
                break;
            }
            if settled(change, prev, phat.norm_max().max(1.0)) {
                converged = true;
                break;
            }
            prev = change;
        }
        if !converged {
            return Err(RiccatiError::FixedPoint { t });
        }
        let mut p = &phat + &explicit;
        p.add_scaled(w0, &pi);
        p.symmetrize();
        let omega = c.omega(&p, t)?;
        let (gain, pi) = c.gain(&phat, &omega)?;
        node = Node {
            p,
            phat,
            pi,
            omega,
            k: gain,
        };
        window.push_front(node.pi.clone());
        window.truncate(d + 1);
        nodes.push(node.clone());
    }
    Ok(assemble(grid, nodes, alpha))
}

/// Stored gain at a grid node.
pub fn gain_at(sol: &RiccatiSolution, t: f64) -> Result<&Matrix, RiccatiError> {
    let k = sol.grid.node_of(t).ok_or(RiccatiError::OffGrid { t })?;
    Ok(&sol.k[k])
}

/// Optimal cost predicted from the solution at `t = 0`.
pub fn predicted_cost(sol: &RiccatiSolution, x0: &[f64], convention: CostConvention) -> f64 {
    let m = match convention {
        CostConvention::ZeroPrefill => &sol.phat[0],
        CostConvention::ZeroThroughDelay => &sol.p[0],
    };
    m.quad_form(x0)
}

/// Controls for value iteration.
#[derive(Clone, Debug)]
pub struct AreOptions {
    /// Stationarity tolerance; the final residual must be within `10·tol`.
    pub tol: f64,
    /// Longest backward horizon; defaults to `200·max(1, h_r)`.
    pub t_max: Option<f64>,
    /// Grid points per longest delay (step `1/steps` without delays).
    pub steps_per_delay: usize,
}

impl Default for AreOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            t_max: None,
            steps_per_delay: 64,
        }
    }
}

/// Stationary equations in the unknowns `(P̂, P)`.
struct Stationary<'a> {
    c: &'a Coeffs,
    /// Images of the symmetric basis under the window integral.
    window_map: Vec<Matrix>,
    n: usize,
}

impl<'a> Stationary<'a> {
    fn new(c: &'a Coeffs, h_r: f64) -> Result<Self, RiccatiError> {
        let n = c.a.rows();
        let mut window_map = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                let mut s = Matrix::zeros(n, n);
                s[(i, j)] = 1.0;
                s[(j, i)] = 1.0;
                window_map.push(if h_r > 0.0 {
                    linalg::gramian_integral(&c.a, &s, h_r)?
                } else {
                    Matrix::zeros(n, n)
                });
            }
        }
        Ok(Self { c, window_map, n })
    }

    fn window(&self, pi: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, self.n);
        let mut idx = 0;
        for i in 0..self.n {
            for j in i..self.n {
                out.add_scaled(pi[(i, j)], &self.window_map[idx]);
                idx += 1;
            }
        }
        out
    }

    fn pack(&self, phat: &Matrix, p: &Matrix) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n * (self.n + 1));
        for m in [phat, p] {
            for i in 0..self.n {
                for j in i..self.n {
                    v.push(m[(i, j)]);
                }
            }
        }
        v
    }

    fn unpack(&self, v: &[f64]) -> (Matrix, Matrix) {
        let half = v.len() / 2;
        let build = |s: &[f64]| {
            let mut m = Matrix::zeros(self.n, self.n);
            let mut idx = 0;
            for i in 0..self.n {
                for j in i..self.n {
                    m[(i, j)] = s[idx];
                    m[(j, i)] = s[idx];
                    idx += 1;
                }
            }
            m
        };
        (build(&v[..half]), build(&v[half..]))
    }

    /// `(P̂Ã + Ã'P̂ + Q − Π, P − P̂ − ∫Π)` and the intermediate quantities.
    fn eval(&self, phat: &Matrix, p: &Matrix) -> Result<(Matrix, Matrix, Node), RiccatiError> {
        let omega = self.c.omega(p, f64::NEG_INFINITY)?;
        let (k, pi) = self.c.gain(phat, &omega)?;
        let mut f1 = self.c.drift(phat);
        f1 -= &pi;
        f1.symmetrize();
        let mut f2 = p - phat;
        f2 -= &self.window(&pi);
        f2.symmetrize();
        let node = Node {
            p: p.clone(),
            phat: phat.clone(),
            pi,
            omega,
            k,
        };
        Ok((f1, f2, node))
    }

    fn residual_vec(&self, v: &[f64]) -> Option<Vec<f64>> {
        let (phat, p) = self.unpack(v);
        let (f1, f2, _) = self.eval(&phat, &p).ok()?;
        Some(self.pack(&f1, &f2))
    }

    /// Newton's method with a finite-difference Jacobian and backtracking.
    fn polish(&self, phat: &Matrix, p: &Matrix) -> (Matrix, Matrix) {
        let mut x = self.pack(phat, p);
        let Some(mut g) = self.residual_vec(&x) else {
            return (phat.clone(), p.clone());
        };
        let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        let dim = x.len();
        for _ in 0..40 {
            let g_norm = norm(&g);
            let scale = norm(&x).max(1.0);
            if g_norm <= 1e-15 * scale {
                break;
            }
            let mut jac = Matrix::zeros(dim, dim);
            for col in 0..dim {
                let h = 1e-6 * x[col].abs().max(1.0);
                let mut xp = x.clone();
                xp[col] += h;
                let mut xm = x.clone();
                xm[col] -= h;
                let (Some(gp), Some(gm)) = (self.residual_vec(&xp), self.residual_vec(&xm)) else {
                    return self.unpack(&x);
                };
                for row in 0..dim {
                    jac[(row, col)] = (gp[row] - gm[row]) / (2.0 * h);
                }
            }
            let rhs = Matrix::column(&g.iter().map(|e| -e).collect::<Vec<_>>());
            let Ok(delta) = linalg::solve(&jac, &rhs) else {
                break;
            };
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..12 {
                let trial: Vec<f64> = x
                    .iter()
                    .zip(delta.as_slice())
                    .map(|(a, b)| a + step * b)
                    .collect();
                if let Some(gt) = self.residual_vec(&trial) {
                    if norm(&gt) < g_norm {
                        accepted = Some((trial, gt));
                        break;
                    }
                }
                step *= 0.5;
            }
            match accepted {
                Some((xn, gn)) => {
                    x = xn;
                    g = gn;
                }
                None => break,
            }
        }
        self.unpack(&x)
    }
}

/// Value iteration with `Q = I`, `R = I`, `H = 0`.
pub fn solve_are(
    sys: &StochasticDelaySystem,
    alpha: f64,
    opts: &AreOptions,
) -> Result<SteadyGain, RiccatiError> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    solve_are_weighted(sys, &Matrix::identity(n), &Matrix::identity(m), alpha, opts)
}

/// Value iteration with general weights `Q ⪰ 0`, `R ≻ 0`.
pub fn solve_are_weighted(
    sys: &StochasticDelaySystem,
    q: &Matrix,
    r: &Matrix,
    alpha: f64,
    opts: &AreOptions,
) -> Result<SteadyGain, RiccatiError> {
    check_alpha(alpha)?;
    if !(opts.tol.is_finite() && opts.tol > 0.0) {
        return Err(RiccatiError::Invalid(format!(
            "tol must be positive, got {}",
            opts.tol
        )));
    }
    if opts.steps_per_delay == 0 {
        return Err(RiccatiError::Invalid(
            "steps_per_delay must be positive".into(),
        ));
    }
    let h_r = sys.max_delay();
    let t_max = opts.t_max.unwrap_or(200.0 * h_r.max(1.0));
    let (dt, d) = if h_r > 0.0 {
        (h_r / opts.steps_per_delay as f64, opts.steps_per_delay)
    } else {
        (1.0 / opts.steps_per_delay as f64, 0)
    };
    let c = Coeffs::new(sys, q, r, alpha, dt, d)?;
    let zero = Matrix::zeros(sys.state_dim(), sys.state_dim());
    let mut stepper = Stepper::new(&c, &zero, 0.0)?;
    let window = d.max((1.0 / dt).ceil() as usize);
    let mut history: VecDeque<Matrix> = VecDeque::with_capacity(window + 1);
    history.push_back(stepper.node.p.clone());
    let max_steps = (t_max / dt).ceil() as usize;

    let mut stationary = false;
    while stepper.steps < max_steps {
        let tau = (stepper.steps + 1) as f64 * dt;
        stepper.step(-tau)?;
        let p = &stepper.node.p;
        if !p.is_finite() || p.norm_max() > BLOWUP {
            return Err(RiccatiError::NotConverged {
                horizon: tau,
                reason: "value iteration diverged".into(),
            });
        }
        history.push_back(p.clone());
        if history.len() > window + 1 {
            history.pop_front();
        }
        if history.len() == window + 1 && (&history[window] - &history[0]).norm_max() <= opts.tol {
            stationary = true;
            break;
        }
    }
    let horizon = stepper.steps as f64 * dt;
    if !stationary {
        return Err(RiccatiError::NotConverged {
            horizon,
            reason: "not stationary".into(),
        });
    }

    let eqs = Stationary::new(&c, h_r)?;
    let (phat, p) = eqs.polish(&stepper.node.phat, &stepper.node.p);
    let (f1, f2, node) = eqs.eval(&phat, &p)?;
    let residual = f1.norm_max().max(f2.norm_max());
    let min_eig = linalg::min_eigenvalue(&node.phat)?;
    if min_eig <= PHAT_PD_TOL {
        return Err(RiccatiError::Degenerate { min_eig });
    }
    let limit = 10.0 * opts.tol;
    if residual > limit || !residual.is_finite() {
        return Err(RiccatiError::Residual { residual, limit });
    }
    Ok(SteadyGain {
        phat: node.phat,
        p: node.p,
        pi0: node.pi,
        omega: node.omega,
        k: node.k,
        alpha,
        iterations: stepper.steps,
        residual,
        horizon,
    })
}

/// Largest certified rate and the gain solving the discounted equation there.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub alpha_max: f64,
    pub gain: SteadyGain,
    /// Gain at `α = 0`.
    pub base: SteadyGain,
}

/// Bisection on "the discounted algebraic equation is solvable with
/// `P̂_α ≻ 0`" over `[0, alpha_hi]`, to within `alpha_tol`.
pub fn certify_max_alpha(
    sys: &StochasticDelaySystem,
    alpha_hi: f64,
    alpha_tol: f64,
    opts: &AreOptions,
) -> Result<Certificate, RiccatiError> {
    if !(alpha_hi.is_finite() && alpha_hi >= 0.0) {
        return Err(RiccatiError::Invalid(format!(
            "alpha_hi must be >= 0, got {alpha_hi}"
        )));
    }
    if !(alpha_tol.is_finite() && alpha_tol > 0.0) {
        return Err(RiccatiError::Invalid(format!(
            "alpha tolerance must be positive, got {alpha_tol}"
        )));
    }
    let base = solve_are(sys, 0.0, opts).map_err(|e| RiccatiError::NotStabilizable(Box::new(e)))?;
    if alpha_hi == 0.0 {
        return Ok(Certificate {
            alpha_max: 0.0,
            gain: base.clone(),
            base,
        });
    }
    if let Ok(gain) = solve_are(sys, alpha_hi, opts) {
        return Ok(Certificate {
            alpha_max: alpha_hi,
            gain,
            base,
        });
    }
    let (mut lo, mut hi) = (0.0f64, alpha_hi);
    let mut best = base.clone();
    while hi - lo > alpha_tol {
        let mid = 0.5 * (lo + hi);
        match solve_are(sys, mid, opts) {
            Ok(g) => {
                lo = mid;
                best = g;
            }
            Err(_) => hi = mid,
        }
    }
    if lo > 0.0 {
        let half = 0.5 * lo;
        solve_are(sys, half, opts).map_err(|e| RiccatiError::NonMonotone {
            alpha: half,
            source: Box::new(e),
        })?;
    }
    Ok(Certificate {
        alpha_max: lo,
        gain: best,
        base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_grid, Channel};

    fn scalar(v: f64) -> Matrix {
        Matrix::scalar(v)
    }

    fn scalar_sys(a: f64, channels: &[(f64, f64, f64)]) -> StochasticDelaySystem {
        StochasticDelaySystem::new(
            scalar(a),
            channels
                .iter()
                .map(|&(b, bb, h)| Channel::new(scalar(b), scalar(bb), h))
                .collect(),
        )
        .unwrap()
    }

    fn unit_cost(sys: &StochasticDelaySystem, h: f64, t: f64) -> CostSpec {
        CostSpec::new(sys, scalar(1.0), scalar(1.0), scalar(h), t).unwrap()
    }

    fn delayed_example(bbar: f64) -> StochasticDelaySystem {
        scalar_sys(0.0, &[(0.0, 0.0, 0.0), (1.0, bbar, 0.25)])
    }

    #[test]
    fn tanh_closed_form() {
        let sys = scalar_sys(0.0, &[(1.0, 0.0, 0.0)]);
        let cost = unit_cost(&sys, 0.0, 1.0);
        let grid = build_grid(&sys, 1.0, Some(1.0 / 128.0)).unwrap();
        let sol = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
        for (k, p) in sol.p.iter().enumerate() {
            let exact = (1.0 - grid.time(k)).tanh();
            assert!((p[(0, 0)] - exact).abs() < 1e-9, "node {k}");
            assert_eq!(p, &sol.phat[k]);
        }
        assert!((sol.p[0][(0, 0)] - 0.761594).abs() < 1e-6);
        let k0 = gain_at(&sol, 0.0).unwrap();
        assert!((k0[(0, 0)] + 1f64.tanh()).abs() < 1e-9);
        assert!(
            (predicted_cost(&sol, &[1.0], CostConvention::ZeroPrefill) - 1f64.tanh()).abs() < 1e-9
        );
        assert_eq!(
            predicted_cost(&sol, &[0.0], CostConvention::ZeroPrefill),
            0.0
        );
    }

    #[test]
    fn zero_horizon_returns_terminal_weight() {
        let sys = delayed_example(0.5);
        let cost = unit_cost(&sys, 2.5, 0.0);
        let grid = build_grid(&sys, 0.0, None).unwrap();
        let sol = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
        assert_eq!(sol.p.len(), 1);
        assert_eq!(sol.p[0][(0, 0)], 2.5);
        assert_eq!(sol.phat[0][(0, 0)], 2.5);
    }

    #[test]
    fn terminal_gain() {
        // K(T) = −(R + Σ Ē'HĒ)⁻¹ B'H; here A = 0 so Ē = B̄.
        let sys = delayed_example(0.5);
        let cost = unit_cost(&sys, 2.0, 1.0);
        let grid = build_grid(&sys, 1.0, None).unwrap();
        let sol = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
        let expect = -(1.0 * 2.0) / (1.0 + 0.25 * 2.0);
        assert!((gain_at(&sol, 1.0).unwrap()[(0, 0)] - expect).abs() < 1e-14);
        assert!(gain_at(&sol, 0.3).is_err());

        let cost = unit_cost(&sys, 0.0, 1.0);
        let sol = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
        assert_eq!(gain_at(&sol, 1.0).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn forms_identical_without_delay() {
        let sys = scalar_sys(0.3, &[(1.0, 0.4, 0.0)]);
        let cost = unit_cost(&sys, 0.5, 1.0);
        let grid = build_grid(&sys, 1.0, Some(1.0 / 64.0)).unwrap();
        let a = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
        let b = solve_dre_hat_form(&sys, &cost, &grid, 0.0).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.k, b.k);
    }

    #[test]
    fn forms_agree_on_delayed_deterministic_case() {
        let sys = delayed_example(0.0);
        let cost = unit_cost(&sys, 0.0, 2.0);
        let grid = build_grid(&sys, 2.0, Some(1.0 / 512.0)).unwrap();
        let a = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
        let b = solve_dre_hat_form(&sys, &cost, &grid, 0.0).unwrap();
        let gap =
            a.p.iter()
                .zip(&b.p)
                .map(|(x, y)| (x - y).norm_max())
                .fold(0.0, f64::max);
        assert!(gap <= 1e-6, "gap {gap:e}");
    }

    #[test]
    fn solution_invariants() {
        let sys = delayed_example(0.5);
        let cost = unit_cost(&sys, 0.3, 2.0);
        let grid = build_grid(&sys, 2.0, Some(1.0 / 128.0)).unwrap();
        for sol in [
            solve_dre(&sys, &cost, &grid, 0.0).unwrap(),
            solve_dre_hat_form(&sys, &cost, &grid, 0.0).unwrap(),
        ] {
            for k in 0..sol.p.len() {
                let gap = &sol.p[k] - &sol.phat[k];
                assert!(linalg::min_eigenvalue(&gap).unwrap() >= -1e-8);
                assert!(linalg::min_eigenvalue(&sol.phat[k]).unwrap() >= -1e-8);
                let excess = &sol.omega[k] - &cost.r;
                assert!(linalg::min_eigenvalue(&excess).unwrap() >= -1e-8);
                let pi = sol.omega[k].congruence(&sol.k[k]);
                assert!((&pi - &sol.pi[k]).norm_max() <= 1e-8);
            }
        }
    }

    #[test]
    fn discount_continuous_at_zero() {
        let sys = delayed_example(0.5);
        let cost = unit_cost(&sys, 0.0, 1.0);
        let grid = build_grid(&sys, 1.0, None).unwrap();
        let a = solve_dre(&sys, &cost, &grid, 0.0).unwrap();
        let b = solve_dre(&sys, &cost, &grid, 1e-14).unwrap();
        assert!(a.discounted.is_none());
        assert_eq!(b.discounted, Some(1e-14));
        for (x, y) in a.p.iter().zip(&b.p) {
            assert!((x - y).norm_max() <= 1e-10);
        }
    }

    #[test]
    fn discount_ignores_terminal_weight() {
        let sys = delayed_example(0.5);
        let cost = unit_cost(&sys, 3.0, 1.0);
        let grid = build_grid(&sys, 1.0, None).unwrap();
        let sol = solve_dre(&sys, &cost, &grid, 0.5).unwrap();
        assert_eq!(sol.p.last().unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let sys = delayed_example(0.5);
        let cost = unit_cost(&sys, 0.0, 1.0);
        let other = scalar_sys(0.0, &[(0.0, 0.0, 0.0), (1.0, 0.5, 0.3)]);
        let grid = build_grid(&other, 1.0, Some(0.05)).unwrap();
        assert!(matches!(
            solve_dre(&sys, &cost, &grid, 0.0),
            Err(RiccatiError::Grid(_))
        ));
    }

    #[test]
    fn singular_omega_reported() {
        let sys = scalar_sys(0.0, &[(1.0, 0.0, 0.0)]);
        let mut cost = unit_cost(&sys, 0.0, 1.0);
        cost.r = scalar(0.0);
        let grid = build_grid(&sys, 1.0, None).unwrap();
        match solve_dre(&sys, &cost, &grid, 0.0) {
            Err(RiccatiError::Singular { t, .. }) => assert_eq!(t, 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn are_deterministic_scalar() {
        let sys = scalar_sys(0.0, &[(1.0, 0.0, 0.0)]);
        let g = solve_are(&sys, 0.0, &AreOptions::default()).unwrap();
        assert!((g.p[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((g.phat[(0, 0)] - 1.0).abs() < 1e-9);
        assert!((g.k[(0, 0)] + 1.0).abs() < 1e-9);
        assert!((g.omega[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(g.residual <= 1e-8);
    }

    /// Root of `1 − p²/(1+p) = 0` on `(0, 10)` by bisection.
    fn golden_by_bisection() -> f64 {
        let f = |p: f64| 1.0 - p * p / (1.0 + p);
        let (mut lo, mut hi) = (0.0f64, 10.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn are_stochastic_scalar() {
        let sys = scalar_sys(0.0, &[(1.0, 1.0, 0.0)]);
        let g = solve_are(&sys, 0.0, &AreOptions::default()).unwrap();
        let p = golden_by_bisection();
        assert!((g.p[(0, 0)] - p).abs() < 1e-9);
        assert!((g.k[(0, 0)] + p / (1.0 + p)).abs() < 1e-9);
    }

    #[test]
    fn are_uncontrollable_unstable_fails() {
        let sys = scalar_sys(1.0, &[(0.0, 0.0, 0.0)]);
        assert!(matches!(
            solve_are(&sys, 0.0, &AreOptions::default()),
            Err(RiccatiError::NotConverged { .. })
        ));
    }

    #[test]
    fn are_delayed_residual() {
        let sys = delayed_example(0.5);
        let g = solve_are(&sys, 0.0, &AreOptions::default()).unwrap();
        assert!(g.residual <= 1e-8, "{}", g.residual);
        assert!(linalg::min_eigenvalue(&(&g.p - &g.phat)).unwrap() >= -1e-10);
        // stationary window integral in closed form for a = 0: P − P̂ = h Π
        assert!(((g.p[(0, 0)] - g.phat[(0, 0)]) - 0.25 * g.pi0[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn certify_stable_uncontrolled() {
        let sys = scalar_sys(-1.0, &[(0.0, 0.0, 0.0)]);
        let opts = AreOptions {
            t_max: Some(4000.0),
            ..AreOptions::default()
        };
        let cert = certify_max_alpha(&sys, 5.0, 1e-3, &opts).unwrap();
        assert!((cert.alpha_max - 2.0).abs() < 0.05, "{}", cert.alpha_max);
        let p = cert.gain.p[(0, 0)];
        assert!((p - 1.0 / (2.0 - cert.alpha_max)).abs() < 1e-6 * p);
    }

    #[test]
    fn certify_saturates() {
        let sys = scalar_sys(0.0, &[(1.0, 0.0, 0.0)]);
        let cert = certify_max_alpha(&sys, 0.5, 1e-3, &AreOptions::default()).unwrap();
        assert_eq!(cert.alpha_max, 0.5);
        // closed form of 0 = αp + 1 − p²
        let p = (0.5 + (0.25f64 + 4.0).sqrt()) / 2.0;
        assert!((cert.gain.p[(0, 0)] - p).abs() < 1e-8);
    }

    #[test]
    fn certify_unstabilizable() {
        let sys = scalar_sys(1.0, &[(0.0, 0.0, 0.0)]);
        assert!(matches!(
            certify_max_alpha(&sys, 1.0, 1e-2, &AreOptions::default()),
            Err(RiccatiError::NotStabilizable(_))
        ));
    }
}
