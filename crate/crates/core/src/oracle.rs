//! Discrete augmented-state LQ problem used as an independent reference.
//!
//! The delayed system is discretized by Euler with `Φ = I + A dt` on the
//! state `z_k = [x_k; u_{k−1}; …; u_{k−d_r}]`. Channel `i` injects
//! `B_i dt u_{k−d_i}` and the noise `B̄_i √dt ξ_{i,k} u_{k−d_i}`, which is
//! state-multiplicative when `d_i > 0` and input-multiplicative otherwise.
//!
//! The running cost is placed on the discrete reduced state
//! `y_k = x_k + Σ_i Σ_{ℓ=1}^{d_i} Φ^{−(d_i−ℓ+1)} (B_i dt + B̄_i √dt ξ_{i,k−ℓ+d_i}) u_{k−ℓ}`,
//! whose conditional second moment is a quadratic form in `z_k`.
//! No matrix exponential is involved anywhere.

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::model::{CostSpec, StochasticDelaySystem, TimeGrid, GRID_TOL};
use crate::riccati::RiccatiSolution;

/// Cap on `d_r · m`, the size of the history block.
pub const MAX_HISTORY: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("augmented state too large: d_r*m = {size} exceeds {cap}")]
    Size { size: usize, cap: usize },
    #[error("inner matrix not positive definite at step {step}")]
    Singular { step: usize },
    #[error("configuration mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-channel noise map: `G z + D u` multiplies `ξ_i`.
#[derive(Clone, Debug)]
pub struct NoiseChannel {
    pub g: Option<Matrix>,
    pub d: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct DiscreteAugmented {
    pub a_z: Matrix,
    pub b_z: Matrix,
    pub noise: Vec<NoiseChannel>,
    pub q_z: Matrix,
    pub r_z: Matrix,
    pub h_z: Matrix,
    pub n: usize,
    pub m: usize,
    pub d_r: usize,
    pub dt: f64,
}

impl DiscreteAugmented {
    pub fn dim(&self) -> usize {
        self.n + self.m * self.d_r
    }
}

/// Column offset of history slot `ℓ` (input `u_{k−ℓ}`), `1 <= ℓ <= d_r`.
fn slot(n: usize, m: usize, lag: usize) -> usize {
    n + m * (lag - 1)
}

pub fn build_augmented(
    sys: &StochasticDelaySystem,
    cost: &CostSpec,
    grid: &TimeGrid,
) -> Result<DiscreteAugmented, OracleError> {
    if grid.steps_per_delay.len() != sys.channels().len() {
        return Err(OracleError::Mismatch(
            "grid does not match channel count".into(),
        ));
    }
    for (ch, &d) in sys.channels().iter().zip(&grid.steps_per_delay) {
        if (d as f64 * grid.dt - ch.delay).abs() > GRID_TOL * ch.delay.max(1.0) {
            return Err(OracleError::Mismatch(format!(
                "delay {} is not a multiple of dt = {}",
                ch.delay, grid.dt
            )));
        }
    }
    let (n, m) = (sys.state_dim(), sys.input_dim());
    let d_r = grid.max_delay_steps();
    if d_r * m > MAX_HISTORY {
        return Err(OracleError::Size {
            size: d_r * m,
            cap: MAX_HISTORY,
        });
    }
    let dt = grid.dt;
    let sdt = dt.sqrt();
    let nz = n + m * d_r;

    let mut phi = Matrix::identity(n);
    phi.add_scaled(dt, sys.a());

    let mut a_z = Matrix::zeros(nz, nz);
    let mut b_z = Matrix::zeros(nz, m);
    a_z.set_block(0, 0, &phi);
    if d_r > 0 {
        b_z.set_block(slot(n, m, 1), 0, &Matrix::identity(m));
        for lag in 2..=d_r {
            a_z.set_block(slot(n, m, lag), slot(n, m, lag - 1), &Matrix::identity(m));
        }
    }
    let mut noise = Vec::with_capacity(sys.channels().len());
    for (ch, &d) in sys.channels().iter().zip(&grid.steps_per_delay) {
        let drive = ch.b.scale(dt);
        let shock = ch.b_bar.scale(sdt);
        let has_shock = ch.b_bar.norm_max() > 0.0;
        if d == 0 {
            let mut top = b_z.block(0, 0, n, m);
            top += &drive;
            b_z.set_block(0, 0, &top);
            noise.push(NoiseChannel {
                g: None,
                d: has_shock.then(|| {
                    let mut dm = Matrix::zeros(nz, m);
                    dm.set_block(0, 0, &shock);
                    dm
                }),
            });
        } else {
            let col = slot(n, m, d);
            let mut blk = a_z.block(0, col, n, m);
            blk += &drive;
            a_z.set_block(0, col, &blk);
            noise.push(NoiseChannel {
                g: has_shock.then(|| {
                    let mut g = Matrix::zeros(nz, nz);
                    g.set_block(0, col, &shock);
                    g
                }),
                d: None,
            });
        }
    }

    // Reduced-state map y = M z and the variance of its future noise.
    let phi_inv = linalg::inverse(&phi)?;
    let mut phi_neg = vec![Matrix::identity(n)];
    for p in 1..=d_r {
        let next = &phi_neg[p - 1] * &phi_inv;
        phi_neg.push(next);
    }
    let mut reduce = Matrix::zeros(n, nz);
    reduce.set_block(0, 0, &Matrix::identity(n));
    let mut var_q = Matrix::zeros(nz, nz);
    let mut var_h = Matrix::zeros(nz, nz);
    for (ch, &d) in sys.channels().iter().zip(&grid.steps_per_delay) {
        for lag in 1..=d {
            let back = &phi_neg[d - lag + 1];
            let col = slot(n, m, lag);
            let mut blk = reduce.block(0, col, n, m);
            blk += &(back * &ch.b).scale(dt);
            reduce.set_block(0, col, &blk);
            let e = back * &ch.b_bar;
            for (target, w) in [(&mut var_q, &cost.q), (&mut var_h, &cost.h)] {
                let mut vb = target.block(col, col, m, m);
                vb.add_scaled(dt, &w.congruence(&e));
                target.set_block(col, col, &vb);
            }
        }
    }
    let mut q_z = cost.q.congruence(&reduce);
    q_z += &var_q;
    let mut q_z = q_z.scale(dt);
    q_z.symmetrize();
    let mut h_z = cost.h.congruence(&reduce);
    h_z += &var_h;
    h_z.symmetrize();

    Ok(DiscreteAugmented {
        a_z,
        b_z,
        noise,
        q_z,
        r_z: cost.r.scale(dt),
        h_z,
        n,
        m,
        d_r,
        dt,
    })
}

/// Backward recursion output: `S_0` and the feedback `u_k = F_k z_k`.
#[derive(Clone, Debug)]
pub struct DiscreteSolution {
    pub s0: Matrix,
    pub gains: Vec<Matrix>,
}

impl DiscreteSolution {
    /// `z₀'S₀z₀` with a zero history block.
    pub fn cost_from_state(&self, x0: &[f64]) -> f64 {
        let n = x0.len();
        self.s0.block(0, 0, n, n).quad_form(x0)
    }
}

/// `X' S X` with the sparse factor on the left of both products.
fn congruence_sparse(s: &Matrix, xt: &Matrix) -> Matrix {
    let xts = xt * s;
    let mut out = (xt * &xts.transpose()).transpose();
    out.symmetrize();
    out
}

pub fn solve_discrete_lq(
    aug: &DiscreteAugmented,
    steps: usize,
) -> Result<DiscreteSolution, OracleError> {
    let a_t = aug.a_z.transpose();
    let b_t = aug.b_z.transpose();
    let noise_t: Vec<(Option<Matrix>, Option<Matrix>)> = aug
        .noise
        .iter()
        .map(|c| {
            (
                c.g.as_ref().map(Matrix::transpose),
                c.d.as_ref().map(Matrix::transpose),
            )
        })
        .collect();
    let mut s = aug.h_z.clone();
    let mut gains = Vec::with_capacity(steps);
    for step in (0..steps).rev() {
        let bts = &b_t * &s;
        let mut inner = &aug.r_z + &(&bts * &aug.b_z);
        let mut cross = &bts * &aug.a_z;
        let mut next = aug.q_z.clone();
        next += &congruence_sparse(&s, &a_t);
        for (c, (gt, dt_)) in aug.noise.iter().zip(&noise_t) {
            if let Some(gt) = gt {
                next += &congruence_sparse(&s, gt);
            }
            if let (Some(d), Some(dt_)) = (&c.d, dt_) {
                let dts = dt_ * &s;
                inner += &(&dts * d);
                if let Some(g) = &c.g {
                    cross += &(&dts * g);
                }
            }
        }
        inner.symmetrize();
        let lo = linalg::min_eigenvalue(&inner)?;
        if lo.is_nan() || lo <= 1e-13 * inner.norm_max().max(f64::MIN_POSITIVE) {
            return Err(OracleError::Singular { step });
        }
        let gain = -&linalg::solve(&inner, &cross)?;
        next += &(&cross.transpose() * &gain);
        next.symmetrize();
        s = next;
        gains.push(gain);
    }
    gains.reverse();
    Ok(DiscreteSolution { s0: s, gains })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub continuous_cost: f64,
    pub discrete_cost: f64,
    /// `|c − d| / max(1, |d|)`.
    pub rel_error: f64,
    /// Max-norm gap between `K(0)` and the state block of the first
    /// discrete gain.
    pub gain_gap: f64,
}

/// Compares `x₀'P̂(0)x₀` with the discrete optimum under zero past input.
pub fn compare(
    sol: &RiccatiSolution,
    aug: &DiscreteAugmented,
    disc: &DiscreteSolution,
    x0: &[f64],
) -> Result<CompareReport, OracleError> {
    if sol.discounted.is_some() {
        return Err(OracleError::Mismatch(
            "comparison requires alpha = 0".into(),
        ));
    }
    if (sol.grid.dt - aug.dt).abs() > 1e-12 * aug.dt || sol.grid.horizon_steps != disc.gains.len() {
        return Err(OracleError::Mismatch("grids differ".into()));
    }
    if x0.len() != aug.n {
        return Err(OracleError::Mismatch(format!(
            "x0 has length {}, expected {}",
            x0.len(),
            aug.n
        )));
    }
    let continuous_cost = sol.phat[0].quad_form(x0);
    let discrete_cost = disc.cost_from_state(x0);
    let gain_gap = disc
        .gains
        .first()
        .map(|g| (&g.block(0, 0, aug.m, aug.n) - &sol.k[0]).norm_max())
        .unwrap_or(0.0);
    Ok(CompareReport {
        continuous_cost,
        discrete_cost,
        rel_error: (continuous_cost - discrete_cost).abs() / discrete_cost.abs().max(1.0),
        gain_gap,
    })
}
