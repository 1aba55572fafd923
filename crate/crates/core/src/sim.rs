//! Euler–Maruyama Monte Carlo of the closed loop under predictor feedback.
//!
//! Each path draws its Brownian increments from its own ChaCha stream
//! (`seed`, path index), and paths are reduced in fixed-size blocks that
//! are merged in block order, so results do not depend on the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::model::{derive_maps, CostSpec, ModelError, StochasticDelaySystem, TimeGrid};
use crate::predictor::{ControlHistory, Predictor, PredictorError};
use crate::riccati::{RiccatiSolution, SteadyGain};

/// A state entry beyond this magnitude marks the path as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e100;
const BLOCK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("all paths diverged; first bad node {node}")]
    Diverged { node: usize },
    #[error("decay rate undefined: {0}")]
    Rate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Input applied on `[−h_r, 0)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Prefill {
    Zero,
    Constant(Vec<f64>),
    /// Samples at `−d_r·dt, …, −dt`, oldest first.
    Sampled(Vec<Vec<f64>>),
}

/// Feedback gain, fixed or indexed by grid node.
#[derive(Clone, Debug)]
pub enum GainSchedule {
    Constant(Matrix),
    Nodes { dt: f64, k: Vec<Matrix> },
}

impl GainSchedule {
    pub fn from_solution(sol: &RiccatiSolution) -> Self {
        Self::Nodes {
            dt: sol.grid.dt,
            k: sol.k.clone(),
        }
    }

    pub fn from_steady(gain: &SteadyGain) -> Self {
        Self::Constant(gain.k.clone())
    }

    fn at(&self, node: usize) -> &Matrix {
        match self {
            Self::Constant(k) => k,
            Self::Nodes { k, .. } => &k[node],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub dt: f64,
    pub t_sim: f64,
    pub paths: usize,
    pub master_seed: u64,
    pub x0: Vec<f64>,
    pub prefill: Prefill,
    /// Worker cap; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Weights of the running cost, evaluated on the reduced state over
    /// `[0, t_sim]`. The horizon field is ignored.
    pub cost: Option<CostSpec>,
    /// Cost discount rate.
    pub alpha: f64,
}

impl SimConfig {
    pub fn new(dt: f64, t_sim: f64, paths: usize, master_seed: u64, x0: Vec<f64>) -> Self {
        Self {
            dt,
            t_sim,
            paths,
            master_seed,
            x0,
            prefill: Prefill::Zero,
            threads: None,
            cost: None,
            alpha: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub times: Vec<f64>,
    pub mean_sq_x: Vec<f64>,
    pub stderr_x: Vec<f64>,
    pub mean_sq_u: Vec<f64>,
    pub stderr_u: Vec<f64>,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// Rate `ρ` in `E‖x‖² ≈ C e^{−ρt}` over the trailing half.
    pub fitted_rate: Option<f64>,
    /// Per node, per component: mean of `y − ŷ(t|t)`.
    pub noise_mean: Vec<Vec<f64>>,
    pub noise_stderr: Vec<Vec<f64>>,
    pub paths: usize,
    pub diverged: usize,
    pub divergence_ratio: f64,
    pub first_divergence: Option<usize>,
}

/// Streaming mean and variance; blocks are combined pairwise.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, v: f64) {
        self.count += 1.0;
        let delta = v - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (v - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = *other;
            return;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count / count;
        self.m2 += other.m2 + delta * delta * self.count * other.count / count;
        self.count = count;
    }

    pub fn count(&self) -> usize {
        self.count as usize
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.count < 2.0 {
            return 0.0;
        }
        (self.m2.max(0.0) / (self.count - 1.0) / self.count).sqrt()
    }
}

/// Per-node view handed to observers.
struct NodeView<'a> {
    k: usize,
    x: &'a [f64],
    u: &'a [f64],
    yhat: &'a [f64],
    /// `y − ŷ`, present when requested.
    noise: Option<&'a [f64]>,
    hist: &'a ControlHistory,
}

/// Simulation data shared by every path.
struct Plant {
    n: usize,
    m: usize,
    a: Matrix,
    delays: Vec<usize>,
    b: Vec<Matrix>,
    b_bar: Vec<Matrix>,
    /// `e^{−A j dt} B̄_i`, `j < d_i`.
    noise_maps: Vec<Vec<Matrix>>,
    pred: Predictor,
    /// `e^{A dt}`, shifts the running history sums by one node.
    forward: Matrix,
    /// Per channel `(leaving, entering)` weights of the predictor sum.
    pred_shift: Vec<(Matrix, Matrix)>,
    dt: f64,
    steps: usize,
    d_r: usize,
}

impl Plant {
    fn new(sys: &StochasticDelaySystem, cfg: &SimConfig) -> Result<(Self, TimeGrid), SimError> {
        if cfg.paths == 0 {
            return Err(SimError::Config("paths must be >= 1".into()));
        }
        if cfg.x0.len() != sys.state_dim() {
            return Err(SimError::Config(format!(
                "x0 has length {}, expected {}",
                cfg.x0.len(),
                sys.state_dim()
            )));
        }
        if !(cfg.alpha.is_finite() && cfg.alpha >= 0.0) {
            return Err(SimError::Config(format!(
                "alpha must be >= 0, got {}",
                cfg.alpha
            )));
        }
        let grid = TimeGrid::with_step(sys, cfg.t_sim, cfg.dt)?;
        let pred = Predictor::new(sys, &grid)?;
        let noise_maps = sys
            .channels()
            .iter()
            .zip(&grid.steps_per_delay)
            .map(|(ch, &d)| (0..d).map(|j| pred.back_kernel(j) * &ch.b_bar).collect())
            .collect();
        let cell = linalg::mat_exp_integral(&-sys.a(), grid.dt)?;
        let pred_shift = sys
            .channels()
            .iter()
            .zip(&grid.steps_per_delay)
            .map(|(ch, &d)| {
                let cb = &cell * &ch.b;
                let enter = pred.back_kernel(d.saturating_sub(1)) * &cb;
                (cb, enter)
            })
            .collect();
        let plant = Self {
            n: sys.state_dim(),
            m: sys.input_dim(),
            a: sys.a().clone(),
            delays: grid.steps_per_delay.clone(),
            b: sys.channels().iter().map(|c| c.b.clone()).collect(),
            b_bar: sys.channels().iter().map(|c| c.b_bar.clone()).collect(),
            noise_maps,
            pred,
            forward: linalg::mat_exp(sys.a(), grid.dt)?,
            pred_shift,
            dt: grid.dt,
            steps: grid.horizon_steps,
            d_r: grid.max_delay_steps(),
        };
        Ok((plant, grid))
    }

    fn channels(&self) -> usize {
        self.delays.len()
    }

    fn check_gain(&self, gain: &GainSchedule) -> Result<(), SimError> {
        let shape = |k: &Matrix| {
            if k.rows() != self.m || k.cols() != self.n {
                Err(SimError::Config(format!(
                    "gain is {}x{}, expected {}x{}",
                    k.rows(),
                    k.cols(),
                    self.m,
                    self.n
                )))
            } else {
                Ok(())
            }
        };
        match gain {
            GainSchedule::Constant(k) => shape(k),
            GainSchedule::Nodes { dt, k } => {
                if (dt - self.dt).abs() > 1e-12 * self.dt {
                    return Err(SimError::Config(format!(
                        "gain schedule step {dt} differs from simulation step {}",
                        self.dt
                    )));
                }
                if k.len() < self.steps + 1 {
                    return Err(SimError::Config(format!(
                        "gain schedule covers {} nodes, simulation needs {}",
                        k.len(),
                        self.steps + 1
                    )));
                }
                k.iter().try_for_each(shape)
            }
        }
    }

    fn history(&self, prefill: &Prefill) -> Result<ControlHistory, SimError> {
        Ok(match prefill {
            Prefill::Zero => ControlHistory::zeros(self.d_r, self.m, self.dt),
            Prefill::Constant(c) => {
                if c.len() != self.m || c.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::Config("constant prefill has wrong length".into()));
                }
                ControlHistory::constant(self.d_r, c, self.dt)
            }
            Prefill::Sampled(s) => ControlHistory::init(s, self.d_r, self.m, self.dt)?,
        })
    }

    /// Increments `ΔW_{i,s}` for `s < N + d_r`, laid out `[s * channels + i]`.
    fn increments(&self, seed: u64, path: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        let sd = self.dt.sqrt();
        let len = (self.steps + self.d_r) * self.channels();
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect()
    }

    /// `Σ_i Σ_{j<d_i} e^{−Ajdt}B̄_i u_{k−d_i+j} ΔW_{i,k+j}` into `out`.
    fn noise_term(&self, k: usize, hist: &ControlHistory, dw: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let ch = self.channels();
        let mut tmp = vec![0.0; self.m];
        for (i, &d) in self.delays.iter().enumerate() {
            for j in 0..d {
                let w = dw[(k + j) * ch + i];
                let u = hist.lagged(d - j);
                for (t, &v) in tmp.iter_mut().zip(u) {
                    *t = v * w;
                }
                self.noise_maps[i][j].mul_vec_acc(&tmp, out);
            }
        }
    }

    /// Advances `ŷ − x` and `y − ŷ` from node `k` to `k + 1`; `hist` must
    /// already hold `u_k`.
    fn shift_sums(
        &self,
        k: usize,
        hist: &ControlHistory,
        dw: &[f64],
        pred_sum: &mut [f64],
        noise: Option<&mut Vec<f64>>,
        tmp: &mut [f64],
    ) {
        let ch = self.channels();
        let u_now = hist.lagged(1);
        let mut scaled = vec![0.0; self.m];
        let mut entering = vec![0.0; self.n];
        for (i, &d) in self.delays.iter().enumerate() {
            if d == 0 {
                continue;
            }
            let (leave, enter) = &self.pred_shift[i];
            for (s, &v) in scaled.iter_mut().zip(hist.lagged(d + 1)) {
                *s = -v;
            }
            leave.mul_vec_acc(&scaled, pred_sum);
            enter.mul_vec_acc(u_now, &mut entering);
        }
        tmp.fill(0.0);
        self.forward.mul_vec_acc(pred_sum, tmp);
        for ((s, t), e) in pred_sum.iter_mut().zip(tmp.iter()).zip(&entering) {
            *s = t + e;
        }
        let Some(noise) = noise else { return };
        entering.fill(0.0);
        for (i, &d) in self.delays.iter().enumerate() {
            if d == 0 {
                continue;
            }
            let w = dw[k * ch + i];
            for (s, &v) in scaled.iter_mut().zip(hist.lagged(d + 1)) {
                *s = -v * w;
            }
            self.noise_maps[i][0].mul_vec_acc(&scaled, noise);
            let w = dw[(k + d) * ch + i];
            for (s, &v) in scaled.iter_mut().zip(u_now) {
                *s = v * w;
            }
            self.noise_maps[i][d - 1].mul_vec_acc(&scaled, &mut entering);
        }
        tmp.fill(0.0);
        self.forward.mul_vec_acc(noise, tmp);
        for ((s, t), e) in noise.iter_mut().zip(tmp.iter()).zip(&entering) {
            *s = t + e;
        }
    }

    /// Simulates one path, calling `observe` at every node `0..=N`.
    /// Returns the first divergent node, if any.
    fn run_path(
        &self,
        gain: &GainSchedule,
        cfg: &SimConfig,
        path: u64,
        with_noise: bool,
        mut observe: impl FnMut(&NodeView, &[f64]),
    ) -> Result<Option<usize>, SimError> {
        let dw = self.increments(cfg.master_seed, path);
        let mut hist = self.history(&cfg.prefill)?;
        let (n, ch) = (self.n, self.channels());
        let mut x = cfg.x0.clone();
        let mut yhat = vec![0.0; n];
        let mut noise = vec![0.0; n];
        let mut drift = vec![0.0; n];
        let mut scaled = vec![0.0; self.m];
        // Running sums `ŷ − x` and `y − ŷ`, advanced by the exact one-step
        // recursion and recomputed directly every d_r nodes.
        let mut pred_sum = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for k in 0..=self.steps {
            if self.d_r > 0 && k % self.d_r == 0 {
                self.pred.state_into(&x, &hist, &mut yhat);
                for ((s, y), xi) in pred_sum.iter_mut().zip(&yhat).zip(&x) {
                    *s = y - xi;
                }
                if with_noise {
                    self.noise_term(k, &hist, &dw, &mut noise);
                }
            } else {
                for ((y, xi), s) in yhat.iter_mut().zip(&x).zip(&pred_sum) {
                    *y = xi + s;
                }
            }
            let u = gain.at(k).mul_vec(&yhat);
            let view = NodeView {
                k,
                x: &x,
                u: &u,
                yhat: &yhat,
                noise: with_noise.then_some(noise.as_slice()),
                hist: &hist,
            };
            observe(&view, &dw);
            if k == self.steps {
                break;
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Ok(Some(k));
            }
            hist.push(&u)?;
            if self.d_r > 0 {
                self.shift_sums(
                    k,
                    &hist,
                    &dw,
                    &mut pred_sum,
                    with_noise.then_some(&mut noise),
                    &mut tmp,
                );
            }
            drift.fill(0.0);
            self.a.mul_vec_acc(&x, &mut drift);
            for i in 0..ch {
                let ud = hist.lagged(self.delays[i] + 1);
                if ud.iter().all(|&v| v == 0.0) {
                    continue;
                }
                self.b[i].mul_vec_acc(ud, &mut drift);
                let w = dw[k * ch + i];
                for (s, &v) in scaled.iter_mut().zip(ud) {
                    *s = v * w;
                }
                self.b_bar[i].mul_vec_acc(&scaled, &mut x);
            }
            for (xi, di) in x.iter_mut().zip(&drift) {
                *xi += di * self.dt;
            }
            if x.iter()
                .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
            {
                return Ok(Some(k + 1));
            }
        }
        Ok(None)
    }

    fn pool(&self, threads: Option<usize>) -> Result<Option<rayon::ThreadPool>, SimError> {
        threads
            .map(|t| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t.max(1))
                    .build()
                    .map_err(|e| SimError::Config(format!("thread pool: {e}")))
            })
            .transpose()
    }

    /// Runs `f` over path blocks in parallel, returning results in block order.
    fn blocks<T: Send>(
        &self,
        cfg: &SimConfig,
        f: impl Fn(std::ops::Range<usize>) -> Result<T, SimError> + Sync,
    ) -> Result<Vec<T>, SimError> {
        let count = cfg.paths.div_ceil(BLOCK);
        let work = || {
            (0..count)
                .into_par_iter()
                .map(|b| f(b * BLOCK..((b + 1) * BLOCK).min(cfg.paths)))
                .collect::<Result<Vec<_>, _>>()
        };
        match self.pool(cfg.threads)? {
            Some(pool) => pool.install(work),
            None => work(),
        }
    }
}

/// Trapezoid cost integral along one path.
#[derive(Clone, Debug)]
pub struct RunningCost<'a> {
    cost: &'a CostSpec,
    alpha: f64,
    dt: f64,
    steps: usize,
    total: f64,
}

impl<'a> RunningCost<'a> {
    pub fn new(cost: &'a CostSpec, alpha: f64, dt: f64, steps: usize) -> Self {
        Self {
            cost,
            alpha,
            dt,
            steps,
            total: 0.0,
        }
    }

    /// Adds node `k` with reduced state `y` and input `u`.
    pub fn add(&mut self, k: usize, y: &[f64], u: &[f64]) {
        let t = k as f64 * self.dt;
        let discount = (-self.alpha * t).exp();
        let w = if k == 0 || k == self.steps {
            0.5 * self.dt
        } else {
            self.dt
        };
        if self.steps > 0 {
            self.total += discount * w * (self.cost.q.quad_form(y) + self.cost.r.quad_form(u));
        }
        if k == self.steps {
            self.total += discount * self.cost.h.quad_form(y);
        }
    }

    pub fn total(&self) -> f64 {
        self.total
    }
}

/// Stored trajectory of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSamples {
    pub y: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

/// Mean and standard error of the discounted cost over stored paths.
pub fn estimate_cost(paths: &[PathSamples], cost: &CostSpec, alpha: f64, dt: f64) -> (f64, f64) {
    let mut acc = Welford::default();
    for p in paths {
        let steps = p.y.len().saturating_sub(1);
        let mut rc = RunningCost::new(cost, alpha, dt, steps);
        for (k, (y, u)) in p.y.iter().zip(&p.u).enumerate() {
            rc.add(k, y, u);
        }
        acc.push(rc.total());
    }
    (acc.mean(), acc.stderr())
}

#[derive(Clone)]
struct BlockStats {
    sq_x: Vec<Welford>,
    sq_u: Vec<Welford>,
    noise: Vec<Welford>,
    cost: Welford,
    diverged: usize,
    first_divergence: Option<usize>,
}

impl BlockStats {
    fn new(nodes: usize, n: usize, with_noise: bool) -> Self {
        Self {
            sq_x: vec![Welford::default(); nodes],
            sq_u: vec![Welford::default(); nodes],
            noise: vec![Welford::default(); if with_noise { nodes * n } else { 0 }],
            cost: Welford::default(),
            diverged: 0,
            first_divergence: None,
        }
    }

    fn merge(&mut self, o: &BlockStats) {
        for (a, b) in self.sq_x.iter_mut().zip(&o.sq_x) {
            a.merge(b);
        }
        for (a, b) in self.sq_u.iter_mut().zip(&o.sq_u) {
            a.merge(b);
        }
        for (a, b) in self.noise.iter_mut().zip(&o.noise) {
            a.merge(b);
        }
        self.cost.merge(&o.cost);
        self.diverged += o.diverged;
        self.first_divergence = match (self.first_divergence, o.first_divergence) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|e| e * e).sum()
}

/// Monte Carlo of the closed loop `u_k = K_k ŷ_k`.
pub fn simulate_paths(
    sys: &StochasticDelaySystem,
    gain: &GainSchedule,
    cfg: &SimConfig,
) -> Result<SimResult, SimError> {
    let (plant, grid) = Plant::new(sys, cfg)?;
    plant.check_gain(gain)?;
    plant.history(&cfg.prefill)?;
    let nodes = grid.horizon_steps + 1;
    let n = plant.n;
    let with_noise = true;

    let blocks = plant.blocks(cfg, |range| {
        let mut block = BlockStats::new(nodes, n, with_noise);
        let mut sq_x = vec![0.0; nodes];
        let mut sq_u = vec![0.0; nodes];
        let mut noise = vec![0.0; if with_noise { nodes * n } else { 0 }];
        let mut y = vec![0.0; n];
        for p in range {
            let mut rc = cfg
                .cost
                .as_ref()
                .map(|c| RunningCost::new(c, cfg.alpha, plant.dt, grid.horizon_steps));
            let bad = plant.run_path(gain, cfg, p as u64, with_noise, |v, _| {
                sq_x[v.k] = sq(v.x);
                sq_u[v.k] = sq(v.u);
                if let Some(z) = v.noise {
                    noise[v.k * n..(v.k + 1) * n].copy_from_slice(z);
                    if let Some(rc) = rc.as_mut() {
                        for ((yi, a), b) in y.iter_mut().zip(v.yhat).zip(z) {
                            *yi = a + b;
                        }
                        rc.add(v.k, &y, v.u);
                    }
                }
            })?;
            if let Some(node) = bad {
                block.diverged += 1;
                block.first_divergence = Some(block.first_divergence.map_or(node, |f| f.min(node)));
                continue;
            }
            for k in 0..nodes {
                block.sq_x[k].push(sq_x[k]);
                block.sq_u[k].push(sq_u[k]);
            }
            for (acc, &v) in block.noise.iter_mut().zip(&noise) {
                acc.push(v);
            }
            if let Some(rc) = rc {
                block.cost.push(rc.total());
            }
        }
        Ok(block)
    })?;

    let mut total = BlockStats::new(nodes, n, with_noise);
    for b in &blocks {
        total.merge(b);
    }
    if total.diverged == cfg.paths {
        return Err(SimError::Diverged {
            node: total.first_divergence.unwrap_or(0),
        });
    }
    let times: Vec<f64> = (0..nodes).map(|k| grid.time(k)).collect();
    let mean_sq_x: Vec<f64> = total.sq_x.iter().map(Welford::mean).collect();
    let fitted_rate = fit_decay_rate(&times, &mean_sq_x, 0.5).ok();
    let split = |acc: &[Welford], f: fn(&Welford) -> f64| -> Vec<Vec<f64>> {
        acc.chunks(n.max(1))
            .map(|c| c.iter().map(f).collect())
            .collect()
    };
    Ok(SimResult {
        stderr_x: total.sq_x.iter().map(Welford::stderr).collect(),
        mean_sq_u: total.sq_u.iter().map(Welford::mean).collect(),
        stderr_u: total.sq_u.iter().map(Welford::stderr).collect(),
        cost_mean: total.cost.mean(),
        cost_stderr: total.cost.stderr(),
        fitted_rate,
        noise_mean: split(&total.noise, Welford::mean),
        noise_stderr: split(&total.noise, Welford::stderr),
        paths: cfg.paths,
        diverged: total.diverged,
        divergence_ratio: total.diverged as f64 / cfg.paths as f64,
        first_divergence: total.first_divergence,
        times,
        mean_sq_x,
    })
}

/// Least-squares rate `ρ` with `values ≈ C e^{−ρt}` over the trailing
/// `window` fraction of the samples.
pub fn fit_decay_rate(times: &[f64], values: &[f64], window: f64) -> Result<f64, SimError> {
    if times.len() != values.len() {
        return Err(SimError::Rate("times and values differ in length".into()));
    }
    if !(window > 0.0 && window <= 1.0) {
        return Err(SimError::Rate(format!(
            "window must be in (0, 1], got {window}"
        )));
    }
    let len = times.len();
    if len < 2 {
        return Err(SimError::Rate("need at least two samples".into()));
    }
    let start = (((1.0 - window) * (len - 1) as f64).floor() as usize).min(len - 2);
    let (ts, vs) = (&times[start..], &values[start..]);
    if vs.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(SimError::Rate("non-positive value in fit window".into()));
    }
    let count = ts.len() as f64;
    let t_mean = ts.iter().sum::<f64>() / count;
    let l_mean = vs.iter().map(|v| v.ln()).sum::<f64>() / count;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, v) in ts.iter().zip(vs) {
        num += (t - t_mean) * (v.ln() - l_mean);
        den += (t - t_mean) * (t - t_mean);
    }
    if den == 0.0 {
        return Err(SimError::Rate("degenerate time window".into()));
    }
    Ok(-num / den)
}

/// Node-wise gap between the reduced state integrated directly and the
/// reduced state reconstructed from the simulated `x`.
#[derive(Clone, Debug)]
pub struct ReductionReport {
    /// Max over paths of `‖y_direct − y_reconstructed‖_∞` per node.
    pub per_node: Vec<f64>,
    pub max_discrepancy: f64,
}

/// Simulates `x` in the delayed coordinates and, on the same increments
/// (channel `i` shifted by `d_i`), integrates the delay-free reduced
/// dynamics `dy = (Ay + Bu)dt + Σ_i E_i u dw_i(t + h_i)`; compares `y`
/// against its reconstruction from `x` and the input history.
pub fn simulate_reduction_check(
    sys: &StochasticDelaySystem,
    gain: &GainSchedule,
    cfg: &SimConfig,
) -> Result<ReductionReport, SimError> {
    let (plant, grid) = Plant::new(sys, cfg)?;
    plant.check_gain(gain)?;
    let maps = derive_maps(sys)?;
    let nodes = grid.horizon_steps + 1;
    let n = plant.n;
    let ch = plant.channels();

    let blocks = plant.blocks(cfg, |range| {
        let mut worst = vec![0.0f64; nodes];
        for p in range {
            let mut direct: Vec<f64> = Vec::new();
            let mut next = vec![0.0; n];
            let mut scaled = vec![0.0; plant.m];
            let bad = plant.run_path(gain, cfg, p as u64, true, |v, dw| {
                let z = v.noise.expect("noise requested");
                let recon: Vec<f64> = v.yhat.iter().zip(z).map(|(a, b)| a + b).collect();
                if v.k == 0 {
                    direct = recon.clone();
                }
                let gap = direct
                    .iter()
                    .zip(&recon)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                worst[v.k] = worst[v.k].max(gap);
                // advance the direct integration with u_k
                next.copy_from_slice(&direct);
                let mut drift = vec![0.0; n];
                plant.a.mul_vec_acc(&direct, &mut drift);
                maps.b.mul_vec_acc(v.u, &mut drift);
                for (d, x) in drift.iter().zip(next.iter_mut()) {
                    *x += d * plant.dt;
                }
                if v.k < grid.horizon_steps {
                    for i in 0..ch {
                        let w = dw[(v.k + plant.delays[i]) * ch + i];
                        for (s, &u) in scaled.iter_mut().zip(v.u) {
                            *s = u * w;
                        }
                        maps.e[i].mul_vec_acc(&scaled, &mut next);
                    }
                }
                std::mem::swap(&mut direct, &mut next);
            })?;
            if let Some(node) = bad {
                return Err(SimError::Diverged { node });
            }
        }
        Ok(worst)
    })?;

    let mut per_node = vec![0.0f64; nodes];
    for b in &blocks {
        for (w, v) in per_node.iter_mut().zip(b) {
            *w = w.max(*v);
        }
    }
    let max_discrepancy = per_node.iter().copied().fold(0.0, f64::max);
    Ok(ReductionReport {
        per_node,
        max_discrepancy,
    })
}

/// Monte Carlo estimate of
/// `V(t) = e^{αt} E[y'P y − y' ∫₀^{h_r} Π(θ) ŷ(t|t+θ) dθ]` with
/// `Π(θ) = e^{Ã'θ} Π(0) e^{Ãθ}` under the stationary gain.
#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovPoint {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
}

pub fn lyapunov_profile(
    sys: &StochasticDelaySystem,
    steady: &SteadyGain,
    cfg: &SimConfig,
    checkpoints: &[usize],
) -> Result<Vec<LyapunovPoint>, SimError> {
    let (plant, grid) = Plant::new(sys, cfg)?;
    let gain = GainSchedule::from_steady(steady);
    plant.check_gain(&gain)?;
    if let Some(&k) = checkpoints.iter().find(|&&k| k > grid.horizon_steps) {
        return Err(SimError::Config(format!(
            "checkpoint {k} beyond the horizon"
        )));
    }
    let n = plant.n;
    let d_r = plant.d_r;
    let ch = plant.channels();
    let mut a_shift = sys.a().clone();
    for i in 0..n {
        a_shift[(i, i)] += 0.5 * steady.alpha;
    }
    let pis = (0..=d_r)
        .map(|j| {
            Ok(steady
                .pi0
                .congruence(&linalg::mat_exp(&a_shift, j as f64 * plant.dt)?))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let weight = |j: usize| {
        if j == 0 || j == d_r {
            0.5 * plant.dt
        } else {
            plant.dt
        }
    };

    let blocks = plant.blocks(cfg, |range| {
        let mut acc = vec![Welford::default(); checkpoints.len()];
        for p in range {
            let mut values = vec![0.0; checkpoints.len()];
            let bad = plant.run_path(&gain, cfg, p as u64, false, |v, dw| {
                let Some(slot) = checkpoints.iter().position(|&c| c == v.k) else {
                    return;
                };
                // partial noise sums: ŷ(t|t + jdt) for j = 0..=d_r
                let mut partial = vec![v.yhat.to_vec()];
                let mut tmp = vec![0.0; plant.m];
                for j in 0..d_r {
                    let mut next = partial[j].clone();
                    for i in 0..ch {
                        let d = plant.delays[i];
                        if j < d {
                            let w = dw[(v.k + j) * ch + i];
                            for (t, &u) in tmp.iter_mut().zip(v.hist.lagged(d - j)) {
                                *t = u * w;
                            }
                            plant.noise_maps[i][j].mul_vec_acc(&tmp, &mut next);
                        }
                    }
                    partial.push(next);
                }
                let y = &partial[d_r];
                let mut val = steady.p.quad_form(y);
                if d_r > 0 {
                    for (j, yj) in partial.iter().enumerate() {
                        let piy = pis[j].mul_vec(yj);
                        val -= weight(j) * y.iter().zip(&piy).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                values[slot] = (steady.alpha * v.k as f64 * plant.dt).exp() * val;
            })?;
            if bad.is_none() {
                for (a, &v) in acc.iter_mut().zip(&values) {
                    a.push(v);
                }
            }
        }
        Ok(acc)
    })?;

    let mut total = vec![Welford::default(); checkpoints.len()];
    for b in &blocks {
        for (t, v) in total.iter_mut().zip(b) {
            t.merge(v);
        }
    }
    Ok(checkpoints
        .iter()
        .zip(&total)
        .map(|(&k, w)| LyapunovPoint {
            t: grid.time(k),
            mean: w.mean(),
            stderr: w.stderr(),
        })
        .collect())
}
