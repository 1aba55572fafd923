//! Control history and the predictor state `ŷ(t|t)`.
//!
//! Between grid nodes the input is held constant, so the window integral
//! `Σ_i ∫₀^{h_i} e^{−Aτ} B_i u(t − h_i + τ) dτ` splits into exact cells:
//! cell `j` of channel `i` contributes `e^{−A j dt} C B_i u_{k−d_i+j}`
//! with `C = ∫₀^{dt} e^{−Aσ} dσ`. Only strictly past inputs are read, so the
//! feedback `u_k = K ŷ_k` is explicit.

use std::collections::VecDeque;

use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::model::{StochasticDelaySystem, TimeGrid, GRID_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("history needs {expected} samples, got {found}")]
    SampleCount { expected: usize, found: usize },
    #[error("history sample {index} has length {found}, expected {expected}")]
    SampleLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite control value")]
    NonFinite,
    #[error("grid error: {0}")]
    Grid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Past inputs `u_{k−1}, …, u_{k−d_r−1}` at the current node `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlHistory {
    dt: f64,
    m: usize,
    /// Most recent first.
    slots: VecDeque<Vec<f64>>,
    steps: usize,
}

impl ControlHistory {
    /// Builds the history at `t = 0` from samples of the past input at
    /// `−d_r·dt, …, −dt` (oldest first).
    pub fn init(
        samples: &[Vec<f64>],
        max_delay_steps: usize,
        m: usize,
        dt: f64,
    ) -> Result<Self, PredictorError> {
        if samples.len() != max_delay_steps {
            return Err(PredictorError::SampleCount {
                expected: max_delay_steps,
                found: samples.len(),
            });
        }
        for (index, s) in samples.iter().enumerate() {
            if s.len() != m {
                return Err(PredictorError::SampleLength {
                    index,
                    expected: m,
                    found: s.len(),
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(PredictorError::NonFinite);
            }
        }
        let mut slots: VecDeque<Vec<f64>> = samples.iter().rev().cloned().collect();
        // One extra slot so that after a push the input `d_r` steps back is
        // still readable.
        slots.push_back(samples.first().cloned().unwrap_or_else(|| vec![0.0; m]));
        Ok(Self {
            dt,
            m,
            slots,
            steps: 0,
        })
    }

    pub fn zeros(max_delay_steps: usize, m: usize, dt: f64) -> Self {
        Self::constant(max_delay_steps, &vec![0.0; m], dt)
    }

    pub fn constant(max_delay_steps: usize, c: &[f64], dt: f64) -> Self {
        Self {
            dt,
            m: c.len(),
            slots: std::iter::repeat_n(c.to_vec(), max_delay_steps + 1).collect(),
            steps: 0,
        }
    }

    /// Records `u` at the current node and advances one step.
    pub fn push(&mut self, u: &[f64]) -> Result<(), PredictorError> {
        if u.len() != self.m {
            return Err(PredictorError::Dimension(format!(
                "control has length {}, expected {}",
                u.len(),
                self.m
            )));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(PredictorError::NonFinite);
        }
        let mut slot = self
            .slots
            .pop_back()
            .expect("history has at least one slot");
        slot.copy_from_slice(u);
        self.slots.push_front(slot);
        self.steps += 1;
        Ok(())
    }

    /// The input `lag` steps back, `1 <= lag <= capacity`.
    pub fn lagged(&self, lag: usize) -> &[f64] {
        &self.slots[lag - 1]
    }

    pub fn newest(&self) -> &[f64] {
        self.lagged(1)
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn current_time(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

/// Precomputed history weights of `ŷ`.
#[derive(Clone, Debug)]
pub struct Predictor {
    n: usize,
    m: usize,
    dt: f64,
    /// `W_ℓ` for lags `ℓ = 1..=d_r`, summed over channels.
    lag_weights: Vec<Matrix>,
    /// `e^{−A j dt}` for `j = 0..d_r`.
    back_kernels: Vec<Matrix>,
    steps_per_delay: Vec<usize>,
}

impl Predictor {
    pub fn new(sys: &StochasticDelaySystem, grid: &TimeGrid) -> Result<Self, PredictorError> {
        if grid.steps_per_delay.len() != sys.channels().len() {
            return Err(PredictorError::Grid(
                "grid does not match channel count".into(),
            ));
        }
        for (ch, &d) in sys.channels().iter().zip(&grid.steps_per_delay) {
            if (d as f64 * grid.dt - ch.delay).abs() > GRID_TOL * ch.delay.max(1.0) {
                return Err(PredictorError::Grid(format!(
                    "delay {} is not a multiple of dt = {}",
                    ch.delay, grid.dt
                )));
            }
        }
        let (n, m) = (sys.state_dim(), sys.input_dim());
        let dt = grid.dt;
        let d_r = grid.max_delay_steps();
        let neg_a = -sys.a();
        let back_kernels = (0..d_r.max(1))
            .map(|j| linalg::mat_exp(&neg_a, j as f64 * dt))
            .collect::<Result<Vec<_>, _>>()?;
        let cell = linalg::mat_exp_integral(&neg_a, dt)?;
        let mut lag_weights = vec![Matrix::zeros(n, m); d_r];
        for (ch, &d) in sys.channels().iter().zip(&grid.steps_per_delay) {
            let cb = &cell * &ch.b;
            for j in 0..d {
                lag_weights[d - j - 1] += &(&back_kernels[j] * &cb);
            }
        }
        Ok(Self {
            n,
            m,
            dt,
            lag_weights,
            back_kernels,
            steps_per_delay: grid.steps_per_delay.clone(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn max_delay_steps(&self) -> usize {
        self.lag_weights.len()
    }

    /// History weight `W_ℓ`, `1 <= ℓ <= d_r`.
    pub fn lag_weight(&self, lag: usize) -> &Matrix {
        &self.lag_weights[lag - 1]
    }

    /// `e^{−A j dt}`, `0 <= j < max(d_r, 1)`.
    pub fn back_kernel(&self, j: usize) -> &Matrix {
        &self.back_kernels[j]
    }

    pub fn steps_per_delay(&self) -> &[usize] {
        &self.steps_per_delay
    }

    /// `ŷ(t|t)` written into `out`.
    pub fn state_into(&self, x: &[f64], hist: &ControlHistory, out: &mut [f64]) {
        out.copy_from_slice(x);
        for (idx, w) in self.lag_weights.iter().enumerate() {
            let u = hist.lagged(idx + 1);
            if u.iter().any(|&v| v != 0.0) {
                w.mul_vec_acc(u, out);
            }
        }
    }

    /// `ŷ(t|t) = x + Σ_ℓ W_ℓ u_{k−ℓ}`.
    pub fn state(&self, x: &[f64], hist: &ControlHistory) -> Result<Vec<f64>, PredictorError> {
        if x.len() != self.n {
            return Err(PredictorError::Dimension(format!(
                "state has length {}, expected {}",
                x.len(),
                self.n
            )));
        }
        if hist.input_dim() != self.m || hist.capacity() < self.max_delay_steps() {
            return Err(PredictorError::Grid(format!(
                "history of capacity {} cannot cover {} delay steps",
                hist.capacity(),
                self.max_delay_steps()
            )));
        }
        let mut out = vec![0.0; self.n];
        self.state_into(x, hist, &mut out);
        Ok(out)
    }

    /// The feedback `K ŷ` as `L x + Σ_ℓ M_ℓ u_{k−ℓ}` with `L = K` and
    /// `M_ℓ = K W_ℓ`.
    pub fn controller_form(&self, k: &Matrix) -> Result<(Matrix, Vec<Matrix>), PredictorError> {
        if k.rows() != self.m || k.cols() != self.n {
            return Err(PredictorError::Dimension(format!(
                "gain is {}x{}, expected {}x{}",
                k.rows(),
                k.cols(),
                self.m,
                self.n
            )));
        }
        Ok((k.clone(), self.lag_weights.iter().map(|w| k * w).collect()))
    }
}

/// `ŷ(t|t)` for a one-off evaluation.
pub fn predictor_state(
    x: &[f64],
    hist: &ControlHistory,
    sys: &StochasticDelaySystem,
    grid: &TimeGrid,
) -> Result<Vec<f64>, PredictorError> {
    Predictor::new(sys, grid)?.state(x, hist)
}

/// `u = K ŷ`.
pub fn control(k: &Matrix, yhat: &[f64]) -> Result<Vec<f64>, PredictorError> {
    if k.cols() != yhat.len() {
        return Err(PredictorError::Dimension(format!(
            "gain has {} columns, state has length {}",
            k.cols(),
            yhat.len()
        )));
    }
    Ok(k.mul_vec(yhat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_grid, Channel};
    use proptest::prelude::*;

    fn scalar_sys(a: f64, b1: f64, h: f64) -> StochasticDelaySystem {
        StochasticDelaySystem::new(
            Matrix::scalar(a),
            vec![
                Channel::new(Matrix::scalar(0.0), Matrix::scalar(0.0), 0.0),
                Channel::new(Matrix::scalar(b1), Matrix::scalar(0.0), h),
            ],
        )
        .unwrap()
    }

    #[test]
    fn history_init_and_push() {
        let h = ControlHistory::init(&[vec![1.0], vec![2.0], vec![3.0]], 3, 1, 0.1).unwrap();
        assert_eq!(h.lagged(1), &[3.0]);
        assert_eq!(h.lagged(3), &[1.0]);
        assert_eq!(h.capacity(), 4);
        assert_eq!(h.current_time(), 0.0);
        assert!(ControlHistory::init(&[vec![1.0]], 3, 1, 0.1).is_err());
        assert!(ControlHistory::init(&[vec![1.0, 2.0]], 1, 1, 0.1).is_err());

        let mut h = ControlHistory::zeros(2, 1, 0.5);
        assert!(h.slots.iter().all(|s| s == &[0.0]));
        for v in [1.0, 2.0, 3.0, 4.0] {
            h.push(&[v]).unwrap();
            assert_eq!(h.newest(), &[v]);
            assert_eq!(h.capacity(), 3);
        }
        assert_eq!(h.lagged(3), &[2.0]);
        assert!((h.current_time() - 2.0).abs() < 1e-15);
        assert!(h.push(&[f64::NAN]).is_err());
        assert!(h.push(&[1.0, 2.0]).is_err());

        let c = ControlHistory::constant(2, &[0.5, -1.0], 0.1);
        assert_eq!(c.lagged(2), &[0.5, -1.0]);
    }

    #[test]
    fn zero_history_gives_state() {
        let sys = scalar_sys(0.7, 1.0, 0.5);
        let grid = build_grid(&sys, 1.0, Some(0.05)).unwrap();
        let hist = ControlHistory::zeros(grid.max_delay_steps(), 1, grid.dt);
        assert_eq!(
            predictor_state(&[1.5], &hist, &sys, &grid).unwrap(),
            vec![1.5]
        );
    }

    #[test]
    fn constant_history_without_drift() {
        let sys = scalar_sys(0.0, 2.0, 0.5);
        let grid = build_grid(&sys, 1.0, Some(0.05)).unwrap();
        let hist = ControlHistory::constant(grid.max_delay_steps(), &[3.0], grid.dt);
        let y = predictor_state(&[1.0], &hist, &sys, &grid).unwrap();
        assert!((y[0] - (1.0 + 2.0 * 3.0 * 0.5)).abs() < 1e-13);
    }

    #[test]
    fn unstable_scalar_window() {
        let sys = scalar_sys(1.0, 1.0, 1.0);
        let grid = build_grid(&sys, 1.0, Some(0.01)).unwrap();
        let hist = ControlHistory::constant(grid.max_delay_steps(), &[1.0], grid.dt);
        let y = predictor_state(&[0.0], &hist, &sys, &grid).unwrap();
        // independent fine midpoint rule for ∫₀¹ e^{−τ} dτ
        let fine = 200_000;
        let q: f64 = (0..fine)
            .map(|i| (-(i as f64 + 0.5) / fine as f64).exp() / fine as f64)
            .sum();
        assert!((y[0] - q).abs() < 1e-9);
        assert!((y[0] - 0.632121).abs() < 1e-6);
    }

    #[test]
    fn misaligned_grid_rejected() {
        let sys = scalar_sys(0.0, 1.0, 0.5);
        let other = scalar_sys(0.0, 1.0, 0.3);
        let grid = build_grid(&other, 1.0, Some(0.1)).unwrap();
        assert!(matches!(
            Predictor::new(&sys, &grid),
            Err(PredictorError::Grid(_))
        ));
    }

    #[test]
    fn control_examples() {
        assert_eq!(
            control(&Matrix::zeros(1, 2), &[1.0, 2.0]).unwrap(),
            vec![0.0]
        );
        assert_eq!(control(&Matrix::scalar(-1.0), &[2.0]).unwrap(), vec![-2.0]);
        assert_eq!(
            control(&Matrix::identity(2), &[1.0, 2.0]).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(control(&Matrix::identity(2), &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn controller_form_matches_feedback(
            a in -1.0f64..1.0, b in -2.0f64..2.0, k in -2.0f64..2.0,
            x in -3.0f64..3.0, us in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let sys = scalar_sys(a, b, 0.4);
            let grid = build_grid(&sys, 1.0, Some(0.1)).unwrap();
            let pred = Predictor::new(&sys, &grid).unwrap();
            let samples: Vec<Vec<f64>> = us.iter().map(|&u| vec![u]).collect();
            let hist = ControlHistory::init(&samples, 4, 1, grid.dt).unwrap();
            let gain = Matrix::scalar(k);
            let direct = control(&gain, &pred.state(&[x], &hist).unwrap()).unwrap()[0];
            let (l, ms) = pred.controller_form(&gain).unwrap();
            let mut via_form = l[(0, 0)] * x;
            for (idx, m) in ms.iter().enumerate() {
                via_form += m[(0, 0)] * hist.lagged(idx + 1)[0];
            }
            prop_assert!((direct - via_form).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }
}
