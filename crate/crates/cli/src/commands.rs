//! The four pipelines behind the binary. Each returns an [`Outcome`] whose
//! exit code follows the table in [`exit`].

use std::path::{Path, PathBuf};

use delay_lqr_core::linalg::{self, Matrix};
use delay_lqr_core::model::ModelError;
use delay_lqr_core::oracle::{self, OracleError};
use delay_lqr_core::riccati::{self, CostConvention, RiccatiError, RiccatiSolution, SteadyGain};
use delay_lqr_core::sim::{self, GainSchedule, SimConfig, SimError};
use delay_lqr_core::TimeGrid;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Format, GainBlock, Problem};
use crate::output::{
    self, CertificateError, CertificateFile, Conventions, GainRecord, OutputError,
};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Numerical failure not covered by a dedicated code.
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const SINGULAR_OMEGA: i32 = 3;
    pub const ONLY_ALPHA_ZERO: i32 = 4;
    pub const NOT_STABILIZABLE: i32 = 5;
    pub const DIVERGED: i32 = 6;
    pub const SIZE_CAP: i32 = 7;
}

/// Environment variable capping simulation threads.
pub const THREADS_ENV: &str = "DELAY_LQR_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Certificate(#[from] CertificateError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("closed loop empirically unstable: {0}")]
    Unstable(String),
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::Config(ConfigError::Model(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) | Self::Certificate(_) => exit::CONFIG,
            Self::Riccati(RiccatiError::Singular { .. }) => exit::SINGULAR_OMEGA,
            Self::Riccati(RiccatiError::NotStabilizable(_)) => exit::NOT_STABILIZABLE,
            Self::Riccati(RiccatiError::Model(_) | RiccatiError::Grid(_)) => exit::CONFIG,
            Self::Sim(SimError::Diverged { .. }) | Self::Unstable(_) => exit::DIVERGED,
            Self::Sim(SimError::Config(_) | SimError::Model(_)) => exit::CONFIG,
            Self::Oracle(OracleError::Size { .. }) => exit::SIZE_CAP,
            _ => exit::FAILURE,
        }
    }
}

/// Result of a command that ran to completion.
#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub message: String,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn ok(message: String, files: Vec<PathBuf>) -> Self {
        Self {
            code: exit::OK,
            message,
            files,
        }
    }
}

/// Output directory: `--out`, else `output.directory` relative to the
/// config, else the working directory.
pub fn out_dir(problem: &Problem, out: Option<&Path>) -> PathBuf {
    match (out, &problem.output.directory) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(d)) => problem.base_dir.join(d),
        (None, None) => PathBuf::from("."),
    }
}

/// Reads the thread cap from [`THREADS_ENV`].
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(s) if s.trim().is_empty() => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(t) if t >= 1 => Ok(Some(t)),
            _ => Err(CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {s:?}"
            ))),
        },
    }
}

fn min_eig(m: &Matrix) -> Result<f64, CliError> {
    Ok(linalg::min_eigenvalue(m).map_err(RiccatiError::from)?)
}

#[derive(Serialize)]
struct PredictedCost {
    /// `x0'P̂(0)x0`: zero input on `[−h_r, 0)`, optimal afterwards.
    zero_prefill: f64,
    /// `x0'P(0)x0`: zero input until `h_r`.
    zero_through_delay: f64,
}

#[derive(Serialize)]
struct SolveSummary {
    conventions: Conventions,
    alpha: f64,
    horizon: f64,
    dt: f64,
    steps: usize,
    x0: Option<Vec<f64>>,
    predicted_cost: Option<PredictedCost>,
    phat_0: Vec<Vec<f64>>,
    p_0: Vec<Vec<f64>>,
    k_0: Vec<Vec<f64>>,
    p_terminal: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    min_eig_omega: f64,
    min_eig_omega_at: f64,
}

fn riccati_csv(sol: &RiccatiSolution) -> Result<String, CliError> {
    let n = sol.p[0].rows();
    let m = sol.k[0].rows();
    let mut header = vec!["t".to_string()];
    header.extend(output::matrix_header("Phat", n, n));
    header.extend(output::matrix_header("P", n, n));
    header.extend(output::matrix_header("K", m, n));
    header.push("min_eig_Omega".into());
    let mut rows = Vec::with_capacity(sol.p.len());
    for node in 0..sol.p.len() {
        let mut row = vec![sol.grid.time(node)];
        output::push_matrix(&mut row, &sol.phat[node]);
        output::push_matrix(&mut row, &sol.p[node]);
        output::push_matrix(&mut row, &sol.k[node]);
        row.push(min_eig(&sol.omega[node])?);
        rows.push(row);
    }
    Ok(output::csv_text(&header, &rows))
}

pub fn solve(problem: &Problem, out: &Path) -> Result<Outcome, CliError> {
    let sol = riccati::solve_dre(&problem.sys, &problem.cost, &problem.grid, problem.alpha())?;
    let mut files = Vec::new();
    if problem.wants(Format::Csv) {
        let path = out.join("riccati.csv");
        output::write_file(&path, &riccati_csv(&sol)?)?;
        files.push(path);
    }
    let mut worst = (f64::INFINITY, 0.0);
    for (node, w) in sol.omega.iter().enumerate() {
        let e = min_eig(w)?;
        if e < worst.0 {
            worst = (e, sol.grid.time(node));
        }
    }
    let x0 = problem.sim.as_ref().map(|s| s.x0.clone());
    let predicted_cost = x0.as_ref().map(|x| PredictedCost {
        zero_prefill: riccati::predicted_cost(&sol, x, CostConvention::ZeroPrefill),
        zero_through_delay: riccati::predicted_cost(&sol, x, CostConvention::ZeroThroughDelay),
    });
    let last = sol.p.len() - 1;
    let summary = SolveSummary {
        conventions: Conventions::default(),
        alpha: problem.alpha(),
        horizon: problem.grid.horizon(),
        dt: problem.grid.dt,
        steps: problem.grid.horizon_steps,
        x0,
        phat_0: sol.phat[0].to_rows(),
        p_0: sol.p[0].to_rows(),
        k_0: sol.k[0].to_rows(),
        p_terminal: sol.p[last].to_rows(),
        h: problem.cost.h.to_rows(),
        min_eig_omega: worst.0,
        min_eig_omega_at: worst.1,
        predicted_cost,
    };
    if problem.wants(Format::Json) {
        let path = out.join("summary.json");
        output::write_json(&path, &summary)?;
        files.push(path);
    }
    let msg = match &summary.predicted_cost {
        Some(c) => format!(
            "solved on {} steps; predicted cost {:.10}",
            summary.steps, c.zero_prefill
        ),
        None => format!("solved on {} steps", summary.steps),
    };
    Ok(Outcome::ok(msg, files))
}

fn gain_record(g: &SteadyGain) -> Result<GainRecord, CliError> {
    Ok(GainRecord {
        alpha: g.alpha,
        phat: g.phat.to_rows(),
        p: g.p.to_rows(),
        pi0: g.pi0.to_rows(),
        omega: g.omega.to_rows(),
        k: g.k.to_rows(),
        residual: g.residual,
        iterations: g.iterations,
        min_eig_phat: min_eig(&g.phat)?,
        min_eig_p_minus_phat: min_eig(&(&g.p - &g.phat))?,
    })
}

pub fn certify(
    problem: &Problem,
    out: &Path,
    alpha_hi: f64,
    tol: f64,
) -> Result<Outcome, CliError> {
    let opts = problem.solver.are_options();
    let cert = riccati::certify_max_alpha(&problem.sys, alpha_hi, tol, &opts)?;
    let file = CertificateFile {
        conventions: Conventions::default(),
        weights: "Q = I, R = I, no terminal weight".into(),
        alpha_hi,
        tol,
        alpha_max: cert.alpha_max,
        certified: gain_record(&cert.gain)?,
        base: gain_record(&cert.base)?,
    };
    let path = out.join("certificate.json");
    output::write_json(&path, &file)?;
    let (code, message) = if cert.alpha_max > 0.0 {
        (
            exit::OK,
            format!("certified decay rate alpha_max = {}", cert.alpha_max),
        )
    } else {
        (
            exit::ONLY_ALPHA_ZERO,
            "stabilizable, but no positive decay rate could be certified".into(),
        )
    };
    Ok(Outcome {
        code,
        message,
        files: vec![path],
    })
}

/// Reads and self-checks a certificate file.
pub fn load_certificate(path: &Path) -> Result<CertificateFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(CertificateFile::parse(&text)?)
}

#[derive(Serialize)]
struct SimSummary {
    conventions: Conventions,
    seed: u64,
    paths: usize,
    dt: f64,
    t_sim: f64,
    alpha: f64,
    gain: String,
    /// `x0'P̂(0)x0` when the gain is the finite-horizon optimum.
    predicted_cost: Option<f64>,
    cost_mean: f64,
    cost_stderr: f64,
    fitted_rate: Option<f64>,
    divergence_ratio: f64,
    diverged: usize,
    first_divergence: Option<f64>,
}

fn sim_gain(
    problem: &Problem,
    grid: &TimeGrid,
) -> Result<(GainSchedule, String, Option<f64>), CliError> {
    let setup = problem.sim.as_ref().expect("checked by caller");
    let (n, m) = (problem.sys.state_dim(), problem.sys.input_dim());
    Ok(match &setup.gain {
        GainBlock::FiniteHorizon => {
            let mut cost = problem.cost.clone();
            cost.horizon = setup.t_sim;
            let sol = riccati::solve_dre(&problem.sys, &cost, grid, problem.alpha())?;
            let pred = riccati::predicted_cost(&sol, &setup.x0, CostConvention::ZeroPrefill);
            (
                GainSchedule::from_solution(&sol),
                "finite_horizon".into(),
                Some(pred),
            )
        }
        GainBlock::Steady => {
            let g = riccati::solve_are_weighted(
                &problem.sys,
                &problem.cost.q,
                &problem.cost.r,
                problem.alpha(),
                &problem.solver.are_options(),
            )?;
            (GainSchedule::from_steady(&g), "steady".into(), None)
        }
        GainBlock::Zero => (
            GainSchedule::Constant(Matrix::zeros(m, n)),
            "zero".into(),
            None,
        ),
        GainBlock::Matrix(rows) => (
            GainSchedule::Constant(Matrix::from_rows(rows).expect("checked on load")),
            "matrix".into(),
            None,
        ),
        GainBlock::Certificate(p) => {
            let path = problem.base_dir.join(p);
            let cert = load_certificate(&path)?;
            let k = cert.gain();
            if k.rows() != m || k.cols() != n {
                return Err(CliError::Usage(format!(
                    "certificate gain is {}x{}, system needs {m}x{n}",
                    k.rows(),
                    k.cols()
                )));
            }
            (
                GainSchedule::Constant(k),
                format!("certificate at alpha = {}", cert.alpha_max),
                None,
            )
        }
    })
}

pub fn simulate(problem: &Problem, out: &Path, seed: Option<u64>) -> Result<Outcome, CliError> {
    let setup = problem
        .sim
        .as_ref()
        .ok_or_else(|| CliError::Usage("simulate needs a sim block".into()))?;
    let grid = TimeGrid::with_step(&problem.sys, setup.t_sim, setup.dt)?;
    let (gain, gain_label, predicted_cost) = sim_gain(problem, &grid)?;
    let seed = seed.unwrap_or(setup.seed);
    let mut cfg = SimConfig::new(setup.dt, setup.t_sim, setup.paths, seed, setup.x0.clone());
    cfg.prefill = setup.prefill.clone();
    cfg.threads = threads_from_env()?;
    cfg.cost = Some(problem.cost.clone());
    cfg.alpha = problem.alpha();
    let res = sim::simulate_paths(&problem.sys, &gain, &cfg).map_err(|e| match e {
        SimError::Diverged { node } => CliError::Unstable(format!(
            "all {} paths diverged, first at t = {}",
            setup.paths,
            grid.time(node)
        )),
        e => e.into(),
    })?;

    let mut files = Vec::new();
    if problem.wants(Format::Csv) {
        let header: Vec<String> = ["t", "mean_sq_x", "stderr_x", "mean_sq_u", "stderr_u"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows: Vec<Vec<f64>> = (0..res.times.len())
            .map(|k| {
                vec![
                    res.times[k],
                    res.mean_sq_x[k],
                    res.stderr_x[k],
                    res.mean_sq_u[k],
                    res.stderr_u[k],
                ]
            })
            .collect();
        let path = out.join("trajectories.csv");
        output::write_file(&path, &output::csv_text(&header, &rows))?;
        files.push(path);
    }
    let summary = SimSummary {
        conventions: Conventions::default(),
        seed,
        paths: res.paths,
        dt: setup.dt,
        t_sim: setup.t_sim,
        alpha: problem.alpha(),
        gain: gain_label,
        predicted_cost,
        cost_mean: res.cost_mean,
        cost_stderr: res.cost_stderr,
        fitted_rate: res.fitted_rate,
        divergence_ratio: res.divergence_ratio,
        diverged: res.diverged,
        first_divergence: res.first_divergence.map(|k| grid.time(k)),
    };
    if problem.wants(Format::Json) {
        let path = out.join("sim_summary.json");
        output::write_json(&path, &summary)?;
        files.push(path);
    }
    if res.divergence_ratio > 0.5 {
        return Ok(Outcome {
            code: exit::DIVERGED,
            message: format!(
                "closed loop empirically unstable: {} of {} paths diverged",
                res.diverged, res.paths
            ),
            files,
        });
    }
    Ok(Outcome::ok(
        format!(
            "cost {:.6} +/- {:.6} over {} paths",
            res.cost_mean, res.cost_stderr, res.paths
        ),
        files,
    ))
}

/// Default step ladder for the oracle comparison.
pub const DEFAULT_RESOLUTIONS: [f64; 3] = [1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0];

pub fn oracle_compare(
    problem: &Problem,
    out: &Path,
    resolutions: &[f64],
) -> Result<Outcome, CliError> {
    if problem.alpha() != 0.0 {
        return Err(CliError::Usage("oracle-compare requires alpha = 0".into()));
    }
    if resolutions.is_empty() {
        return Err(CliError::Usage("no resolutions given".into()));
    }
    let x0 = match &problem.sim {
        Some(s) => s.x0.clone(),
        None => vec![1.0; problem.sys.state_dim()],
    };
    let mut rows = Vec::with_capacity(resolutions.len());
    for &dt in resolutions {
        let grid = TimeGrid::with_step(&problem.sys, problem.cost.horizon, dt)?;
        // Size is checked before the continuous solve, which is the slower one.
        let aug = oracle::build_augmented(&problem.sys, &problem.cost, &grid)?;
        let sol = riccati::solve_dre(&problem.sys, &problem.cost, &grid, 0.0)?;
        let disc = oracle::solve_discrete_lq(&aug, grid.horizon_steps)?;
        let rep = oracle::compare(&sol, &aug, &disc, &x0)?;
        rows.push(vec![
            dt,
            rep.continuous_cost,
            rep.discrete_cost,
            rep.rel_error,
        ]);
    }
    let header: Vec<String> = ["dt", "continuous_cost", "discrete_cost", "rel_error"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let path = out.join("oracle.csv");
    output::write_file(&path, &output::csv_text(&header, &rows))?;
    let last = rows.last().expect("non-empty")[3];
    Ok(Outcome::ok(
        format!("final relative error {last:.3e}"),
        vec![path],
    ))
}
