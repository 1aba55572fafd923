//! Problem configuration: a single JSON document with `system`, `cost`,
//! `discount`, `solver`, `sim` and `output` blocks. Matrices are row-major
//! nested arrays.

use std::path::{Path, PathBuf};

use delay_lqr_core::model::{build_grid, ModelError};
use delay_lqr_core::riccati::AreOptions;
use delay_lqr_core::sim::Prefill;
use delay_lqr_core::{Channel, CostSpec, DiscountSpec, Matrix, StochasticDelaySystem, TimeGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{field}: {reason}")]
    Field { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn field_err(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        reason: reason.into(),
    }
}

pub type Rows = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub system: SystemBlock,
    pub cost: CostBlock,
    #[serde(default)]
    pub discount: DiscountBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub a: Rows,
    pub channels: Vec<ChannelBlock>,
}

/// A channel given either by its drift and diffusion maps, or as a
/// random-gain link `κ = μ + ξ` acting along `direction`, which expands to
/// `B = μ·direction`, `B̄ = σ·direction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelBlock {
    Maps {
        b: Rows,
        b_bar: Rows,
        delay: f64,
    },
    RandomGain {
        direction: Rows,
        mu: f64,
        sigma: f64,
        delay: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBlock {
    pub q: Rows,
    pub r: Rows,
    /// Terminal weight; zero when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Rows>,
    pub horizon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscountBlock {
    #[serde(default)]
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    /// Step hint for the finite-horizon solve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_delay: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub t_sim: f64,
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub prefill: PrefillBlock,
    #[serde(default)]
    pub gain: GainBlock,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefillBlock {
    #[default]
    Zero,
    Constant(Vec<f64>),
    /// Oldest first, one sample per grid step on `[−h_r, 0)`.
    Samples(Rows),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainBlock {
    /// Time-varying gain of the finite-horizon problem on `[0, t_sim]`.
    FiniteHorizon,
    /// Stationary gain at the configured discount.
    #[default]
    Steady,
    Zero,
    Matrix(Rows),
    /// Path to a `certificate.json`, relative to the config file.
    Certificate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<String>,
    #[serde(default = "all_formats")]
    pub formats: Vec<Format>,
}

fn all_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: None,
            formats: all_formats(),
        }
    }
}

/// Validated simulation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimSetup {
    pub dt: f64,
    pub t_sim: f64,
    pub paths: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    pub prefill: Prefill,
    pub gain: GainBlock,
}

/// A config that passed every model check.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub sys: StochasticDelaySystem,
    pub cost: CostSpec,
    pub discount: DiscountSpec,
    /// Grid of the finite-horizon solve.
    pub grid: TimeGrid,
    pub solver: SolverBlock,
    pub sim: Option<SimSetup>,
    pub output: OutputBlock,
    /// Directory of the config file; relative paths resolve against it.
    pub base_dir: PathBuf,
}

pub fn matrix(field: &str, rows: &Rows) -> Result<Matrix, ConfigError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(field_err(field, "matrix must have at least one entry"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(field_err(field, "entries must be finite"));
    }
    Matrix::from_rows(rows).map_err(|e| field_err(field, e.to_string()))
}

fn channel(i: usize, block: &ChannelBlock) -> Result<Channel, ConfigError> {
    let at = |name: &str| format!("system.channels[{i}].{name}");
    Ok(match block {
        ChannelBlock::Maps { b, b_bar, delay } => {
            Channel::new(matrix(&at("b"), b)?, matrix(&at("b_bar"), b_bar)?, *delay)
        }
        ChannelBlock::RandomGain {
            direction,
            mu,
            sigma,
            delay,
        } => {
            if !(mu.is_finite() && sigma.is_finite()) {
                return Err(field_err(at("mu"), "mu and sigma must be finite"));
            }
            let d = matrix(&at("direction"), direction)?;
            Channel::new(d.scale(*mu), d.scale(*sigma), *delay)
        }
    })
}

impl SolverBlock {
    pub fn are_options(&self) -> AreOptions {
        let mut o = AreOptions::default();
        if let Some(t) = self.tol {
            o.tol = t;
        }
        o.t_max = self.t_max;
        if let Some(s) = self.steps_per_delay {
            o.steps_per_delay = s;
        }
        o
    }
}

impl ProblemConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Builds and checks the problem; relative paths resolve against
    /// `base_dir`.
    pub fn validate(&self, base_dir: &Path) -> Result<Problem, ConfigError> {
        let a = matrix("system.a", &self.system.a)?;
        if self.system.channels.is_empty() {
            return Err(field_err(
                "system.channels",
                "at least one channel is required",
            ));
        }
        let channels = self
            .system
            .channels
            .iter()
            .enumerate()
            .map(|(i, c)| channel(i, c))
            .collect::<Result<Vec<_>, _>>()?;
        let sys = StochasticDelaySystem::new(a, channels)?;
        let (n, m) = (sys.state_dim(), sys.input_dim());

        let h = match &self.cost.h {
            Some(h) => matrix("cost.h", h)?,
            None => Matrix::zeros(n, n),
        };
        let cost = CostSpec::new(
            &sys,
            matrix("cost.q", &self.cost.q)?,
            matrix("cost.r", &self.cost.r)?,
            h,
            self.cost.horizon,
        )?;
        let discount = DiscountSpec::new(self.discount.alpha)?;

        let solver = self.solver.clone().unwrap_or_default();
        if let Some(t) = solver.tol {
            if !(t.is_finite() && t > 0.0) {
                return Err(field_err("solver.tol", "must be positive"));
            }
        }
        if let Some(t) = solver.t_max {
            if !(t.is_finite() && t > 0.0) {
                return Err(field_err("solver.t_max", "must be positive"));
            }
        }
        if solver.steps_per_delay == Some(0) {
            return Err(field_err("solver.steps_per_delay", "must be >= 1"));
        }
        let grid = build_grid(&sys, cost.horizon, solver.dt)?;

        let sim = self.sim.as_ref().map(|s| sim_setup(&sys, s)).transpose()?;
        if let Some(s) = &sim {
            if let GainBlock::Matrix(rows) = &s.gain {
                let k = matrix("sim.gain.matrix", rows)?;
                if k.rows() != m || k.cols() != n {
                    return Err(field_err(
                        "sim.gain.matrix",
                        format!("expected {m}x{n}, found {}x{}", k.rows(), k.cols()),
                    ));
                }
            }
        }
        if self.output.formats.is_empty() {
            return Err(field_err(
                "output.formats",
                "at least one format is required",
            ));
        }
        Ok(Problem {
            sys,
            cost,
            discount,
            grid,
            solver,
            sim,
            output: self.output.clone(),
            base_dir: base_dir.to_path_buf(),
        })
    }
}

fn sim_setup(sys: &StochasticDelaySystem, s: &SimBlock) -> Result<SimSetup, ConfigError> {
    let (n, m) = (sys.state_dim(), sys.input_dim());
    if !(s.t_sim.is_finite() && s.t_sim > 0.0) {
        return Err(field_err("sim.t_sim", "must be positive"));
    }
    let dt = match s.dt {
        Some(dt) => {
            TimeGrid::with_step(sys, s.t_sim, dt)
                .map_err(|e| field_err("sim.dt", format!("{e} (t_sim = {})", s.t_sim)))?;
            dt
        }
        None => {
            build_grid(sys, s.t_sim, None)
                .map_err(|e| field_err("sim.dt", format!("{e} (t_sim = {})", s.t_sim)))?
                .dt
        }
    };
    if s.paths == 0 {
        return Err(field_err("sim.paths", "must be >= 1"));
    }
    if s.x0.len() != n || s.x0.iter().any(|v| !v.is_finite()) {
        return Err(field_err(
            "sim.x0",
            format!("expected {n} finite entries, found {}", s.x0.len()),
        ));
    }
    let prefill = match &s.prefill {
        PrefillBlock::Zero => Prefill::Zero,
        PrefillBlock::Constant(c) => {
            if c.len() != m || c.iter().any(|v| !v.is_finite()) {
                return Err(field_err(
                    "sim.prefill.constant",
                    format!("expected {m} finite entries"),
                ));
            }
            Prefill::Constant(c.clone())
        }
        PrefillBlock::Samples(rows) => {
            let d_r = (sys.max_delay() / dt).round() as usize;
            if rows.len() != d_r || rows.iter().any(|r| r.len() != m) {
                return Err(field_err(
                    "sim.prefill.samples",
                    format!("expected {d_r} samples of length {m}"),
                ));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(field_err("sim.prefill.samples", "entries must be finite"));
            }
            Prefill::Sampled(rows.clone())
        }
    };
    Ok(SimSetup {
        dt,
        t_sim: s.t_sim,
        paths: s.paths,
        seed: s.seed,
        x0: s.x0.clone(),
        prefill,
        gain: s.gain.clone(),
    })
}

impl Problem {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        ProblemConfig::from_json(&text)?.validate(&base)
    }

    pub fn alpha(&self) -> f64 {
        self.discount.alpha()
    }

    /// Canonical config: channels in validated order and in map form, the
    /// terminal weight explicit, the sim step resolved.
    pub fn to_config(&self) -> ProblemConfig {
        let channels = self
            .sys
            .channels()
            .iter()
            .map(|c| ChannelBlock::Maps {
                b: c.b.to_rows(),
                b_bar: c.b_bar.to_rows(),
                delay: c.delay,
            })
            .collect();
        let solver = (self.solver != SolverBlock::default()).then(|| self.solver.clone());
        ProblemConfig {
            system: SystemBlock {
                a: self.sys.a().to_rows(),
                channels,
            },
            cost: CostBlock {
                q: self.cost.q.to_rows(),
                r: self.cost.r.to_rows(),
                h: Some(self.cost.h.to_rows()),
                horizon: self.cost.horizon,
            },
            discount: DiscountBlock {
                alpha: self.alpha(),
            },
            solver,
            sim: self.sim.as_ref().map(|s| SimBlock {
                dt: Some(s.dt),
                t_sim: s.t_sim,
                paths: s.paths,
                seed: s.seed,
                x0: s.x0.clone(),
                prefill: match &s.prefill {
                    Prefill::Zero => PrefillBlock::Zero,
                    Prefill::Constant(c) => PrefillBlock::Constant(c.clone()),
                    Prefill::Sampled(r) => PrefillBlock::Samples(r.clone()),
                },
                gain: s.gain.clone(),
            }),
            output: self.output.clone(),
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"{
        "system": {"a": [[0.0]], "channels": [{"b": [[1.0]], "b_bar": [[0.0]], "delay": 0.0}]},
        "cost": {"q": [[1.0]], "r": [[1.0]], "horizon": 1.0}
    }"#;

    fn parse(s: &str) -> Result<Problem, ConfigError> {
        ProblemConfig::from_json(s)?.validate(Path::new("."))
    }

    #[test]
    fn minimal_config_defaults() {
        let p = parse(SCALAR).unwrap();
        assert_eq!(p.alpha(), 0.0);
        assert_eq!(p.cost.h, Matrix::scalar(0.0));
        assert!(p.sim.is_none());
        assert!(p.wants(Format::Csv) && p.wants(Format::Json));
    }

    #[test]
    fn random_gain_channel_expands() {
        let text = r#"{
            "system": {"a": [[0.0]], "channels": [
                {"b": [[1.0]], "b_bar": [[0.0]], "delay": 0.0},
                {"direction": [[2.0]], "mu": 0.5, "sigma": 0.25, "delay": 0.5}]},
            "cost": {"q": [[1.0]], "r": [[1.0]], "horizon": 1.0}
        }"#;
        let p = parse(text).unwrap();
        let ch = &p.sys.channels()[1];
        assert_eq!(ch.b, Matrix::scalar(1.0));
        assert_eq!(ch.b_bar, Matrix::scalar(0.5));
    }

    #[test]
    fn unknown_field_rejected() {
        let text = SCALAR.replace("\"horizon\"", "\"horizn\"");
        assert!(matches!(parse(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn model_errors_surface() {
        let neg = SCALAR.replace("\"delay\": 0.0", "\"delay\": -1.0");
        assert!(matches!(parse(&neg), Err(ConfigError::Model(_))));
        let bad_r = SCALAR.replace("\"r\": [[1.0]]", "\"r\": [[0.0]]");
        assert!(matches!(parse(&bad_r), Err(ConfigError::Model(_))));
    }

    #[test]
    fn sim_block_checked() {
        let with_sim = |sim: &str| SCALAR.replacen("\n    }", &format!(",\n\"sim\": {sim}\n}}"), 1);
        let ok = with_sim(r#"{"t_sim": 1.0, "paths": 4, "x0": [1.0]}"#);
        assert_eq!(parse(&ok).unwrap().sim.unwrap().gain, GainBlock::Steady);
        let bad_x0 = with_sim(r#"{"t_sim": 1.0, "paths": 4, "x0": [1.0, 2.0]}"#);
        assert!(matches!(parse(&bad_x0), Err(ConfigError::Field { .. })));
        let bad_gain = with_sim(
            r#"{"t_sim": 1.0, "paths": 4, "x0": [1.0], "gain": {"matrix": [[1.0, 2.0]]}}"#,
        );
        assert!(matches!(parse(&bad_gain), Err(ConfigError::Field { .. })));
        let off_grid = with_sim(r#"{"t_sim": 1.0, "dt": 0.3, "paths": 4, "x0": [1.0]}"#);
        assert!(matches!(parse(&off_grid), Err(ConfigError::Field { .. })));
    }

    #[test]
    fn gain_forms_parse() {
        let g: GainBlock = serde_json::from_str(r#""finite_horizon""#).unwrap();
        assert_eq!(g, GainBlock::FiniteHorizon);
        let g: GainBlock = serde_json::from_str(r#"{"certificate": "c.json"}"#).unwrap();
        assert_eq!(g, GainBlock::Certificate("c.json".into()));
    }
}
