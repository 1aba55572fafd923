use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use delay_lqr::commands::{self, DEFAULT_RESOLUTIONS};
use delay_lqr::{exit, CliError, Outcome, Problem};

#[derive(Parser)]
#[command(
    name = "delay-lqr",
    version,
    about = "Predictor-feedback LQ control for Ito systems with input delays"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Problem config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the finite-horizon Riccati equations; writes riccati.csv and summary.json.
    Solve(Common),
    /// Bisect for the largest certifiable decay rate; writes certificate.json.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10.0)]
        alpha_hi: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Monte Carlo of the closed loop; writes trajectories.csv and sim_summary.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Overrides `sim.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare against the augmented discrete LQ problem; writes oracle.csv.
    OracleCompare {
        #[command(flatten)]
        common: Common,
        /// Steps, e.g. `1/64,1/128,1/256`.
        #[arg(long, value_delimiter = ',', value_parser = parse_step)]
        resolutions: Option<Vec<f64>>,
    },
}

/// Accepts `0.125` or `1/8`.
fn parse_step(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s}: {e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{s}: {e}"))?,
    };
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{s}: step must be positive"))
    }
}

fn run(cmd: Cmd) -> Result<Outcome, CliError> {
    let load = |c: &Common| -> Result<(Problem, PathBuf), CliError> {
        let p = Problem::load(&c.config)?;
        let out = commands::out_dir(&p, c.out.as_deref());
        Ok((p, out))
    };
    match cmd {
        Cmd::Solve(c) => {
            let (p, out) = load(&c)?;
            commands::solve(&p, &out)
        }
        Cmd::Certify {
            common,
            alpha_hi,
            tol,
        } => {
            let (p, out) = load(&common)?;
            commands::certify(&p, &out, alpha_hi, tol)
        }
        Cmd::Simulate { common, seed } => {
            let (p, out) = load(&common)?;
            commands::simulate(&p, &out, seed)
        }
        Cmd::OracleCompare {
            common,
            resolutions,
        } => {
            let (p, out) = load(&common)?;
            let res = resolutions.unwrap_or_else(|| DEFAULT_RESOLUTIONS.to_vec());
            commands::oracle_compare(&p, &out, &res)
        }
    }
}

fn report(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", Path::new(f).display());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli.cmd) {
        Ok(o) => {
            report(&o.files);
            if o.code == exit::OK {
                println!("{}", o.message);
            } else {
                eprintln!("error: {}", o.message);
            }
            o.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

#[cfg(test)]
mod tests {
    use super::parse_step;

    #[test]
    fn steps_parse() {
        assert_eq!(parse_step("1/64"), Ok(1.0 / 64.0));
        assert_eq!(parse_step("0.25"), Ok(0.25));
        assert!(parse_step("0").is_err());
        assert!(parse_step("1/0").is_err());
        assert!(parse_step("x").is_err());
    }
}
