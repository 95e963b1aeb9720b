use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use density_steer::bench::{bench_gramian, format_table};
use density_steer::gramian::RelativeDegree;
use density_steer::pipeline::{run_assess, run_full, run_predict, run_steer};
use density_steer::risk::ManeuverChoice;
use density_steer::scenario::{ScenarioConfig, SEVEN_VEHICLE};
use density_steer::Error;

#[derive(Parser)]
#[command(
    version,
    about = "Forecast, assess and steer vehicle state densities on a multi-lane highway"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forecast every vehicle's joint state density.
    Predict(Common),
    /// Assess collision risk from saved forecasts and pick a manoeuvre.
    Assess(Common),
    /// Steer the ego density to the chosen target from saved results.
    Steer(Common),
    /// Run all stages and write report.json.
    Run(Common),
    /// Time kernel evaluation with quadrature vs closed-form Gramians.
    BenchGramian(Bench),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON; the shipped seven-vehicle scene when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the sampling seed (the simulation seed becomes seed + 1).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args)]
struct Bench {
    /// Relative degrees, e.g. `2,2` (repeatable).
    #[arg(long = "degree", value_delimiter = ';', default_values = ["2,2", "3,2"])]
    degrees: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 5)]
    grid: usize,
    /// Simpson panels of the quadrature route.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long)]
    json: bool,
}

fn load(c: &Common) -> Result<ScenarioConfig, Error> {
    let mut cfg = match &c.scenario {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::from_json(SEVEN_VEHICLE)?,
    };
    if let Some(s) = c.seed {
        cfg.seeds.sampling = s;
        cfg.seeds.simulation = s.wrapping_add(1);
    }
    if let Some(n) = c.particles {
        cfg.particles = n;
    }
    if let Some(e) = c.epsilon {
        cfg.epsilon = e;
    }
    if let Some(h) = c.horizon {
        cfg.horizon_s = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_degree(s: &str) -> Result<RelativeDegree, Error> {
    let blocks = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad degree `{s}`: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    RelativeDegree::new(blocks).map_err(|e| Error::Config(e.to_string()))
}

fn describe(choice: &ManeuverChoice) -> String {
    match choice {
        ManeuverChoice::Stay => "stay in lane".into(),
        ManeuverChoice::Change { lane, front, back } => {
            format!("change to lane `{lane}` between {back} and {front}")
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let mut flagged = false;
    match cli.command {
        Command::Predict(c) => {
            let cfg = load(&c)?;
            let f = run_predict(&cfg, &c.out)?;
            println!(
                "wrote {} forecasts to {}",
                f.len(),
                c.out.join("forecasts").display()
            );
        }
        Command::Assess(c) => {
            let cfg = load(&c)?;
            let d = run_assess(&cfg, &c.out)?;
            println!(
                "decision: {} (stay probability {:.4})",
                describe(&d.choice),
                d.stay_probability
            );
            flagged = d.no_safe_option;
        }
        Command::Steer(c) => {
            let cfg = load(&c)?;
            let s = run_steer(&cfg, &c.out)?;
            println!(
                "bridge converged in {} iterations (gap {:.2e}); terminal mean x = {:.3}, y = {:.3}",
                s.iterations, s.final_gap, s.terminal_mean_flat[0], s.terminal_mean_flat[2]
            );
        }
        Command::Run(c) => {
            let cfg = load(&c)?;
            let r = run_full(&cfg, &c.out)?;
            println!("decision: {}", describe(&r.decision.choice));
            println!(
                "bridge: {} iterations, terminal mean x = {:.3}, y = {:.3}",
                r.steer.iterations, r.steer.terminal_mean_flat[0], r.steer.terminal_mean_flat[2]
            );
            println!(
                "report: {} ({:.2} s)",
                c.out.join("report.json").display(),
                r.timings.total_s
            );
            flagged = r.decision.no_safe_option;
        }
        Command::BenchGramian(b) => {
            let degrees = b
                .degrees
                .iter()
                .map(|s| parse_degree(s))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = bench_gramian(&degrees, b.delta, b.epsilon, b.grid, b.steps)?;
            if b.json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", format_table(&rows));
            }
        }
    }
    if flagged {
        eprintln!("no safe option: every available manoeuvre exceeds the risk threshold");
        return Ok(ExitCode::from(4));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonConvergence { .. } => ExitCode::from(3),
                Error::Config(_) | Error::Json(_) | Error::Io(_) | Error::Csv(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}
