use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use swarmco::scenario::{run_scenario, Emit, Kind, ScenarioSpec};
use swarmco::{ConfigError, ScenarioError};

#[derive(Parser)]
#[command(name = "swarmco", version, about = "Coalition model solver and swarm simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Steady-state model
    #[command(subcommand)]
    Model(ModelCmd),
    /// Swarm simulation
    #[command(subcommand)]
    Sim(SimCmd),
    /// Availability benchmark
    #[command(subcommand)]
    Avail(AvailCmd),
    /// Dynamic coalition formation
    #[command(subcommand)]
    Dyncoal(DynCmd),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Solve the model (and optionally validate against simulation)
    Solve(Common),
    /// Sweep rechoke interval and unchoke slots
    Sweep(Common),
}

#[derive(Subcommand)]
enum SimCmd {
    Run(Common),
}

#[derive(Subcommand)]
enum AvailCmd {
    Bench(Common),
}

#[derive(Subcommand)]
enum DynCmd {
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Seed or comma-separated seed list
    #[arg(long, value_parser = parse_seeds)]
    seed: Option<Seeds>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "both", value_parser = clap::builder::PossibleValuesParser::new(["json", "csv", "both"]))]
    emit: String,
}

#[derive(Clone)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let seeds = s
        .split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed `{p}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Seeds(seeds))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.kind().to_string();
            let detail = e.render().to_string();
            eprintln!("{}", json!({"status": "error", "error": "usage", "message": message, "detail": detail}));
            return ExitCode::from(2);
        }
    };
    let (expected, args) = match &cli.command {
        Command::Model(ModelCmd::Solve(a)) => (Kind::ModelValidate, a),
        Command::Model(ModelCmd::Sweep(a)) => (Kind::Sweep, a),
        Command::Sim(SimCmd::Run(a)) => (Kind::SwarmImpact, a),
        Command::Avail(AvailCmd::Bench(a)) => (Kind::Availability, a),
        Command::Dyncoal(DynCmd::Run(a)) => (Kind::Dynamics, a),
    };
    match execute(expected, args) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = match &e {
                ScenarioError::Config(ConfigError::Parse { .. }) => "parse",
                ScenarioError::Config(ConfigError::Io(_)) => "io",
                ScenarioError::Config(ConfigError::Invalid(_)) => "invalid_config",
                ScenarioError::KindMismatch { .. } => "kind_mismatch",
                ScenarioError::Model(_) => "model",
                ScenarioError::EmptySample => "empty_sample",
                ScenarioError::Output { .. } => "output",
            };
            eprintln!("{}", json!({"status": "error", "error": kind, "message": e.to_string()}));
            ExitCode::from(2)
        }
    }
}

fn execute(expected: Kind, args: &Common) -> Result<serde_json::Value, ScenarioError> {
    let spec = ScenarioSpec::load(&args.config)?;
    if spec.kind() != expected {
        return Err(ScenarioError::KindMismatch {
            expected: expected.as_str().into(),
            found: spec.kind().as_str().into(),
        });
    }
    let emit: Emit = args.emit.parse().expect("clap restricts the values");
    let out = args
        .out
        .clone()
        .or_else(|| spec.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(spec.name()));
    let report = run_scenario(&spec, args.seed.as_ref().map(|s| s.0.as_slice()))?;
    let files = report.write(&out, emit)?;
    Ok(json!({
        "status": "ok",
        "kind": report.kind,
        "name": report.name,
        "seeds": report.seeds,
        "out": out,
        "files": files,
        "failures": report.failures,
        "headline": report.headline,
    }))
}
