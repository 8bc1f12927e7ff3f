//! Command-line entry point: train, evaluate, forecast, export the learned
//! graph, generate synthetic benchmarks, and run the gradient verification
//! suite.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 runtime/data error.

use std::path::PathBuf;
use std::process::ExitCode;

use mtgnn_core::Error;

mod commands;

#[derive(Debug, Default, Clone)]
pub struct Cli {
    pub command: String,
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub overrides: Vec<(String, String)>,
    pub tol: f64,
    pub op: Option<String>,
}

const USAGE: &str = "\
mtgnn — multivariate time series forecasting with a learned graph

USAGE:
    mtgnn <command> [options]

COMMANDS:
    train         train on a series file; writes checkpoint, log, test metrics
    eval          evaluate a checkpoint on a series file (test split)
    forecast      forecast the steps following the end of a series
    export-graph  write the learned adjacency matrix, edge list and neighbors
    gradcheck     finite-difference verification of every operation
    synth         generate a synthetic dataset with a known dependency graph

OPTIONS:
    --config <path>       flat `key = value` config file
    --data <path>         input series: comma or whitespace separated table
    --checkpoint <path>   checkpoint file to load (eval/forecast/export-graph)
    --out-dir <path>      output directory (default: .)
    --seed <n>            shorthand for --override seed=<n>
    --override <k=v>      override one config key (repeatable)
    --tol <x>             gradcheck tolerance (default 1e-4)
    --op <name>           restrict gradcheck to ops whose name contains <name>

ENVIRONMENT:
    MTGNN_THREADS         worker thread cap for batch assembly (default 1)
";

fn parse_args(args: &[String]) -> Result<Cli, String> {
    if args.is_empty() {
        return Err("missing command".into());
    }
    let mut cli = Cli {
        command: args[0].clone(),
        out_dir: PathBuf::from("."),
        tol: mtgnn_core::gradcheck::DEFAULT_TOL,
        ..Cli::default()
    };
    let mut i = 1;
    let value = |i: &mut usize, flag: &str| -> Result<String, String> {
        *i += 1;
        args.get(*i).cloned().ok_or_else(|| format!("flag {flag} needs a value"))
    };
    while i < args.len() {
        match args[i].as_str() {
            "--config" => cli.config = Some(PathBuf::from(value(&mut i, "--config")?)),
            "--data" => cli.data = Some(PathBuf::from(value(&mut i, "--data")?)),
            "--checkpoint" => cli.checkpoint = Some(PathBuf::from(value(&mut i, "--checkpoint")?)),
            "--out-dir" => cli.out_dir = PathBuf::from(value(&mut i, "--out-dir")?),
            "--seed" => {
                let v = value(&mut i, "--seed")?;
                v.parse::<u64>().map_err(|_| format!("--seed must be an integer, got {v}"))?;
                cli.overrides.push(("seed".into(), v));
            }
            "--override" => {
                let v = value(&mut i, "--override")?;
                let (k, val) = v
                    .split_once('=')
                    .ok_or_else(|| format!("--override expects key=value, got {v}"))?;
                cli.overrides.push((k.trim().to_string(), val.trim().to_string()));
            }
            "--tol" => {
                let v = value(&mut i, "--tol")?;
                cli.tol = v.parse().map_err(|_| format!("--tol must be a number, got {v}"))?;
            }
            "--op" => cli.op = Some(value(&mut i, "--op")?),
            "--help" | "-h" => return Err(String::new()),
            other => return Err(format!("unknown flag {other}")),
        }
        i += 1;
    }
    Ok(cli)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::MissingInput(_) => 2,
        Error::Parse { .. }
        | Error::Io(_)
        | Error::Checkpoint(_)
        | Error::Train(_)
        | Error::Dimension(_)
        | Error::Length { .. }
        | Error::Contract(_) => 3,
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(c) => c,
        Err(msg) => {
            if msg.is_empty() {
                print!("{USAGE}");
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {msg}\n");
            eprint!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command.as_str() {
        "train" => commands::cmd_train(&cli),
        "eval" => commands::cmd_eval(&cli),
        "forecast" => commands::cmd_forecast(&cli),
        "export-graph" => commands::cmd_export_graph(&cli),
        "gradcheck" => commands::cmd_gradcheck(&cli),
        "synth" => commands::cmd_synth(&cli),
        other => {
            eprintln!("error: unknown command `{other}`\n");
            eprint!("{USAGE}");
            return ExitCode::from(2);
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
