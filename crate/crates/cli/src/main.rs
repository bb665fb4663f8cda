//! `vicl`: batch driver for embeddings, constructions and audits.
//!
//! Exit codes: 0 success, 2 configuration error, 3 budget or search exhaustion,
//! 4 numerical failure.

mod commands;
mod config;
mod expr;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use output::Output;

#[derive(Parser, Debug)]
#[command(name = "vicl", version, about = "Finite-vocabulary attention constructions and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for audits (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the configuration's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed a network into attention and report the readout gap.
    Embed(Common),
    /// Build a finite-vocabulary context approximating a target.
    Construct(Common),
    /// Zero-count fuzzing, finite-family audits and density audits.
    Audit(Common),
    /// Covering radius of vocabulary plus positional encodings.
    Density(Common),
    /// Integer witnesses `|β − q√2 + l| < ε`.
    Kronecker(Common),
}

#[derive(Debug)]
pub enum CliError {
    Config { field: String, message: String },
    Core(vicl::Error),
    Io(String),
}

impl CliError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        use vicl::Error as E;
        match self {
            CliError::Config { .. } | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::Dimension(_) | E::InvalidArgument { .. } | E::Unsupported(_) | E::IllConditioned { .. } => 2,
                E::KroneckerCap { .. } | E::ScanExhausted(_) | E::Budget { .. } => 3,
                E::Numerical(_) => 4,
            },
        }
    }

    fn to_json(&self) -> Value {
        use vicl::Error as E;
        match self {
            CliError::Config { field, message } => json!({"error": "config", "field": field, "message": message}),
            CliError::Io(m) => json!({"error": "io", "message": m}),
            CliError::Core(e) => {
                let message = e.to_string();
                match e {
                    E::InvalidArgument { field, reason } => {
                        json!({"error": "invalid_argument", "field": field, "reason": reason, "message": message})
                    }
                    E::Dimension(_) => json!({"error": "dimension", "message": message}),
                    E::IllConditioned { name, cond } => {
                        json!({"error": "ill_conditioned", "matrix": name, "condition": cond, "message": message})
                    }
                    E::Unsupported(_) => json!({"error": "unsupported", "message": message}),
                    E::Numerical(_) => json!({"error": "numerical", "message": message}),
                    E::KroneckerCap { beta, epsilon, q_cap } => json!({
                        "error": "kronecker_cap", "beta": beta, "epsilon": epsilon, "q_cap": q_cap, "message": message
                    }),
                    E::ScanExhausted(ev) => json!({"error": "scan_exhausted", "evidence": ev, "message": message}),
                    E::Budget { stage, achieved, budget } => json!({
                        "error": "budget", "stage": stage, "achieved": achieved, "budget": budget, "message": message
                    }),
                }
            }
        }
    }
}

impl From<vicl::Error> for CliError {
    fn from(e: vicl::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Reads the configuration, applies `--seed`, and returns it with its canonical form.
fn load_config(path: &Path, seed: Option<u64>) -> Result<(Value, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("config", format!("cannot read {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| CliError::config("config", e.to_string()))?;
    if let Some(s) = seed {
        match value.as_object_mut() {
            Some(obj) => {
                obj.insert("seed".into(), json!(s));
            }
            None => return Err(CliError::config("config", "top level must be an object")),
        }
    }
    let canonical = serde_json::to_string(&value).expect("JSON values serialize");
    Ok((value, canonical))
}

/// Deserializes with the failing field path in the error.
pub fn parse_config<T: serde::de::DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "config".to_string() } else { path };
        let inner = e.into_inner().to_string();
        // Missing and unknown fields are reported one level up; name them directly.
        let named = inner
            .split('`')
            .nth(1)
            .filter(|_| inner.starts_with("missing field") || inner.starts_with("unknown field"));
        let field = match named {
            Some(n) if field == "config" => n.to_string(),
            Some(n) if !field.ends_with(n) => format!("{field}.{n}"),
            _ => field,
        };
        CliError::config(field, inner)
    })
}

fn run(name: &str, common: &Common) -> Result<(), CliError> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config("--threads", e.to_string()))?;
    }
    let (value, canonical) = load_config(&common.config, common.seed)?;
    let out = Output::new(&common.out, name, &canonical)?;
    match name {
        "embed" => commands::embed(parse_config(value)?, &out),
        "construct" => commands::construct(parse_config(value)?, &out),
        "audit" => commands::audit(parse_config(value)?, &out),
        "density" => commands::density(&parse_config(value)?, &out),
        "kronecker" => commands::kronecker(parse_config(value)?, &out),
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Embed(c) => ("embed", c),
        Command::Construct(c) => ("construct", c),
        Command::Audit(c) => ("audit", c),
        Command::Density(c) => ("density", c),
        Command::Kronecker(c) => ("kronecker", c),
    };
    match run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = e.to_json();
            eprintln!("{body}");
            if std::fs::create_dir_all(&common.out).is_ok() {
                let _ = std::fs::write(
                    common.out.join("error.json"),
                    serde_json::to_string_pretty(&body).unwrap() + "\n",
                );
            }
            ExitCode::from(e.exit_code())
        }
    }
}
