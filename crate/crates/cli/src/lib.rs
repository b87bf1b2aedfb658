//! Command-line surface over `cobformer_core`.

pub mod commands;
pub mod config;

use std::ffi::OsString;

use clap::{Parser, Subcommand};
use cobformer_core::io::{write_json, FormatVersions, Manifest};

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "cobformer", version, about = "Bi-level global attention graph transformer lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Multilevel k-way partition with a random-baseline comparison.
    Partition(Overrides),
    /// Generate a homophily-controlled graph and write it as files.
    Synth(Overrides),
    /// Train with collaborative loss and early stopping.
    Train(Overrides),
    /// Homophily and attention profiles, Attn-SNR and cost counters.
    Analyze(Overrides),
    /// Finite-difference check of the full objective.
    Gradcheck(Overrides),
}

impl Command {
    fn parts(&self) -> (&'static str, &Overrides) {
        match self {
            Command::Partition(o) => ("partition", o),
            Command::Synth(o) => ("synth", o),
            Command::Train(o) => ("train", o),
            Command::Analyze(o) => ("analyze", o),
            Command::Gradcheck(o) => ("gradcheck", o),
        }
    }
}

pub fn manifest(name: &str, cfg: &RunConfig, artifacts: Vec<String>) -> Manifest {
    Manifest {
        subcommand: name.to_string(),
        seed: cfg.seed,
        config: serde_json::to_value(cfg).expect("config serialises"),
        formats: FormatVersions::default(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        artifacts,
    }
}

fn execute(command: &Command) -> anyhow::Result<bool> {
    let (name, overrides) = command.parts();
    let cfg = overrides.resolve()?;
    commands::ensure_dir(&cfg.out)?;
    let out = cfg.out.clone();
    let (ok, artifacts) = match command {
        Command::Partition(_) => (true, commands::partition(&cfg, &out)?),
        Command::Synth(_) => (true, commands::synth(&cfg, &out)?),
        Command::Train(_) => (true, commands::train(&cfg, &out)?),
        Command::Analyze(_) => (true, commands::analyze(&cfg, &out)?),
        Command::Gradcheck(_) => commands::gradcheck(&cfg, &out)?,
    };
    write_json(&out.join("manifest.json"), &manifest(name, &cfg, artifacts))?;
    Ok(ok)
}

/// Exit status: 0 on success, 1 on a run error or failed check, 2 on a
/// usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
