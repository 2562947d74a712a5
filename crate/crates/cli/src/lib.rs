//! Command-line runner: layered run configuration, subcommands and run
//! manifests.

pub mod commands;
pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use neurotok::{Error, Result};

use commands::Command;
use config::{ConfigSources, Profile, RunConfig};
use manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "neurotok", version, about = "Multi-scale RVQ tokenizer and masked-token pretraining for multichannel biosignals")]
pub struct Cli {
    /// Profile supplying the defaults.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    pub profile: Option<String>,
    /// TOML run configuration, layered over the profile.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.levels=8`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (same as `--set output_dir=...`).
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
    /// Re-run the command and configuration recorded in a manifest.
    #[arg(long, global = true, conflicts_with_all = ["profile", "config", "overrides"])]
    pub from_manifest: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Sub>,
}

#[derive(Subcommand, Debug)]
pub enum Sub {
    /// Write the synthetic multi-band corpus as CSV recordings.
    SynthGen,
    /// Train the tokenizer; writes checkpoint, loss curves and a summary.
    TrainTokenizer,
    /// Emit token indices for every patch of the corpus.
    Tokenize {
        /// Tokenizer checkpoint [default: <output_dir>/tokenizer.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode a token CSV back to waveform recordings.
    Reconstruct {
        /// Tokenizer checkpoint [default: <output_dir>/tokenizer.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Token CSV [default: <output_dir>/tokens.csv].
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    /// Per-band reconstruction error of a trained tokenizer.
    EvalBands {
        /// Tokenizer checkpoint [default: <output_dir>/tokenizer.ckpt].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Masked-token pretraining against a frozen tokenizer.
    Pretrain {
        /// Tokenizer checkpoint [default: <output_dir>/tokenizer.ckpt].
        #[arg(long)]
        tokenizer: Option<PathBuf>,
    },
    /// Linear probe on pretrained features: alpha- vs beta-dominant recordings.
    Probe {
        /// Backbone checkpoint [default: <output_dir>/backbone.ckpt].
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Train one tokenizer per entry of `sweep.levels` on the same corpus.
    SweepLevels,
    /// Finite-difference check of every differentiable primitive.
    Gradcheck,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::SynthGen => Command::SynthGen,
            Sub::TrainTokenizer => Command::TrainTokenizer,
            Sub::Tokenize { checkpoint } => Command::Tokenize { checkpoint },
            Sub::Reconstruct { checkpoint, tokens } => Command::Reconstruct { checkpoint, tokens },
            Sub::EvalBands { checkpoint } => Command::EvalBands { checkpoint },
            Sub::Pretrain { tokenizer } => Command::Pretrain { tokenizer },
            Sub::Probe { backbone } => Command::Probe { backbone },
            Sub::SweepLevels => Command::SweepLevels,
            Sub::Gradcheck => Command::Gradcheck,
        }
    }
}

/// Help epilogue listing every config key with its desk default.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (desk defaults; set in the --config file or with --set):\n");
    for (k, v) in config::config_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push_str("\nExit status: 0 success, 1 invalid input or configuration, 2 numeric failure.");
    s
}

pub fn cli_command() -> clap::Command {
    Cli::command().after_long_help(keys_help()).after_help(keys_help())
}

/// Command and configuration selected by the arguments; the command is
/// absent only when printing the configuration.
pub fn plan(cli: Cli) -> Result<(Option<Command>, RunConfig)> {
    if let Some(path) = &cli.from_manifest {
        let m = RunManifest::load(path)?;
        let cmd = Command::from_parts(&m.command, &m.args)?;
        if let Some(sub) = cli.command {
            let given = Command::from(sub);
            if given.name() != cmd.name() {
                return Err(Error::Config(format!(
                    "command: manifest records `{}` but `{}` was given",
                    cmd.name(),
                    given.name()
                )));
            }
        }
        let mut cfg = m.config;
        if let Some(out) = cli.out {
            cfg.output_dir = out;
        }
        cfg.validate()?;
        return Ok((Some(cmd), cfg));
    }
    if cli.command.is_none() && !cli.print_config {
        return Err(Error::Config(format!(
            "command: missing subcommand ({})",
            Command::NAMES.join(", ")
        )));
    }
    let mut overrides = cli.overrides;
    if let Some(out) = cli.out {
        overrides.push(format!("output_dir={}", toml_string(&out.display().to_string())));
    }
    let profile = cli.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let cfg = config::resolve(&ConfigSources {
        profile,
        file: cli.config,
        overrides,
    })?;
    Ok((cli.command.map(Command::from), cfg))
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INVALID
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli_command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_INVALID;
        }
    };
    let print_only = cli.print_config;
    let result = plan(cli).and_then(|(cmd, cfg)| {
        let cmd = match cmd {
            Some(c) if !print_only => c,
            _ => {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
        };
        let m = commands::execute(&cmd, &cfg)?;
        for o in &m.outputs {
            println!("{}  {}", o.sha256, cfg.output_dir.join(&o.path).display());
        }
        Ok(())
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
