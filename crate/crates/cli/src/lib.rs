//! `pdvae` command line: argument parsing, run configuration and the
//! subcommands, exposed as a library so tests can drive them in-process.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pdvae", version, about = "Phase-conditioned group dance VAE")]
pub struct Cli {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed (data, initialisation, training, sampling).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablate {
    /// Drop the group-consistency term.
    NoConsistency,
    /// Replace the phase manifold with direct gaussian latents.
    NoPhase,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic group dataset with a checksum manifest.
    Synth,
    /// Train a model and write a checkpoint.
    Train {
        /// Dataset file; defaults to the one in the output directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablate>,
        /// Continue from a checkpoint, including optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the number of optimizer steps to run.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a group for one synthetic conditioning track.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dancers: Option<usize>,
        /// `frame-dump` or `bvh`.
        #[arg(long)]
        format: Option<String>,
    },
    /// Compute the metric report against reference groups.
    Evaluate {
        /// Without a checkpoint the reference is scored against itself.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reference dataset; defaults to held-out synthetic groups.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Time and measure generation across dancer counts.
    BenchScale {
        /// Without a checkpoint a freshly initialised model is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated dancer counts.
        #[arg(long = "dancers", alias = "n-list", value_delimiter = ',')]
        n_list: Option<Vec<usize>>,
    },
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Train { ablate, steps, .. } => {
            for a in ablate {
                match a {
                    Ablate::NoConsistency => cfg.train.disable_consistency = true,
                    Ablate::NoPhase => cfg.train.disable_phase_manifold = true,
                }
            }
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
        }
        Command::Generate { dancers, format, .. } => {
            if let Some(n) = dancers {
                cfg.generate.dancers = *n;
            }
            if let Some(f) = format {
                cfg.generate.format = f.clone();
            }
        }
        Command::BenchScale { n_list: Some(n), .. } => cfg.bench.dancers = n.clone(),
        _ => {}
    }
    cfg.resolve()
}

/// Runs a parsed command and returns the summary printed on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve_config(cli)?;
    let out = cfg.out.display().to_string();
    Ok(match &cli.command {
        Command::Synth => {
            let m = commands::cmd_synth(&cfg)?;
            format!("wrote {} sequences to {out}", m.sequences.len())
        }
        Command::Train { data, resume, .. } => {
            let t = commands::cmd_train(&cfg, data.as_deref(), resume.as_deref())?;
            let last = t.records.last().map_or_else(|| "no steps run".to_string(), |r| r.log_line());
            format!("{last}\ncheckpoint at step {}: {}", t.step, t.checkpoint.display())
        }
        Command::Generate { checkpoint, .. } => {
            let m = commands::cmd_generate(&cfg, checkpoint, cfg.generate.dancers)?;
            format!("wrote {} files to {out}/{}", m.files.len(), commands::GENERATED_DIR)
        }
        Command::Evaluate { checkpoint, data } => {
            let r = commands::cmd_evaluate(&cfg, checkpoint.as_deref(), data.as_deref())?;
            let mut s = String::new();
            for (k, e) in &r.metrics {
                match (&e.value, &e.error) {
                    (Some(v), _) => s.push_str(&format!("{k} = {v:.6}\n")),
                    (None, Some(err)) => s.push_str(&format!("{k}: {err}\n")),
                    (None, None) => s.push_str(&format!("{k}: missing\n")),
                }
            }
            s.push_str(&format!("report: {out}/{}", commands::REPORT_FILE));
            s
        }
        Command::BenchScale { checkpoint, .. } => {
            let b = commands::cmd_bench_scale(&cfg, checkpoint.as_deref(), &cfg.bench.dancers)?;
            let mut s = String::new();
            for r in &b.runs {
                s.push_str(&format!(
                    "dancers={} peak_elements={} prior_calls={} wall_s={:.4}\n",
                    r.dancers, r.peak_working_elements, r.prior_calls, r.wall_seconds
                ));
            }
            s.push_str(&format!("working_set_ratio={:.3} wall_r2={:.4}", b.working_set_ratio, b.wall_time_r_squared));
            s
        }
    })
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(s) => {
            println!("{s}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
