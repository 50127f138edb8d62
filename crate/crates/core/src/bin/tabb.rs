use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tabb_core::config::{desk_profile, Config, Resolver};
use tabb_core::pipeline::{self, Manifest};
use tabb_core::Error;

#[derive(Parser)]
#[command(name = "tabb", version, about = "Cross-domain offline RL with target-aligned Bellman backups")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate source and target datasets.
    GenData(Common),
    /// Train representation, anchor and agent for `run.variant` on every seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint (or every seed of `run.variant`) in the target env.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Oracle replay, bound check and percentile curves for one seed.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train every variant in `run.variants` on every seed.
    Sweep(Common),
    /// Summarize metrics traces as mean±std per variant.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory; defaults to `run.out_dir`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Published hyperparameters.
    Paper,
    /// Small networks and step counts for a laptop.
    Desk,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base defaults before the file is applied.
    #[arg(long, value_enum, default_value = "paper")]
    profile: Profile,
    /// `section.key=value` override (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Run directory (`run.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    source_size: Option<usize>,
    #[arg(long)]
    target_size: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Take the config from an existing run manifest.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn resolve(&self) -> Result<Config, Error> {
        let base = match (&self.from_manifest, self.profile) {
            (Some(p), _) => Manifest::load(p)?.config,
            (None, Profile::Desk) => desk_profile(),
            (None, Profile::Paper) => Config::default(),
        };
        let mut r = Resolver::from_config(&base);
        if let Some(p) = &self.config {
            r = r.file(p)?;
        }
        r = r.env_vars(std::env::vars())?;
        r = r.sets(self.sets.iter().map(String::as_str))?;
        let int = |v: usize| toml::Value::Integer(v as i64);
        if let Some(o) = &self.out {
            r = r.set("run", "out_dir", toml::Value::String(o.display().to_string()))?;
        }
        if let Some(s) = &self.seeds {
            r = r.set("run", "seeds", toml::Value::Array(s.iter().map(|&x| toml::Value::Integer(x as i64)).collect()))?;
        }
        for (sec, key, v) in [
            ("run", "steps", self.steps),
            ("data", "source_size", self.source_size),
            ("data", "target_size", self.target_size),
            ("run", "workers", self.workers),
        ] {
            if let Some(v) = v {
                r = r.set(sec, key, int(v))?;
            }
        }
        r.finish()
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenData(c) => {
            let cfg = c.resolve()?;
            let (s, t) = pipeline::gen_data(&cfg, c.force)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            println!("{}", serde_json::to_string_pretty(&t)?);
        }
        Cmd::Train { common, variant } => {
            let mut cfg = common.resolve()?;
            if let Some(v) = variant {
                cfg.run.variant = v.parse()?;
            }
            let m = pipeline::train(&cfg, &[cfg.run.variant], common.force)?;
            println!("{}", cfg.run.out_dir.join("manifest.json").display());
            eprintln!("trained {} seed(s) of {}", m.seeds.len(), cfg.run.variant.as_str());
        }
        Cmd::Sweep(c) => {
            let cfg = c.resolve()?;
            pipeline::train(&cfg, &cfg.run.variants, c.force)?;
            print!("{}", pipeline::report(&cfg.run.out_dir)?);
        }
        Cmd::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let rows = pipeline::eval(&cfg, checkpoint.as_deref())?;
            print!("{}", pipeline::eval_csv(&rows));
        }
        Cmd::Diagnose { common, seed } => {
            let cfg = common.resolve()?;
            let s = pipeline::diagnose(&cfg, seed, common.force)?;
            print!("{}", tabb_core::diagnostics::summary_text(&s));
        }
        Cmd::Report { common, run_dir } => {
            let cfg = common.resolve()?;
            print!("{}", pipeline::report(&run_dir.unwrap_or(cfg.run.out_dir))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
