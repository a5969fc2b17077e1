//! `r2i`: generate the toy data, train the models, translate images and run
//! the sweeps and checks.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Overrides, RunConfig};

/// A bad invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "r2i", version, about = "Zero-shot skeleton-to-creature translation with latent diffusion")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Share of the forward process applied to the source, in (0, 1].
    #[arg(long, global = true)]
    fraction: Option<f64>,
    #[arg(long = "cfg-scale", global = true)]
    cfg_scale: Option<f64>,
    /// Prompt template: head_of_class, generic, class_only or class_head.
    #[arg(long, global = true)]
    template: Option<String>,
    /// Forward steps; overrides --fraction with steps / T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the toy skeleton and creature datasets.
    GenData,
    /// Train one model and save its checkpoint.
    Train {
        #[arg(value_enum)]
        model: Stage,
    },
    /// Translate one image towards a creature class.
    Translate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Target class: `3` or `3-spike`.
        #[arg(long)]
        class: String,
        /// Output PNG; defaults to `<out>/translate/<stem>.png`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep the forward fraction over the test skeletons.
    SweepFraction {
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Sweep the guidance scale over the test skeletons.
    SweepCfg {
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Compare prompt templates over the test skeletons.
    SweepTemplate {
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Score a directory of translated test images named `<id>.png`.
    Eval {
        #[arg(long)]
        outputs: PathBuf,
        /// Row label; defaults to the directory name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Finite-difference check of every primitive op and the full models.
    GradCheck,
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        /// Skip the checks that need trained checkpoints.
        #[arg(long)]
        model_free: bool,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Codec,
    Denoiser,
    Classifier,
}

fn resolve(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.resolve(&Overrides {
        seed: g.seed,
        fraction: g.fraction,
        cfg_scale: g.cfg_scale,
        template: g.template.clone(),
        steps: g.steps,
        data: g.data.clone(),
        checkpoints: g.checkpoints.clone(),
        output: g.out.clone(),
    })
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = resolve(&cli.global)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { model } => commands::train(&cfg, model),
        Command::Translate { input, class, output } => commands::translate(&cfg, &input, &class, output),
        Command::SweepFraction { values } => commands::sweep_fraction(&cfg, &values),
        Command::SweepCfg { values } => commands::sweep_cfg(&cfg, &values),
        Command::SweepTemplate { values } => commands::sweep_template(&cfg, &values),
        Command::Eval { outputs, label } => commands::eval(&cfg, &outputs, label),
        Command::GradCheck => commands::grad_check(&cfg),
        Command::Verify { model_free } => commands::verify(&cfg, model_free),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            eprintln!("run `r2i --help` for usage");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
