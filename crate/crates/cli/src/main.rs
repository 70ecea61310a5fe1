use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rpf_core::config::{AgentKind, RunConfig};
use rpf_core::eval::{self, PolicyKind, OOD_SPEEDS};
use rpf_core::run::{self, EvaluateArgs, LoadedAgent, TraceArgs};
use rpf_core::train::Learner;

#[derive(Parser)]
#[command(name = "rpf", version, about = "Ensemble RPF agents for intersection driving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write logs, reports and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the fixed test suite; prints or writes a JSON report.
    Evaluate(EvalCmd),
    /// Sweep fixed surrounding-vehicle speeds; writes a CSV table.
    Sweep(SweepCmd),
    /// Per-decision trace of one suite episode as CSV.
    Trace(TraceCmd),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    agent: Option<AgentArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total decision steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/resume.ckpt` if it exists.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Require the checkpoint to match this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Apply the confidence gate (ensemble checkpoints only).
    #[arg(long)]
    gate: bool,
    /// Gate threshold on the coefficient of variation.
    #[arg(long)]
    cv_safe: Option<f64>,
    /// Fix every surrounding vehicle's desired speed (m/s).
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    suite_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct SweepCmd {
    /// Ensemble checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional baseline checkpoint for the comparison columns.
    #[arg(long)]
    dqn: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    speeds: Option<Vec<f64>>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    cv_safe: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceCmd {
    #[command(flatten)]
    common: Common,
    /// Index of the episode in the test suite.
    #[arg(long, default_value_t = 0)]
    episode: usize,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AgentArg {
    Rpf,
    Dqn,
}

impl From<AgentArg> for AgentKind {
    fn from(a: AgentArg) -> Self {
        match a {
            AgentArg::Rpf => AgentKind::Rpf,
            AgentArg::Dqn => AgentKind::Dqn,
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(common: &Common) -> Result<LoadedAgent> {
    let expected = common.config.as_deref().map(RunConfig::load).transpose()?;
    run::load_agent(&common.checkpoint, expected.as_ref())
        .with_context(|| format!("loading {}", common.checkpoint.display()))
}

fn policy_for(agent: &LoadedAgent, gate: bool) -> Result<PolicyKind> {
    Ok(match (&agent.learner, gate) {
        (Learner::Rpf(_), true) => PolicyKind::RpfGated,
        (Learner::Rpf(_), false) => PolicyKind::RpfMean,
        (Learner::Dqn(_), false) => PolicyKind::DqnGreedy,
        (Learner::Dqn(_), true) => bail!("--gate needs an ensemble checkpoint; this one holds a single dqn network"),
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(a) = args.agent {
        let a = AgentKind::from(a);
        cfg.agent = a;
        if a == AgentKind::Dqn && args.config.is_none() {
            cfg.members = 1;
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.total_steps = n;
    }
    cfg.validate()?;
    let quiet = args.quiet;
    let outcome = run::command_train(&cfg, &args.out, args.resume, &mut |line| {
        if !quiet {
            eprintln!("{line}");
        }
    })?;
    if !quiet {
        eprintln!(
            "done: {} steps, {} episodes, weights in {}",
            outcome.steps,
            outcome.episodes,
            outcome.final_checkpoint.display()
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::Evaluate(args) => {
            let agent = load(&args.common)?;
            let report = run::command_evaluate(
                &agent,
                &EvaluateArgs {
                    policy: policy_for(&agent, args.common.gate)?,
                    cv_safe: args.common.cv_safe,
                    speed: args.common.speed,
                    episodes: args.episodes,
                    suite_seed: args.common.suite_seed,
                },
            )?;
            emit(args.common.out.as_deref(), &report.to_json())
        }
        Command::Sweep(args) => {
            let rpf = run::load_agent(&args.checkpoint, None)?;
            if !matches!(rpf.learner, Learner::Rpf(_)) {
                bail!("sweep needs an ensemble checkpoint");
            }
            let dqn = args.dqn.as_deref().map(|p| run::load_agent(p, None)).transpose()?;
            let speeds = args.speeds.unwrap_or_else(|| OOD_SPEEDS.to_vec());
            let rows = run::command_sweep(&rpf, dqn.as_ref(), &speeds, args.episodes, args.cv_safe)?;
            emit(args.out.as_deref(), &eval::sweep_csv(&rows, &rpf.meta()))
        }
        Command::Trace(args) => {
            let agent = load(&args.common)?;
            let trace = run::command_trace(
                &agent,
                &TraceArgs {
                    policy: policy_for(&agent, args.common.gate)?,
                    cv_safe: args.common.cv_safe,
                    speed: args.common.speed,
                    episode: args.episode,
                    suite_seed: args.common.suite_seed,
                },
            )?;
            emit(args.common.out.as_deref(), &eval::trace_csv(&trace, &agent.meta()))
        }
    }
}
