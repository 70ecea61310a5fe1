//! Command implementations: train, evaluate, sweep and trace.
//!
//! Output directory of a training run:
//!
//! - `config.toml`: the effective configuration
//! - `train_log.csv`: one row per training episode
//! - `eval.csv`: one row per periodic evaluation and policy
//! - `reports/step-<n>-<policy>.json`: the periodic evaluation reports
//! - `checkpoints/step-<n>.ckpt`, `final.ckpt`: network weights
//! - `resume.ckpt`: full training state at the latest checkpoint

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{AgentKind, RunConfig};
use crate::env::{IntersectionEnv, N_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Policy, PolicyKind, RunMeta, SweepRow, TestSuite};
use crate::gate::GateConfig;
use crate::nn::checkpoint::{Checkpoint, CheckpointWriter};
use crate::nn::Arch;
use crate::train::{EpisodeLog, Learner, Trainer};

pub const WEIGHTS_KIND: &str = "weights";
pub const RESUME_KIND: &str = "resume";

pub fn intersection_arch() -> Arch {
    let a = Arch::intersection();
    debug_assert_eq!(a.input_dim(), OBS_DIM);
    debug_assert_eq!(a.actions, N_ACTIONS);
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    agent: AgentKind,
    step: u64,
    seed: u64,
    config: String,
    #[serde(default)]
    train_log_bytes: u64,
    #[serde(default)]
    eval_log_bytes: u64,
}

/// A trained agent loaded from a weights checkpoint together with the
/// configuration it was trained under.
#[derive(Debug, Clone)]
pub struct LoadedAgent {
    pub config: RunConfig,
    pub learner: Learner,
    pub step: u64,
}

impl LoadedAgent {
    pub fn meta(&self) -> RunMeta {
        RunMeta::new(&self.config.hash(), self.config.seed)
    }

    pub fn policy(&self, kind: PolicyKind, gate: GateConfig) -> Result<Policy<'_>> {
        match (kind, &self.learner) {
            (PolicyKind::RpfMean, Learner::Rpf(e)) => Ok(Policy::RpfMean(e)),
            (PolicyKind::RpfGated, Learner::Rpf(e)) => {
                gate.validate()?;
                Ok(Policy::RpfGated(e, gate))
            }
            (PolicyKind::DqnGreedy, Learner::Dqn(d)) => Ok(Policy::DqnGreedy(d)),
            (PolicyKind::RpfGated, Learner::Dqn(_)) => Err(Error::Incompatible(
                "the confidence gate needs an ensemble checkpoint".into(),
            )),
            (kind, l) => Err(Error::Incompatible(format!(
                "policy {} cannot run a {} checkpoint",
                kind.name(),
                l.kind().name()
            ))),
        }
    }
}

fn checkpoint_meta(ck: &Checkpoint) -> Result<CheckpointMeta> {
    serde_json::from_value(ck.header.meta.clone()).map_err(|e| Error::MalformedCheckpoint(format!("metadata: {e}")))
}

/// Loads weights. When `expected` is given, its hash must match the checkpoint's.
pub fn load_agent(path: &Path, expected: Option<&RunConfig>) -> Result<LoadedAgent> {
    let ck = Checkpoint::read(path)?;
    let meta = checkpoint_meta(&ck)?;
    let mut config = RunConfig::from_toml_str(&meta.config)?;
    config.seed = meta.seed;
    ck.expect_config(&config.hash())?;
    if let Some(exp) = expected {
        ck.expect_config(&exp.hash())?;
    }
    let learner = Learner::read(
        &ck,
        meta.agent,
        intersection_arch(),
        config.rpf_config(),
        config.epsilon_schedule(),
        false,
    )?;
    Ok(LoadedAgent {
        config,
        learner,
        step: meta.step,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn truncate(path: &Path, len: u64) -> Result<()> {
    let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
    f.set_len(len).map_err(|e| Error::io(path, e))
}

fn file_len(path: &Path) -> Result<u64> {
    Ok(fs::metadata(path).map_err(|e| Error::io(path, e))?.len())
}

pub fn eval_csv_header() -> &'static str {
    "step,policy,mean_return,goal,collision,timeout,fallback,cv_mean,cv_p1,cv_p10,cv_p50,cv_p90,cv_p99\n"
}

pub fn eval_csv_row(step: u64, r: &EvalReport) -> String {
    let cv = |f: fn(&eval::CvStats) -> f64| r.chosen_cv.as_ref().map(|c| f(c).to_string()).unwrap_or_default();
    format!(
        "{step},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.policy,
        r.mean_return,
        r.goal,
        r.collision,
        r.timeout,
        r.fallback_episodes,
        cv(|c| c.mean),
        cv(|c| c.p1),
        cv(|c| c.p10),
        cv(|c| c.p50),
        cv(|c| c.p90),
        cv(|c| c.p99),
    )
}

/// Evaluation policies reported during training.
fn training_policies(learner: &Learner, gate: GateConfig) -> Vec<Policy<'_>> {
    match learner {
        Learner::Rpf(e) => vec![Policy::RpfMean(e), Policy::RpfGated(e, gate)],
        Learner::Dqn(d) => vec![Policy::DqnGreedy(d)],
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: u64,
    pub episodes: u64,
    pub final_reports: Vec<EvalReport>,
}

pub struct TrainPaths {
    pub config: PathBuf,
    pub train_log: PathBuf,
    pub eval_log: PathBuf,
    pub reports: PathBuf,
    pub checkpoints: PathBuf,
    pub final_checkpoint: PathBuf,
    pub resume: PathBuf,
}

impl TrainPaths {
    pub fn new(out: &Path) -> Self {
        Self {
            config: out.join("config.toml"),
            train_log: out.join("train_log.csv"),
            eval_log: out.join("eval.csv"),
            reports: out.join("reports"),
            checkpoints: out.join("checkpoints"),
            final_checkpoint: out.join("final.ckpt"),
            resume: out.join("resume.ckpt"),
        }
    }
}

/// Trains under `cfg` into `out`. With `resume`, continues from
/// `resume.ckpt` when present; logs are cut back to the snapshot so the
/// result is byte-identical to an uninterrupted run.
pub fn command_train(
    cfg: &RunConfig,
    out: &Path,
    resume: bool,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let paths = TrainPaths::new(out);
    let hash = cfg.hash();
    let meta = RunMeta::new(&hash, cfg.seed);
    let env = IntersectionEnv::new(cfg.env_config(), 0)?;
    let arch = intersection_arch();
    let gate = cfg.gate_config();
    let suite = eval::build_test_suite(cfg.suite_seed, cfg.eval_episodes, None)?;

    let mut trainer = if resume && paths.resume.exists() {
        let ck = Checkpoint::read(&paths.resume)?;
        ck.expect_config(&hash)?;
        let m = checkpoint_meta(&ck)?;
        if m.seed != cfg.seed || m.agent != cfg.agent {
            return Err(Error::Incompatible("resume snapshot belongs to another run".into()));
        }
        let learner = Learner::read(&ck, cfg.agent, arch, cfg.rpf_config(), cfg.epsilon_schedule(), true)?;
        truncate(&paths.train_log, m.train_log_bytes)?;
        truncate(&paths.eval_log, m.eval_log_bytes)?;
        progress(&format!("resuming at step {}", m.step));
        Trainer::from_snapshot(env, &ck, learner)?
    } else {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_file(&paths.config, &cfg.to_toml())?;
        let learner = crate::train::Learner::new(cfg.agent, arch, cfg.rpf_config(), cfg.epsilon_schedule(), cfg.seed)?;
        write_file(
            &paths.train_log,
            &format!("{}{}", meta.csv_comment(), EpisodeLog::csv_header(learner.members())),
        )?;
        write_file(&paths.eval_log, &format!("{}{}", meta.csv_comment(), eval_csv_header()))?;
        Trainer::new(env, learner, cfg.seed)?
    };

    let mut pending = String::new();
    let mut final_reports = Vec::new();
    while trainer.step_count() < cfg.total_steps {
        if let Some(log) = trainer.step()? {
            pending.push_str(&log.csv_row());
        }
        let step = trainer.step_count();
        let last = step == cfg.total_steps;
        let eval_due = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || last;
        let ckpt_due = (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || last;
        if !(eval_due || ckpt_due) {
            continue;
        }
        append(&paths.train_log, &std::mem::take(&mut pending))?;
        if eval_due {
            let mut rows = String::new();
            let mut reports = Vec::new();
            for p in training_policies(&trainer.learner, gate) {
                let r = eval::run_evaluation(&p, &suite, &cfg.env_config(), &meta)?;
                write_file(&paths.reports.join(format!("step-{step:08}-{}.json", r.policy)), &r.to_json())?;
                rows.push_str(&eval_csv_row(step, &r));
                progress(&format!(
                    "step {step} {}: return {:.3} goal {:.2} collision {:.2} timeout {:.2}",
                    r.policy, r.mean_return, r.goal, r.collision, r.timeout
                ));
                reports.push(r);
            }
            append(&paths.eval_log, &rows)?;
            if last {
                final_reports = reports;
            }
        }
        if ckpt_due {
            let weights_meta = CheckpointMeta {
                agent: cfg.agent,
                step,
                seed: cfg.seed,
                config: cfg.to_toml(),
                train_log_bytes: 0,
                eval_log_bytes: 0,
            };
            let mut w = CheckpointWriter::new(WEIGHTS_KIND, &hash, serde_json::to_value(&weights_meta)?);
            trainer.learner.write(&mut w, false);
            let path = if last {
                paths.final_checkpoint.clone()
            } else {
                paths.checkpoints.join(format!("step-{step:08}.ckpt"))
            };
            w.write(&path)?;
            if !last {
                let resume_meta = CheckpointMeta {
                    train_log_bytes: file_len(&paths.train_log)?,
                    eval_log_bytes: file_len(&paths.eval_log)?,
                    ..weights_meta
                };
                let mut w = CheckpointWriter::new(RESUME_KIND, &hash, serde_json::to_value(&resume_meta)?);
                trainer.write_snapshot(&mut w)?;
                w.write(&paths.resume)?;
            }
        }
    }
    append(&paths.train_log, &pending)?;
    Ok(TrainOutcome {
        final_checkpoint: paths.final_checkpoint,
        steps: trainer.step_count(),
        episodes: trainer.episode_count(),
        final_reports,
    })
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub policy: PolicyKind,
    pub cv_safe: Option<f64>,
    pub speed: Option<f64>,
    pub episodes: Option<usize>,
    pub suite_seed: Option<u64>,
}

pub fn suite_for(agent: &LoadedAgent, episodes: Option<usize>, suite_seed: Option<u64>, speed: Option<f64>) -> Result<TestSuite> {
    eval::build_test_suite(
        suite_seed.unwrap_or(agent.config.suite_seed),
        episodes.unwrap_or(agent.config.eval_episodes),
        speed,
    )
}

fn gate_with(agent: &LoadedAgent, cv_safe: Option<f64>) -> GateConfig {
    let mut g = agent.config.gate_config();
    if let Some(c) = cv_safe {
        g.cv_safe = c;
    }
    g
}

pub fn command_evaluate(agent: &LoadedAgent, args: &EvaluateArgs) -> Result<EvalReport> {
    let policy = agent.policy(args.policy, gate_with(agent, args.cv_safe))?;
    let suite = suite_for(agent, args.episodes, args.suite_seed, args.speed)?;
    eval::run_evaluation(&policy, &suite, &agent.config.env_config(), &agent.meta())
}

/// Speed sweep of the ensemble (gated and ungated) and optionally the baseline.
pub fn command_sweep(
    rpf: &LoadedAgent,
    dqn: Option<&LoadedAgent>,
    speeds: &[f64],
    episodes: Option<usize>,
    cv_safe: Option<f64>,
) -> Result<Vec<SweepRow>> {
    let mut policies = vec![
        rpf.policy(PolicyKind::RpfGated, gate_with(rpf, cv_safe))?,
        rpf.policy(PolicyKind::RpfMean, GateConfig::default())?,
    ];
    if let Some(d) = dqn {
        policies.push(d.policy(PolicyKind::DqnGreedy, GateConfig::default())?);
    }
    eval::ood_sweep(
        &policies,
        speeds,
        rpf.config.suite_seed,
        episodes.unwrap_or(rpf.config.eval_episodes),
        &rpf.config.env_config(),
        &rpf.meta(),
    )
}

#[derive(Debug, Clone)]
pub struct TraceArgs {
    pub policy: PolicyKind,
    pub cv_safe: Option<f64>,
    pub speed: Option<f64>,
    /// Index into the evaluation suite.
    pub episode: usize,
    pub suite_seed: Option<u64>,
}

pub fn command_trace(agent: &LoadedAgent, args: &TraceArgs) -> Result<eval::Trace> {
    let policy = agent.policy(args.policy, gate_with(agent, args.cv_safe))?;
    let suite = suite_for(agent, Some(args.episode + 1), args.suite_seed, args.speed)?;
    let cfg = suite.env_config(&agent.config.env_config());
    eval::trace_episode(&policy, &cfg, suite.seeds[args.episode])
}
