//! Training loop shared by the ensemble and the baseline.
//!
//! Every random decision draws from a stream named after what it is for and
//! indexed by the step or episode it belongs to, so a run restored from a
//! snapshot continues exactly like an uninterrupted one.

use serde::{Deserialize, Serialize};

use crate::config::AgentKind;
use crate::dqn::{DqnAgent, EpsilonSchedule};
use crate::env::{ActionMask, Environment, Termination};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, CheckpointWriter};
use crate::nn::Arch;
use crate::replay::{BootstrapReplay, Experience};
use crate::rpf::{Ensemble, RpfConfig};
use crate::seed;

#[derive(Debug, Clone)]
pub enum Learner {
    Rpf(Ensemble),
    Dqn(DqnAgent),
}

impl Learner {
    pub fn new(kind: AgentKind, arch: Arch, rpf: RpfConfig, schedule: EpsilonSchedule, master: u64) -> Result<Self> {
        Ok(match kind {
            AgentKind::Rpf => Learner::Rpf(Ensemble::new(arch, rpf, master)?),
            AgentKind::Dqn => Learner::Dqn(DqnAgent::new(arch, rpf, schedule, master)?),
        })
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            Learner::Rpf(_) => AgentKind::Rpf,
            Learner::Dqn(_) => AgentKind::Dqn,
        }
    }

    pub fn cfg(&self) -> &RpfConfig {
        match self {
            Learner::Rpf(e) => &e.cfg,
            Learner::Dqn(d) => &d.cfg,
        }
    }

    pub fn members(&self) -> usize {
        match self {
            Learner::Rpf(e) => e.len(),
            Learner::Dqn(_) => 1,
        }
    }

    pub fn write(&self, w: &mut CheckpointWriter, with_training_state: bool) {
        match self {
            Learner::Rpf(e) => e.write(w, with_training_state),
            Learner::Dqn(d) => d.write(w, with_training_state),
        }
    }

    pub fn read(
        ck: &Checkpoint,
        kind: AgentKind,
        arch: Arch,
        rpf: RpfConfig,
        schedule: EpsilonSchedule,
        with_training_state: bool,
    ) -> Result<Self> {
        Ok(match kind {
            AgentKind::Rpf => Learner::Rpf(Ensemble::read(ck, arch, rpf, with_training_state)?),
            AgentKind::Dqn => Learner::Dqn(DqnAgent::read(ck, arch, rpf, schedule, with_training_state)?),
        })
    }

    fn replay(&self, obs_dim: usize) -> Result<BootstrapReplay> {
        match self {
            Learner::Rpf(e) => BootstrapReplay::new(e.cfg.replay_capacity, obs_dim, e.len(), e.cfg.p_add),
            Learner::Dqn(d) => d.replay(obs_dim),
        }
    }
}

/// Summary of one finished training episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    /// Decision steps taken so far, this episode included.
    pub step: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length: u32,
    pub outcome: Termination,
    pub nu: Option<usize>,
    pub epsilon: Option<f64>,
    /// Mean loss of each member over the episode's updates.
    pub losses: Vec<Option<f64>>,
}

impl EpisodeLog {
    pub fn csv_header(members: usize) -> String {
        let mut h = String::from("step,episode,return,length,outcome,nu,epsilon");
        for k in 0..members {
            h.push_str(&format!(",loss_{k}"));
        }
        h.push('\n');
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            self.ret,
            self.length,
            self.outcome.name(),
            self.nu.map(|v| v.to_string()).unwrap_or_default(),
            self.epsilon.map(|v| v.to_string()).unwrap_or_default(),
        );
        for l in &self.losses {
            row.push(',');
            if let Some(l) = l {
                row.push_str(&l.to_string());
            }
        }
        row.push('\n');
        row
    }
}

/// Progress inside the current episode; enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeState {
    nu: usize,
    ret: f64,
    actions: Vec<u8>,
    loss_sum: Vec<f64>,
    loss_n: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Counters {
    master: u64,
    step: u64,
    episode: u64,
    current: EpisodeState,
}

pub struct Trainer<E: Environment> {
    pub env: E,
    pub learner: Learner,
    pub replay: BootstrapReplay,
    master: u64,
    step: u64,
    episode: u64,
    obs: Vec<f32>,
    mask: ActionMask,
    current: EpisodeState,
}

impl<E: Environment> Trainer<E> {
    pub fn new(env: E, learner: Learner, master: u64) -> Result<Self> {
        let replay = learner.replay(env.obs_dim())?;
        let mut t = Self {
            env,
            learner,
            replay,
            master,
            step: 0,
            episode: 0,
            obs: Vec::new(),
            mask: ActionMask::default(),
            current: EpisodeState {
                nu: 0,
                ret: 0.0,
                actions: Vec::new(),
                loss_sum: Vec::new(),
                loss_n: Vec::new(),
            },
        };
        t.start_episode()?;
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn episode_count(&self) -> u64 {
        self.episode
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Member followed in the current episode (always 0 for the baseline).
    pub fn current_member(&self) -> usize {
        self.current.nu
    }

    fn episode_seed(&self) -> u64 {
        seed::derive(self.master, seed::SCENARIO, self.episode)
    }

    fn start_episode(&mut self) -> Result<()> {
        let (obs, mask) = self.env.reset(self.episode_seed())?;
        self.obs = obs;
        self.mask = mask;
        let nu = match &self.learner {
            Learner::Rpf(e) => e.begin_episode(&mut seed::rng(self.master, seed::MEMBER, self.episode)),
            Learner::Dqn(_) => 0,
        };
        let k = self.learner.members();
        self.current = EpisodeState {
            nu,
            ret: 0.0,
            actions: Vec::new(),
            loss_sum: vec![0.0; k],
            loss_n: vec![0; k],
        };
        Ok(())
    }

    fn choose(&self) -> usize {
        match &self.learner {
            Learner::Rpf(e) => e.act_training(&self.obs, self.mask, self.current.nu),
            Learner::Dqn(d) => d.act(&self.obs, self.mask, self.step, &mut seed::rng(self.master, seed::EPSILON, self.step)),
        }
    }

    /// One decision step: act, store, learn, refresh targets. Returns the
    /// summary of the episode if this step ended it.
    pub fn step(&mut self) -> Result<Option<EpisodeLog>> {
        let i = self.step;
        let action = self.choose();
        let out = self.env.step(action)?;
        if out.termination.stores() {
            let exp = Experience {
                obs: std::mem::take(&mut self.obs),
                mask: self.mask,
                action: action as u8,
                reward: out.reward,
                next_obs: out.obs.clone(),
                next_mask: out.mask,
                terminal: out.termination.cuts_bootstrap(),
            };
            self.replay.push(&exp, &mut seed::rng(self.master, seed::MASKS, i))?;
        }
        self.current.ret += out.reward as f64;
        self.current.actions.push(action as u8);
        self.obs = out.obs;
        self.mask = out.mask;

        let cfg = *self.learner.cfg();
        if i >= cfg.n_start {
            let losses = match &mut self.learner {
                Learner::Rpf(e) => e.update_all(&self.replay, self.master, i)?,
                Learner::Dqn(d) => {
                    let mut rng = seed::rng(self.master, seed::MINIBATCH, crate::rpf::minibatch_index(i, 0));
                    vec![d.dqn_update(&self.replay, &mut rng)?]
                }
            };
            for (k, l) in losses.into_iter().enumerate() {
                if let Some(l) = l {
                    self.current.loss_sum[k] += l as f64;
                    self.current.loss_n[k] += 1;
                }
            }
        }
        self.step += 1;
        if self.step % cfg.n_update == 0 {
            match &mut self.learner {
                Learner::Rpf(e) => e.sync_targets(),
                Learner::Dqn(d) => d.sync_target(),
            }
        }

        if !out.termination.is_done() {
            return Ok(None);
        }
        let log = EpisodeLog {
            episode: self.episode,
            step: self.step,
            ret: self.current.ret,
            length: self.current.actions.len() as u32,
            outcome: out.termination,
            nu: matches!(self.learner, Learner::Rpf(_)).then_some(self.current.nu),
            epsilon: match &self.learner {
                Learner::Dqn(d) => Some(d.schedule.epsilon_at(i)),
                Learner::Rpf(_) => None,
            },
            losses: self
                .current
                .loss_sum
                .iter()
                .zip(&self.current.loss_n)
                .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
                .collect(),
        };
        self.episode += 1;
        self.start_episode()?;
        Ok(Some(log))
    }

    /// Writes everything needed to continue the run bit for bit.
    pub fn write_snapshot(&self, w: &mut CheckpointWriter) -> Result<()> {
        self.learner.write(w, true);
        w.bytes("replay", &self.replay.to_bytes());
        let counters = Counters {
            master: self.master,
            step: self.step,
            episode: self.episode,
            current: self.current.clone(),
        };
        w.bytes("trainer", &serde_json::to_vec(&counters)?);
        Ok(())
    }

    /// Rebuilds a trainer from [`Trainer::write_snapshot`] output. The current
    /// episode is regenerated by replaying its recorded actions.
    pub fn from_snapshot(env: E, ck: &Checkpoint, learner: Learner) -> Result<Self> {
        let counters: Counters = serde_json::from_slice(ck.bytes("trainer")?)
            .map_err(|e| Error::MalformedCheckpoint(format!("trainer state: {e}")))?;
        let replay = BootstrapReplay::from_bytes(ck.bytes("replay")?)?;
        if replay.members() != learner.members() || replay.obs_dim() != env.obs_dim() {
            return Err(Error::Incompatible("replay memory does not match the learner".into()));
        }
        let mut t = Self {
            env,
            learner,
            replay,
            master: counters.master,
            step: counters.step,
            episode: counters.episode,
            obs: Vec::new(),
            mask: ActionMask::default(),
            current: counters.current.clone(),
        };
        let (obs, mask) = t.env.reset(t.episode_seed())?;
        t.obs = obs;
        t.mask = mask;
        for &a in &counters.current.actions {
            let out = t.env.step(a as usize)?;
            if out.termination.is_done() {
                return Err(Error::MalformedCheckpoint("snapshot episode already finished".into()));
            }
            t.obs = out.obs;
            t.mask = out.mask;
        }
        Ok(t)
    }
}
