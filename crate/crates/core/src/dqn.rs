//! Double DQN baseline with an annealed epsilon-greedy behaviour policy.
//!
//! The baseline is a single member without prior (`beta = 0`) trained on a
//! replay memory where every experience is visible to it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::ActionMask;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, CheckpointWriter};
use crate::nn::{self, Arch, Network};
use crate::replay::BootstrapReplay;
use crate::rpf::{self, Member, RpfConfig};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub end_step: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.05,
            end_step: 1_000_000,
        }
    }
}

impl EpsilonSchedule {
    /// Linear from `start` at step 0 to `end` at `end_step`, constant after.
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if step >= self.end_step {
            return self.end;
        }
        let frac = step as f64 / self.end_step as f64;
        self.start + (self.end - self.start) * frac
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.start) || !(0.0..=1.0).contains(&self.end) || self.end > self.start {
            return Err(Error::InvalidConfig(format!(
                "epsilon schedule needs 0 <= end <= start <= 1, got {} -> {}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// With probability `epsilon` a uniformly drawn allowed action, else the
/// greedy one. `epsilon = 0` consumes no randomness.
pub fn act_epsilon_greedy<R: Rng + ?Sized>(q: &[f32], mask: ActionMask, epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let n = mask.count();
        let pick = rng.gen_range(0..n);
        return mask.allowed(q.len()).nth(pick).expect("pick < allowed count");
    }
    nn::masked_argmax(q, mask).expect("at least one allowed action")
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub cfg: RpfConfig,
    pub schedule: EpsilonSchedule,
    pub net: Member,
}

impl DqnAgent {
    pub fn new(arch: Arch, cfg: RpfConfig, schedule: EpsilonSchedule, master: u64) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        arch.validate()?;
        let net = Member::new(
            arch,
            seed::derive(master, seed::INIT, 0),
            seed::derive(master, seed::PRIOR, 0),
            cfg.adam,
        );
        Ok(Self { cfg, schedule, net })
    }

    /// Replay memory of the baseline: one member that sees everything.
    pub fn replay(&self, obs_dim: usize) -> Result<BootstrapReplay> {
        BootstrapReplay::new(self.cfg.replay_capacity, obs_dim, 1, 1.0)
    }

    pub fn q(&self, obs: &[f32], mask: ActionMask) -> Vec<f32> {
        self.net.q(0.0, obs, mask)
    }

    pub fn act_greedy(&self, obs: &[f32], mask: ActionMask) -> usize {
        nn::masked_argmax(&self.q(obs, mask), mask).expect("at least one allowed action")
    }

    pub fn act<R: Rng + ?Sized>(&self, obs: &[f32], mask: ActionMask, step: u64, rng: &mut R) -> usize {
        act_epsilon_greedy(&self.q(obs, mask), mask, self.schedule.epsilon_at(step), rng)
    }

    pub fn dqn_update<R: Rng + ?Sized>(&mut self, replay: &BootstrapReplay, rng: &mut R) -> Result<Option<f32>> {
        let cfg = self.cfg;
        rpf::member_update(&mut self.net, 0, &cfg, 0.0, replay, rng)
    }

    pub fn sync_target(&mut self) {
        self.net.sync_target();
    }

    pub fn write(&self, w: &mut CheckpointWriter, with_training_state: bool) {
        w.network("dqn/online/", &self.net.online);
        if with_training_state {
            rpf::write_training_state(w, "dqn/", &self.net);
        }
    }

    pub fn read(
        ck: &Checkpoint,
        arch: Arch,
        cfg: RpfConfig,
        schedule: EpsilonSchedule,
        with_training_state: bool,
    ) -> Result<Self> {
        let online = ck.network("dqn/online/", arch)?;
        let net = rpf::read_member(ck, "dqn/", online, Network::zeros(arch), cfg.adam, with_training_state)?;
        Ok(Self { cfg, schedule, net })
    }
}
