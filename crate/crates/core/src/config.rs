//! Run configuration: one flat TOML document.
//!
//! Every key is optional and defaults to the published simulator and
//! training parameters. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dqn::EpsilonSchedule;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::gate::GateConfig;
use crate::nn::AdamConfig;
use crate::rpf::RpfConfig;
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Rpf,
    Dqn,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Rpf => "rpf",
            AgentKind::Dqn => "dqn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub agent: AgentKind,
    pub seed: u64,
    pub total_steps: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub eval_episodes: usize,
    pub suite_seed: u64,

    // Simulator.
    pub vehicles_min: usize,
    pub vehicles_max: usize,
    pub ego_start_min: f64,
    pub ego_start_max: f64,
    pub target_start_min: f64,
    pub target_start_max: f64,
    pub desired_speed_min: f64,
    pub desired_speed_max: f64,
    pub ego_initial_speed: f64,
    pub ego_desired_speed: f64,
    pub yield_probability: f64,
    pub bidirectional_probability: f64,
    pub min_spawn_spacing: f64,

    // Decision process.
    pub max_jerk: f64,
    pub max_accel: f64,
    pub fallback_max_accel: f64,
    pub timeout: f64,

    // Learning.
    pub members: usize,
    pub prior_scale: f64,
    pub p_add: f64,
    pub gamma: f64,
    pub n_start: u64,
    pub batch_size: usize,
    pub n_update: u64,
    pub replay_capacity: usize,
    pub huber_delta: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_end_step: u64,

    // Confidence gate.
    pub cv_safe: f64,
    pub cv_mean_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let env = EnvConfig::default();
        let rpf = RpfConfig::default();
        let eps = EpsilonSchedule::default();
        let gate = GateConfig::default();
        Self {
            agent: AgentKind::Rpf,
            seed: 0,
            total_steps: 3_000_000,
            eval_every: 50_000,
            checkpoint_every: 50_000,
            eval_episodes: 100,
            suite_seed: 1,
            vehicles_min: sim.vehicles_min,
            vehicles_max: sim.vehicles_max,
            ego_start_min: sim.ego_start_min,
            ego_start_max: sim.ego_start_max,
            target_start_min: sim.target_start_min,
            target_start_max: sim.target_start_max,
            desired_speed_min: sim.desired_speed_min,
            desired_speed_max: sim.desired_speed_max,
            ego_initial_speed: sim.ego_initial_speed,
            ego_desired_speed: sim.ego_desired_speed,
            yield_probability: sim.yield_probability,
            bidirectional_probability: sim.bidirectional_probability,
            min_spawn_spacing: sim.min_spawn_spacing,
            max_jerk: env.max_jerk,
            max_accel: env.max_accel,
            fallback_max_accel: env.fallback_max_accel,
            timeout: env.timeout,
            members: rpf.members,
            prior_scale: rpf.prior_scale,
            p_add: rpf.p_add,
            gamma: rpf.gamma,
            n_start: rpf.n_start,
            batch_size: rpf.batch_size,
            n_update: rpf.n_update,
            replay_capacity: rpf.replay_capacity,
            huber_delta: rpf.huber_delta,
            learning_rate: rpf.adam.lr,
            adam_beta1: rpf.adam.beta1,
            adam_beta2: rpf.adam.beta2,
            adam_eps: rpf.adam.eps,
            epsilon_start: eps.start,
            epsilon_end: eps.end,
            epsilon_end_step: eps.end_step,
            cv_safe: gate.cv_safe,
            cv_mean_floor: gate.mean_floor,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            vehicles_min: self.vehicles_min,
            vehicles_max: self.vehicles_max,
            ego_start_min: self.ego_start_min,
            ego_start_max: self.ego_start_max,
            target_start_min: self.target_start_min,
            target_start_max: self.target_start_max,
            desired_speed_min: self.desired_speed_min,
            desired_speed_max: self.desired_speed_max,
            ego_initial_speed: self.ego_initial_speed,
            ego_desired_speed: self.ego_desired_speed,
            yield_probability: self.yield_probability,
            bidirectional_probability: self.bidirectional_probability,
            min_spawn_spacing: self.min_spawn_spacing,
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            sim: self.sim_config(),
            max_jerk: self.max_jerk,
            max_accel: self.max_accel,
            fallback_max_accel: self.fallback_max_accel,
            timeout: self.timeout,
        }
    }

    pub fn rpf_config(&self) -> RpfConfig {
        RpfConfig {
            members: self.members,
            prior_scale: self.prior_scale,
            p_add: self.p_add,
            gamma: self.gamma,
            n_start: self.n_start,
            batch_size: self.batch_size,
            n_update: self.n_update,
            replay_capacity: self.replay_capacity,
            huber_delta: self.huber_delta,
            adam: AdamConfig {
                lr: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        }
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            start: self.epsilon_start,
            end: self.epsilon_end,
            end_step: self.epsilon_end_step,
        }
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            cv_safe: self.cv_safe,
            mean_floor: self.cv_mean_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env_config().validate()?;
        self.rpf_config().validate()?;
        self.epsilon_schedule().validate()?;
        self.gate_config().validate()?;
        if self.eval_episodes == 0 {
            return Err(Error::InvalidConfig("eval_episodes must be positive".into()));
        }
        if self.agent == AgentKind::Dqn && self.members != 1 {
            // The baseline ignores `members`; keep the hash honest about it.
            return Err(Error::InvalidConfig("dqn runs use members = 1".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form with the seed left out, so runs
    /// that differ only in their seed share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Defaults for the baseline: identical except for agent kind and `members = 1`.
    pub fn dqn_default() -> Self {
        Self {
            agent: AgentKind::Dqn,
            members: 1,
            ..Self::default()
        }
    }
}
