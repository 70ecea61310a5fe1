//! The intersection decision process on top of [`crate::sim`].
//!
//! Tactical actions retarget the ego IDM controller. Decisions are taken at
//! 4 Hz on the 25 Hz physics grid using the repeating substep pattern
//! `[7, 6, 6, 6]`, so four decisions always span exactly one second.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate;
use crate::sim::{self, IdmParams, SimConfig, SimState, PHYSICS_DT};

pub const SLOTS: usize = 4;
pub const EGO_FEATURES: usize = 3;
pub const SLOT_FEATURES: usize = 6;
pub const OBS_DIM: usize = EGO_FEATURES + SLOTS * SLOT_FEATURES;
pub const N_ACTIONS: usize = 6;

pub const DIST_SCALE: f64 = 100.0;
pub const SPEED_SCALE: f64 = 20.0;
pub const ACCEL_SCALE: f64 = 10.0;
/// Feature value of an empty vehicle slot.
pub const ABSENT: f32 = -1.0;

pub const SUBSTEP_PATTERN: [u32; 4] = [7, 6, 6, 6];

/// Bit set over at most eight actions; bit `a` set means action `a` is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ActionMask(pub u8);

impl ActionMask {
    pub fn all(n: usize) -> Self {
        debug_assert!(n <= 8);
        ActionMask(((1u16 << n) - 1) as u8)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        ActionMask(
            bits.iter()
                .enumerate()
                .fold(0u8, |m, (i, &b)| if b { m | (1 << i) } else { m }),
        )
    }

    #[inline]
    pub fn allows(self, action: usize) -> bool {
        action < 8 && self.0 & (1 << action) != 0
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn to_bools(self, n: usize) -> Vec<bool> {
        (0..n).map(|a| self.allows(a)).collect()
    }

    pub fn allowed(self, n: usize) -> impl Iterator<Item = usize> {
        (0..n).filter(move |&a| self.allows(a))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    TakeWay,
    GiveWay,
    FollowCar1,
    FollowCar2,
    FollowCar3,
    FollowCar4,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::TakeWay,
        Action::GiveWay,
        Action::FollowCar1,
        Action::FollowCar2,
        Action::FollowCar3,
        Action::FollowCar4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// Vehicle slot targeted by a follow action.
    pub fn followed_slot(self) -> Option<usize> {
        match self {
            Action::FollowCar1 => Some(0),
            Action::FollowCar2 => Some(1),
            Action::FollowCar3 => Some(2),
            Action::FollowCar4 => Some(3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::TakeWay => "take_way",
            Action::GiveWay => "give_way",
            Action::FollowCar1 => "follow_car_1",
            Action::FollowCar2 => "follow_car_2",
            Action::FollowCar3 => "follow_car_3",
            Action::FollowCar4 => "follow_car_4",
        }
    }
}

/// What the ego controller executes for one decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Control {
    Tactical(Action),
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: [f32; OBS_DIM],
    pub present: [bool; SLOTS],
}

#[inline]
fn clip(x: f64) -> f32 {
    x.clamp(-1.0, 1.0) as f32
}

/// Non-negative distance mapped so that 0 m is -1 and 100 m is +1.
fn scale_unsigned_distance(d: f64) -> f32 {
    clip(2.0 * d / DIST_SCALE - 1.0)
}

fn scale_signed_distance(d: f64) -> f32 {
    clip(d / DIST_SCALE)
}

/// Normalized observation of a state. Pure function of the state.
pub fn observe(state: &SimState) -> Observation {
    let mut features = [ABSENT; OBS_DIM];
    let mut present = [false; SLOTS];
    let layout = &state.layout;

    features[0] = scale_unsigned_distance(layout.goal_coordinate - state.ego_coordinate());
    features[1] = clip(state.ego.speed / SPEED_SCALE);
    features[2] = clip(state.ego.accel / ACCEL_SCALE);

    for (slot, other) in state.others.iter().take(SLOTS).enumerate() {
        present[slot] = true;
        let ego_to_crossing = state.ego_dist_to(other.route);
        let base = EGO_FEATURES + slot * SLOT_FEATURES;
        features[base] = scale_signed_distance(layout.front_to_entry(ego_to_crossing));
        features[base + 1] = scale_signed_distance(ego_to_crossing);
        features[base + 2] = scale_signed_distance(layout.front_to_entry(other.dist_to_crossing));
        features[base + 3] = scale_signed_distance(other.dist_to_crossing);
        features[base + 4] = clip(other.speed / SPEED_SCALE);
        features[base + 5] = clip(other.accel / ACCEL_SCALE);
    }
    Observation { features, present }
}

/// Take way and give way are always allowed; follow car `j` needs vehicle `j`.
pub fn action_mask(state: &SimState) -> ActionMask {
    let mut bits = [true; N_ACTIONS];
    for (slot, bit) in bits[2..].iter_mut().enumerate() {
        *bit = slot < state.others.len();
    }
    ActionMask::from_bools(&bits)
}

/// IDM target for the ego: bumper gap to a (possibly virtual) leader and its speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub gap: f64,
    pub speed: f64,
}

/// Time gap used when the followed vehicle is further from the crossing than the ego.
pub const FOLLOW_BEHIND_TIME_GAP: f64 = 0.5;

pub fn action_to_target(action: Action, state: &SimState) -> Result<Target> {
    if !action_mask(state).allows(action.index()) {
        return Err(Error::MaskedAction(action.index()));
    }
    let layout = &state.layout;
    Ok(match action {
        Action::TakeWay => Target {
            gap: f64::INFINITY,
            speed: state.ego.desired_speed,
        },
        Action::GiveWay => Target {
            gap: layout.front_to_entry(state.ego.dist_to_crossing),
            speed: 0.0,
        },
        follow => {
            let slot = follow.followed_slot().expect("follow action");
            let other = &state.others[slot];
            let ego_to_crossing = state.ego_dist_to(other.route);
            let gap = if other.dist_to_crossing > ego_to_crossing {
                FOLLOW_BEHIND_TIME_GAP * state.ego.speed
            } else {
                ego_to_crossing - other.dist_to_crossing
            };
            Target {
                gap,
                speed: other.speed,
            }
        }
    })
}

pub fn ego_idm_params(state: &SimState) -> IdmParams {
    IdmParams::surrounding(state.ego.desired_speed)
}

/// Raw (unlimited) IDM command toward `target`.
pub fn idm_command(target: Target, state: &SimState) -> Result<f64> {
    let gap = if target.gap.is_infinite() {
        f64::INFINITY
    } else {
        target.gap.max(sim::MIN_IDM_GAP)
    };
    sim::idm_acceleration(gap, state.ego.speed, target.speed, &ego_idm_params(state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    None,
    Goal,
    Collision,
    Timeout,
}

impl Termination {
    pub fn is_done(self) -> bool {
        self != Termination::None
    }

    /// Timeouts end the episode but are not part of the decision process, so
    /// their transitions never enter the replay memory.
    pub fn stores(self) -> bool {
        self != Termination::Timeout
    }

    /// Whether the successor value must be ignored in a TD target.
    pub fn cuts_bootstrap(self) -> bool {
        matches!(self, Termination::Goal | Termination::Collision)
    }

    pub fn name(self) -> &'static str {
        match self {
            Termination::None => "none",
            Termination::Goal => "goal",
            Termination::Collision => "collision",
            Termination::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Observation,
    pub control: Control,
    pub reward: f64,
    pub next_obs: Observation,
    pub terminal: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub sim: SimConfig,
    pub max_jerk: f64,
    pub max_accel: f64,
    pub fallback_max_accel: f64,
    pub timeout: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            max_jerk: 5.0,
            max_accel: 5.0,
            fallback_max_accel: 10.0,
            timeout: 20.0,
        }
    }
}

impl EnvConfig {
    pub fn timeout_steps(&self) -> u64 {
        (self.timeout / PHYSICS_DT).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        for (name, v) in [
            ("max_jerk", self.max_jerk),
            ("max_accel", self.max_accel),
            ("fallback_max_accel", self.fallback_max_accel),
            ("timeout", self.timeout),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.fallback_max_accel > sim::MAX_ABS_ACCEL || self.max_accel > sim::MAX_ABS_ACCEL {
            return Err(Error::InvalidConfig("acceleration limits exceed 10 m/s^2".into()));
        }
        Ok(())
    }
}

/// Per-substep jerk penalty `-(j/j_max)^2 * dt/tau_max`.
pub fn jerk_penalty(jerk: f64, cfg: &EnvConfig) -> f64 {
    -(jerk / cfg.max_jerk).powi(2) * PHYSICS_DT / cfg.timeout
}

/// Physics substeps executed by decision number `decision_index`.
pub fn substeps_for(decision_index: u64) -> u32 {
    SUBSTEP_PATTERN[(decision_index % SUBSTEP_PATTERN.len() as u64) as usize]
}

/// The stateful decision process: one episode at a time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntersectionEnv {
    pub cfg: EnvConfig,
    pub state: SimState,
    pub decision_index: u64,
    pub finished: bool,
}

/// Realized ego kinematics of one substep, for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubstepRecord {
    pub accel: f64,
    pub jerk: f64,
    pub fallback: bool,
}

impl IntersectionEnv {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let state = sim::init_scenario(seed, &cfg.sim)?;
        Ok(Self {
            cfg,
            state,
            decision_index: 0,
            finished: false,
        })
    }

    pub fn from_state(cfg: EnvConfig, state: SimState) -> Self {
        Self {
            cfg,
            state,
            decision_index: 0,
            finished: false,
        }
    }

    /// Starts a new episode with a fresh scenario and a zeroed clock.
    pub fn episode_reset(&mut self, seed: u64) -> Result<Observation> {
        self.state = sim::init_scenario(seed, &self.cfg.sim)?;
        self.decision_index = 0;
        self.finished = false;
        Ok(observe(&self.state))
    }

    pub fn observation(&self) -> Observation {
        observe(&self.state)
    }

    pub fn mask(&self) -> ActionMask {
        action_mask(&self.state)
    }

    /// Executes one decision and returns the resulting transition.
    pub fn step_decision(&mut self, control: Control) -> Result<Transition> {
        self.step_decision_traced(control, &mut |_| {})
    }

    pub fn step_decision_traced(
        &mut self,
        control: Control,
        on_substep: &mut dyn FnMut(SubstepRecord),
    ) -> Result<Transition> {
        if self.finished {
            return Err(Error::EpisodeFinished);
        }
        if let Control::Tactical(action) = control {
            if !self.mask().allows(action.index()) {
                return Err(Error::MaskedAction(action.index()));
            }
        }
        let obs = observe(&self.state);
        let substeps = substeps_for(self.decision_index);
        let max_delta = self.cfg.max_jerk * PHYSICS_DT;
        let timeout_steps = self.cfg.timeout_steps();
        let mut penalty = 0.0;
        let mut terminal = Termination::None;

        for _ in 0..substeps {
            let prev = self.state.ego.accel;
            let accel = match control {
                Control::Tactical(action) => {
                    let target = action_to_target(action, &self.state)?;
                    let raw = idm_command(target, &self.state)?;
                    (prev + (raw - prev).clamp(-max_delta, max_delta))
                        .clamp(-self.cfg.max_accel, self.cfg.max_accel)
                }
                Control::Fallback => gate::fallback_command(&self.state, self.cfg.fallback_max_accel)?,
            };
            let jerk = (accel - prev) / PHYSICS_DT;
            on_substep(SubstepRecord {
                accel,
                jerk,
                fallback: control == Control::Fallback,
            });
            self.state.step_in_place(accel)?;

            if self.state.detect_collision() {
                terminal = Termination::Collision;
                break;
            }
            if self.state.check_goal() {
                terminal = Termination::Goal;
                break;
            }
            penalty += jerk_penalty(jerk, &self.cfg);
            if self.state.steps >= timeout_steps {
                terminal = Termination::Timeout;
                break;
            }
        }

        self.decision_index += 1;
        let reward = match terminal {
            Termination::Goal => 1.0,
            Termination::Collision => -1.0,
            Termination::None | Termination::Timeout => penalty,
        };
        self.finished = terminal.is_done();
        Ok(Transition {
            obs,
            control,
            reward,
            next_obs: observe(&self.state),
            terminal,
        })
    }
}

/// Minimal episodic environment interface used by the trainers.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<(Vec<f32>, ActionMask)>;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub obs: Vec<f32>,
    pub mask: ActionMask,
    pub reward: f32,
    pub termination: Termination,
}

impl Environment for IntersectionEnv {
    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn reset(&mut self, seed: u64) -> Result<(Vec<f32>, ActionMask)> {
        let obs = self.episode_reset(seed)?;
        Ok((obs.features.to_vec(), self.mask()))
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let action = Action::from_index(action).ok_or(Error::MaskedAction(action))?;
        let tr = self.step_decision(Control::Tactical(action))?;
        Ok(EnvStep {
            obs: tr.next_obs.features.to_vec(),
            mask: self.mask(),
            reward: tr.reward as f32,
            termination: tr.terminal,
        })
    }
}
