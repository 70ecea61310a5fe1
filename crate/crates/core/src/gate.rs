//! Confidence gate over ensemble Q-values and the fallback controller.
//!
//! The uncertainty of an action is the coefficient of variation of the
//! members' Q-values for it. The gated policy maximizes the mean Q-value over
//! actions whose coefficient of variation stays below `cv_safe`, and falls back
//! to an emergency give-way when no action qualifies.

use serde::{Deserialize, Serialize};

use crate::env::{self, Action, Control, Target};
use crate::error::{Error, Result};
use crate::rpf::QMatrix;
use crate::sim::SimState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub cv_safe: f64,
    /// Floor on `|mean|` in the denominator.
    pub mean_floor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            cv_safe: 0.2,
            mean_floor: 1e-6,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cv_safe > 0.0) || !(self.mean_floor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "gate needs cv_safe > 0 and mean_floor > 0, got {} and {}",
                self.cv_safe, self.mean_floor
            )));
        }
        Ok(())
    }
}

/// Column mean over members for every unmasked action.
pub fn mean_per_action(q: &QMatrix) -> Vec<Option<f64>> {
    (0..q.actions)
        .map(|a| {
            q.mask.allows(a).then(|| {
                let sum: f64 = (0..q.members).map(|k| q.get(k, a) as f64).sum();
                sum / q.members as f64
            })
        })
        .collect()
}

/// Population standard deviation over members divided by `max(|mean|, floor)`.
/// Masked actions yield `None`.
pub fn cv_per_action(q: &QMatrix, mean_floor: f64) -> Result<Vec<Option<f64>>> {
    if q.members < 2 {
        return Err(Error::TooFewMembers(q.members));
    }
    let means = mean_per_action(q);
    Ok(means
        .iter()
        .enumerate()
        .map(|(a, mean)| {
            mean.map(|mean| {
                let var = (0..q.members)
                    .map(|k| (q.get(k, a) as f64 - mean).powi(2))
                    .sum::<f64>()
                    / q.members as f64;
                var.sqrt() / mean.abs().max(mean_floor)
            })
        })
        .collect())
}

/// Lowest-index argmax over the `Some` entries.
pub fn argmax_some(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (a, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((a, v));
            }
        }
    }
    best.map(|(a, _)| a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub chosen: Control,
    /// Ungated mean-argmax action, used for the chosen-action statistics.
    pub mean_argmax: Option<usize>,
    pub cv: Vec<Option<f64>>,
    pub mean: Vec<Option<f64>>,
    pub gated_out: Vec<bool>,
}

/// Best mean action among those with `cv < cv_safe`, else the fallback.
/// Defined for every input: without a usable spread estimate (fewer than
/// two members, non-finite values) every action counts as gated out.
pub fn gated_action(q: &QMatrix, cfg: &GateConfig) -> GateDecision {
    let mean = mean_per_action(q);
    let cv = cv_per_action(q, cfg.mean_floor)
        .unwrap_or_else(|_| (0..q.actions).map(|a| q.mask.allows(a).then_some(f64::INFINITY)).collect());
    let gated_out: Vec<bool> = cv
        .iter()
        .map(|c| match c {
            Some(c) => !(*c < cfg.cv_safe),
            None => false,
        })
        .collect();
    let qualified: Vec<Option<f64>> = mean
        .iter()
        .zip(&gated_out)
        .map(|(m, &out)| if out { None } else { m.filter(|v| !v.is_nan()) })
        .collect();
    let chosen = match argmax_some(&qualified).and_then(Action::from_index) {
        Some(a) => Control::Tactical(a),
        None => Control::Fallback,
    };
    GateDecision {
        chosen,
        mean_argmax: argmax_some(&mean),
        cv,
        mean,
        gated_out,
    }
}

/// Acceleration command of the fallback action: give way without jerk limit
/// and with the larger acceleration authority. Once the ego has passed the
/// last crossing point it keeps driving toward the goal instead.
pub fn fallback_command(state: &SimState, max_accel: f64) -> Result<f64> {
    let target = if state.ego_coordinate() > state.layout.last_crossing() {
        Target {
            gap: f64::INFINITY,
            speed: state.ego.desired_speed,
        }
    } else {
        Target {
            gap: state.layout.front_to_entry(state.ego.dist_to_crossing),
            speed: 0.0,
        }
    };
    Ok(env::idm_command(target, state)?.clamp(-max_accel, max_accel))
}
