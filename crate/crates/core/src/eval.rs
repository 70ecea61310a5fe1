//! Fixed test suites, evaluation reports, speed sweeps and decision traces.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dqn::DqnAgent;
use crate::env::{Action, ActionMask, Control, EnvConfig, IntersectionEnv, Termination, N_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::gate::{self, GateConfig};
use crate::nn::checkpoint::FORMAT_VERSION;
use crate::rpf::{Ensemble, QMatrix};
use crate::seed;

pub const OOD_SPEEDS: [f64; 6] = [10.0, 12.0, 14.0, 16.0, 18.0, 20.0];
pub const PERCENTILES: [f64; 5] = [1.0, 10.0, 50.0, 90.0, 99.0];

/// Identification embedded in every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
}

impl RunMeta {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    /// Leading comment line of the CSV outputs.
    pub fn csv_comment(&self) -> String {
        format!(
            "# format_version={} config_hash={} seed={}\n",
            self.format_version, self.config_hash, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuite {
    pub generation_seed: u64,
    pub speed_override: Option<f64>,
    pub seeds: Vec<u64>,
}

pub fn build_test_suite(generation_seed: u64, episodes: usize, speed_override: Option<f64>) -> Result<TestSuite> {
    if let Some(v) = speed_override {
        if !(10.0..=20.0).contains(&v) {
            return Err(Error::InvalidConfig(format!("suite speed override {v} outside [10, 20] m/s")));
        }
    }
    Ok(TestSuite {
        generation_seed,
        speed_override,
        seeds: (0..episodes as u64)
            .map(|i| seed::derive(generation_seed, seed::SUITE, i))
            .collect(),
    })
}

impl TestSuite {
    pub fn env_config(&self, base: &EnvConfig) -> EnvConfig {
        match self.speed_override {
            Some(v) => EnvConfig {
                sim: base.sim.with_fixed_speed(v),
                ..base.clone()
            },
            None => base.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "rpf-mean")]
    RpfMean,
    #[serde(rename = "rpf-gated")]
    RpfGated,
    #[serde(rename = "dqn-greedy")]
    DqnGreedy,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::RpfMean => "rpf-mean",
            PolicyKind::RpfGated => "rpf-gated",
            PolicyKind::DqnGreedy => "dqn-greedy",
        }
    }
}

/// Deterministic evaluation policy.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    RpfMean(&'a Ensemble),
    RpfGated(&'a Ensemble, GateConfig),
    DqnGreedy(&'a DqnAgent),
    /// Always the same action when allowed, give way otherwise.
    Constant(Action),
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::RpfMean(_) => PolicyKind::RpfMean.name(),
            Policy::RpfGated(..) => PolicyKind::RpfGated.name(),
            Policy::DqnGreedy(_) => PolicyKind::DqnGreedy.name(),
            Policy::Constant(_) => "constant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub control: Control,
    pub q: Option<QMatrix>,
    pub cv: Vec<Option<f64>>,
    pub mean: Vec<Option<f64>>,
    /// Ensemble mean argmax; its c_v is the one reported.
    pub mean_argmax: Option<usize>,
}

impl Decision {
    pub fn cv_of_mean_argmax(&self) -> Option<f64> {
        self.mean_argmax.and_then(|a| self.cv.get(a).copied().flatten())
    }
}

pub fn decide(policy: &Policy<'_>, obs: &[f32], mask: ActionMask) -> Decision {
    match *policy {
        Policy::RpfMean(ens) | Policy::RpfGated(ens, _) => {
            let q = ens.ensemble_q(obs, mask);
            let gate_cfg = match *policy {
                Policy::RpfGated(_, g) => g,
                _ => GateConfig::default(),
            };
            let d = gate::gated_action(&q, &gate_cfg);
            let control = match policy {
                Policy::RpfGated(..) => d.chosen,
                _ => Control::Tactical(
                    d.mean_argmax
                        .and_then(Action::from_index)
                        .expect("at least one allowed action"),
                ),
            };
            let (cv, mean) = if q.members >= 2 {
                (d.cv, d.mean)
            } else {
                (vec![None; q.actions], d.mean)
            };
            Decision {
                control,
                q: Some(q),
                cv,
                mean,
                mean_argmax: d.mean_argmax,
            }
        }
        Policy::DqnGreedy(agent) => {
            let a = agent.act_greedy(obs, mask);
            Decision {
                control: Control::Tactical(Action::from_index(a).expect("valid action")),
                q: None,
                cv: vec![None; N_ACTIONS],
                mean: vec![None; N_ACTIONS],
                mean_argmax: None,
            }
        }
        Policy::Constant(action) => {
            let a = if mask.allows(action.index()) {
                action
            } else {
                Action::GiveWay
            };
            Decision {
                control: Control::Tactical(a),
                q: None,
                cv: vec![None; N_ACTIONS],
                mean: vec![None; N_ACTIONS],
                mean_argmax: None,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub seed: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub outcome: Termination,
    pub decisions: u32,
    pub fallback_used: bool,
    #[serde(skip)]
    pub chosen_cv: Vec<f64>,
}

pub fn run_episode(policy: &Policy<'_>, env_cfg: &EnvConfig, index: usize, episode_seed: u64) -> Result<EpisodeRecord> {
    let mut env = IntersectionEnv::new(env_cfg.clone(), episode_seed)?;
    let mut ret = 0.0;
    let mut decisions = 0;
    let mut fallback_used = false;
    let mut chosen_cv = Vec::new();
    loop {
        let obs = env.observation();
        let d = decide(policy, &obs.features, env.mask());
        if let Some(c) = d.cv_of_mean_argmax() {
            chosen_cv.push(c);
        }
        fallback_used |= d.control == Control::Fallback;
        let tr = env.step_decision(d.control)?;
        ret += tr.reward;
        decisions += 1;
        if tr.terminal.is_done() {
            return Ok(EpisodeRecord {
                index,
                seed: episode_seed,
                ret,
                outcome: tr.terminal,
                decisions,
                fallback_used,
                chosen_cv,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvStats {
    pub samples: usize,
    pub mean: f64,
    pub p1: f64,
    pub p10: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

/// Linear interpolation between order statistics. `sorted` must be ascending
/// and non-empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn cv_stats(values: &[f64]) -> Option<CvStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let p: Vec<f64> = PERCENTILES.iter().map(|&q| percentile(&sorted, q)).collect();
    Some(CvStats {
        samples: sorted.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        p1: p[0],
        p10: p[1],
        p50: p[2],
        p90: p[3],
        p99: p[4],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub meta: RunMeta,
    pub policy: String,
    pub suite_seed: u64,
    pub speed_override: Option<f64>,
    pub episodes: usize,
    pub mean_return: f64,
    pub goal: f64,
    pub collision: f64,
    pub timeout: f64,
    pub collisions: usize,
    pub fallback_episodes: f64,
    pub chosen_cv: Option<CvStats>,
    pub records: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Runs every suite episode (in parallel) and aggregates in episode order.
pub fn run_evaluation(policy: &Policy<'_>, suite: &TestSuite, base: &EnvConfig, meta: &RunMeta) -> Result<EvalReport> {
    let env_cfg = suite.env_config(base);
    let records: Vec<EpisodeRecord> = suite
        .seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| run_episode(policy, &env_cfg, i, s))
        .collect::<Result<_>>()?;
    let n = records.len().max(1) as f64;
    let count = |t: Termination| records.iter().filter(|r| r.outcome == t).count();
    let collisions = count(Termination::Collision);
    let cv: Vec<f64> = records.iter().flat_map(|r| r.chosen_cv.iter().copied()).collect();
    Ok(EvalReport {
        meta: meta.clone(),
        policy: policy.name().to_string(),
        suite_seed: suite.generation_seed,
        speed_override: suite.speed_override,
        episodes: records.len(),
        mean_return: records.iter().map(|r| r.ret).sum::<f64>() / n,
        goal: count(Termination::Goal) as f64 / n,
        collision: collisions as f64 / n,
        timeout: count(Termination::Timeout) as f64 / n,
        collisions,
        fallback_episodes: records.iter().filter(|r| r.fallback_used).count() as f64 / n,
        chosen_cv: cv_stats(&cv),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub speed: f64,
    pub reports: Vec<EvalReport>,
}

/// One suite per speed, all generated from `suite_seed`, evaluated for every policy.
pub fn ood_sweep(
    policies: &[Policy<'_>],
    speeds: &[f64],
    suite_seed: u64,
    episodes: usize,
    base: &EnvConfig,
    meta: &RunMeta,
) -> Result<Vec<SweepRow>> {
    speeds
        .iter()
        .map(|&speed| {
            let suite = build_test_suite(suite_seed, episodes, Some(speed))?;
            let reports = policies
                .iter()
                .map(|p| run_evaluation(p, &suite, base, meta))
                .collect::<Result<_>>()?;
            Ok(SweepRow { speed, reports })
        })
        .collect()
}

/// Wide table: one row per speed, five columns per policy.
pub fn sweep_csv(rows: &[SweepRow], meta: &RunMeta) -> String {
    let mut out = meta.csv_comment();
    out.push_str("speed");
    if let Some(first) = rows.first() {
        for r in &first.reports {
            for col in ["collision", "fallback", "goal", "timeout", "return"] {
                let _ = write!(out, ",{}_{col}", r.policy);
            }
        }
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{}", row.speed);
        for r in &row.reports {
            let _ = write!(
                out,
                ",{},{},{},{},{}",
                r.collision, r.fallback_episodes, r.goal, r.timeout, r.mean_return
            );
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub decision: u32,
    pub time: f64,
    pub obs: Vec<f32>,
    pub decision_info: Decision,
    pub ego_coordinate: f64,
    pub ego_speed: f64,
    pub ego_accel: f64,
    pub reward: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub policy: String,
    pub episode_seed: u64,
    pub rows: Vec<TraceRow>,
    pub outcome: Termination,
    /// Simulated time at which the episode ended.
    pub end_time: f64,
}

pub fn trace_episode(policy: &Policy<'_>, env_cfg: &EnvConfig, episode_seed: u64) -> Result<Trace> {
    let mut env = IntersectionEnv::new(env_cfg.clone(), episode_seed)?;
    let mut rows = Vec::new();
    loop {
        let obs = env.observation();
        let time = env.state.sim_time();
        let d = decide(policy, &obs.features, env.mask());
        let (coord, speed, accel) = (env.state.ego_coordinate(), env.state.ego.speed, env.state.ego.accel);
        let tr = env.step_decision(d.control)?;
        rows.push(TraceRow {
            decision: rows.len() as u32,
            time,
            obs: obs.features.to_vec(),
            decision_info: d,
            ego_coordinate: coord,
            ego_speed: speed,
            ego_accel: accel,
            reward: tr.reward,
            termination: tr.terminal,
        });
        if tr.terminal.is_done() {
            return Ok(Trace {
                policy: policy.name().to_string(),
                episode_seed,
                outcome: tr.terminal,
                end_time: env.state.sim_time(),
                rows,
            });
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per decision. `time_to_end` is negative and reaches the episode end at zero.
pub fn trace_csv(trace: &Trace, meta: &RunMeta) -> String {
    let members = trace
        .rows
        .first()
        .and_then(|r| r.decision_info.q.as_ref())
        .map_or(0, |q| q.members);
    let mut out = meta.csv_comment();
    let _ = writeln!(
        out,
        "# policy={} episode_seed={} outcome={} end_time={}",
        trace.policy,
        trace.episode_seed,
        trace.outcome.name(),
        trace.end_time
    );
    out.push_str("decision,time,time_to_end,ego_coordinate,ego_speed,ego_accel,chosen,fallback,mean_argmax,cv_chosen");
    for a in 0..N_ACTIONS {
        let _ = write!(out, ",cv_{a}");
    }
    for a in 0..N_ACTIONS {
        let _ = write!(out, ",mean_{a}");
    }
    for k in 0..members {
        for a in 0..N_ACTIONS {
            let _ = write!(out, ",q_{k}_{a}");
        }
    }
    for i in 0..OBS_DIM {
        let _ = write!(out, ",obs_{i}");
    }
    out.push_str(",reward,termination\n");
    for r in &trace.rows {
        let d = &r.decision_info;
        let chosen = match d.control {
            Control::Tactical(a) => a.name(),
            Control::Fallback => "fallback",
        };
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.decision,
            r.time,
            r.time - trace.end_time,
            r.ego_coordinate,
            r.ego_speed,
            r.ego_accel,
            chosen,
            d.control == Control::Fallback,
            d.mean_argmax.map(|a| a.to_string()).unwrap_or_default(),
            opt(d.cv_of_mean_argmax()),
        );
        for a in 0..N_ACTIONS {
            let _ = write!(out, ",{}", opt(d.cv.get(a).copied().flatten()));
        }
        for a in 0..N_ACTIONS {
            let _ = write!(out, ",{}", opt(d.mean.get(a).copied().flatten()));
        }
        if let Some(q) = &d.q {
            for v in &q.values {
                if v.is_finite() {
                    let _ = write!(out, ",{v}");
                } else {
                    out.push(',');
                }
            }
        }
        for v in &r.obs {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{},{}", r.reward, r.termination.name());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_are_reproducible() {
        let a = build_test_suite(3, 100, None).unwrap();
        assert_eq!(a, build_test_suite(3, 100, None).unwrap());
        assert_eq!(a.seeds.len(), 100);
        assert_ne!(a.seeds, build_test_suite(4, 100, None).unwrap().seeds);
        assert!(build_test_suite(3, 10, Some(25.0)).is_err());
    }

    #[test]
    fn override_fixes_every_speed() {
        let suite = build_test_suite(3, 20, Some(20.0)).unwrap();
        let cfg = suite.env_config(&EnvConfig::default());
        for &s in &suite.seeds {
            let env = IntersectionEnv::new(cfg.clone(), s).unwrap();
            assert!(env.state.others.iter().all(|v| v.desired_speed == 20.0));
        }
    }

    #[test]
    fn percentiles_interpolate() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 99.0), 99.0);
        let w = [1.0, 2.0];
        assert_eq!(percentile(&w, 10.0), 1.1);
        assert_eq!(percentile(&[4.0], 99.0), 4.0);
    }

    #[test]
    fn always_give_way_times_out() {
        let suite = build_test_suite(11, 20, None).unwrap();
        let meta = RunMeta::new("test", 0);
        let r = run_evaluation(&Policy::Constant(Action::GiveWay), &suite, &EnvConfig::default(), &meta).unwrap();
        assert_eq!(r.timeout, 1.0);
        assert_eq!(r.collisions, 0);
        assert!(r.chosen_cv.is_none());
    }

    #[test]
    fn report_is_repeatable() {
        let suite = build_test_suite(5, 10, None).unwrap();
        let meta = RunMeta::new("test", 0);
        let p = Policy::Constant(Action::TakeWay);
        let a = run_evaluation(&p, &suite, &EnvConfig::default(), &meta).unwrap();
        let b = run_evaluation(&p, &suite, &EnvConfig::default(), &meta).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!((a.goal + a.collision + a.timeout - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trace_of_give_way_ends_by_timeout() {
        let t = trace_episode(&Policy::Constant(Action::GiveWay), &EnvConfig::default(), 7).unwrap();
        assert_eq!(t.outcome, Termination::Timeout);
        assert_eq!(t.rows.len(), 80);
        assert!(t.rows.windows(2).all(|w| w[0].time < w[1].time));
        let csv = trace_csv(&t, &RunMeta::new("h", 0));
        assert_eq!(csv.lines().count(), 2 + 1 + 80);
    }
}
