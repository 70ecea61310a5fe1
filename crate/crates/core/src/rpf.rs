//! Ensemble of randomized-prior Q-networks.
//!
//! Member `k` estimates `Q_k = f_k + beta * p_k`, where `f_k` is trained and
//! `p_k` is a randomly initialized network that is never updated. Each member
//! learns from its own bootstrapped view of the replay memory with a Double
//! DQN target, and training episodes follow one uniformly drawn member.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::ActionMask;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, CheckpointWriter};
use crate::nn::{self, Activations, Adam, AdamConfig, Arch, GradScratch, Network, RegressionBatch};
use crate::replay::BootstrapReplay;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpfConfig {
    pub members: usize,
    pub prior_scale: f64,
    pub p_add: f64,
    pub gamma: f64,
    pub n_start: u64,
    pub batch_size: usize,
    pub n_update: u64,
    pub replay_capacity: usize,
    pub huber_delta: f64,
    pub adam: AdamConfig,
}

impl Default for RpfConfig {
    fn default() -> Self {
        Self {
            members: 10,
            prior_scale: 1.0,
            p_add: 0.5,
            gamma: 0.99,
            n_start: 50_000,
            batch_size: 32,
            n_update: 20_000,
            replay_capacity: 500_000,
            huber_delta: 10.0,
            adam: AdamConfig::default(),
        }
    }
}

impl RpfConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.members == 0 || self.members > crate::replay::MAX_MEMBERS {
            return fail("members must lie in 1..=64");
        }
        if !(self.prior_scale >= 0.0) || !self.prior_scale.is_finite() {
            return fail("prior_scale must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.p_add) {
            return fail("p_add must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.n_update == 0 || self.replay_capacity == 0 {
            return fail("batch_size, n_update and replay_capacity must be positive");
        }
        if !(self.huber_delta > 0.0) || !(self.adam.lr > 0.0) {
            return fail("huber_delta and learning rate must be positive");
        }
        Ok(())
    }
}

/// `K x actions` Q-values; masked entries hold `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    pub members: usize,
    pub actions: usize,
    pub values: Vec<f32>,
    pub mask: ActionMask,
}

impl QMatrix {
    pub fn from_rows(rows: &[&[f32]], mask: ActionMask) -> Self {
        let actions = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * actions);
        for r in rows {
            assert_eq!(r.len(), actions, "ragged Q rows");
            values.extend(r.iter().enumerate().map(|(a, &v)| if mask.allows(a) { v } else { f32::NEG_INFINITY }));
        }
        Self {
            members: rows.len(),
            actions,
            values,
            mask,
        }
    }

    pub fn get(&self, k: usize, a: usize) -> f32 {
        self.values[k * self.actions + a]
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.values[k * self.actions..(k + 1) * self.actions]
    }
}

/// Trainable network, its frozen prior, the target copy and the optimizer state.
#[derive(Debug, Clone)]
pub struct Member {
    pub online: Network<f32>,
    pub prior: Network<f32>,
    pub target: Network<f32>,
    pub adam: Adam<f32>,
    scratch: UpdateScratch,
}

impl Member {
    pub fn new(arch: Arch, init_seed: u64, prior_seed: u64, adam: AdamConfig) -> Self {
        let online = Network::init(arch, init_seed);
        Self::from_parts(online.clone(), Network::init(arch, prior_seed), online, Adam::new(adam, arch.param_count()))
    }

    pub fn from_parts(online: Network<f32>, prior: Network<f32>, target: Network<f32>, adam: Adam<f32>) -> Self {
        let arch = *online.arch();
        Self {
            online,
            prior,
            target,
            adam,
            scratch: UpdateScratch::new(&arch),
        }
    }

    /// `f + beta * p` with the mask applied after the sum.
    pub fn q(&self, beta: f32, obs: &[f32], mask: ActionMask) -> Vec<f32> {
        let mut act = Activations::new(self.online.arch());
        let mut q = vec![0.0; self.online.arch().actions];
        member_q_into(&self.online, &self.prior, beta, obs, mask, &mut act, &mut q);
        q
    }

    pub fn sync_target(&mut self) {
        self.target.hard_update(&self.online);
    }
}

fn member_q_into(
    f: &Network<f32>,
    p: &Network<f32>,
    beta: f32,
    obs: &[f32],
    mask: ActionMask,
    act: &mut Activations<f32>,
    q: &mut [f32],
) {
    f.forward_into(obs, mask, act, q);
    if beta != 0.0 {
        let mut qp = vec![0.0; q.len()];
        p.forward_into(obs, mask, act, &mut qp);
        for (a, b) in q.iter_mut().zip(&qp) {
            *a += beta * b;
        }
    }
    nn::apply_mask(q, mask);
}

#[derive(Debug, Clone)]
struct UpdateScratch {
    grad: GradScratch<f32>,
    grads: Vec<f32>,
    act: Activations<f32>,
}

impl UpdateScratch {
    fn new(arch: &Arch) -> Self {
        Self {
            grad: GradScratch::new(arch),
            grads: vec![0.0; arch.param_count()],
            act: Activations::new(arch),
        }
    }
}

/// Borrowed mini-batch of transitions.
#[derive(Debug, Clone, Copy)]
pub struct TdBatch<'a> {
    pub xs: &'a [f32],
    pub masks: &'a [ActionMask],
    pub actions: &'a [u8],
    pub rewards: &'a [f32],
    pub next_xs: &'a [f32],
    pub next_masks: &'a [ActionMask],
    pub terminal: &'a [bool],
}

/// Double DQN targets `r + gamma * Q-(s', a*)` with `a* = argmax Q(s', .)`,
/// where `Q = online + beta * prior` selects and `Q- = target + beta * prior`
/// evaluates. Returns the targets and the selected `a*` (`None` on terminal
/// transitions, which do not bootstrap).
pub fn td_targets(
    online: &Network<f32>,
    target: &Network<f32>,
    prior: &Network<f32>,
    beta: f32,
    gamma: f32,
    batch: TdBatch<'_>,
) -> (Vec<f32>, Vec<Option<usize>>) {
    let arch = online.arch();
    let dim = arch.input_dim();
    let mut act = Activations::new(arch);
    let mut q_sel = vec![0.0; arch.actions];
    let mut q_prior = vec![0.0; arch.actions];
    let mut q_eval = vec![0.0; arch.actions];
    let mut targets = Vec::with_capacity(batch.rewards.len());
    let mut chosen = Vec::with_capacity(batch.rewards.len());
    for b in 0..batch.rewards.len() {
        if batch.terminal[b] {
            targets.push(batch.rewards[b]);
            chosen.push(None);
            continue;
        }
        let x = &batch.next_xs[b * dim..(b + 1) * dim];
        let mask = batch.next_masks[b];
        online.forward_into(x, mask, &mut act, &mut q_sel);
        if beta != 0.0 {
            prior.forward_into(x, mask, &mut act, &mut q_prior);
            for (q, p) in q_sel.iter_mut().zip(&q_prior) {
                *q += beta * p;
            }
        }
        let a_star = nn::masked_argmax(&q_sel, mask);
        let bootstrap = match a_star {
            Some(a) => {
                target.forward_into(x, mask, &mut act, &mut q_eval);
                if beta != 0.0 {
                    q_eval[a] + beta * q_prior[a]
                } else {
                    q_eval[a]
                }
            }
            None => 0.0,
        };
        targets.push(batch.rewards[b] + gamma * bootstrap);
        chosen.push(a_star);
    }
    (targets, chosen)
}

/// One gradient step of member `f` toward the Double DQN targets of `batch`.
/// The regression target of the trainable part is `y - beta * p(s, a)`.
pub fn td_step(
    member: &mut Member,
    beta: f32,
    gamma: f32,
    delta: f32,
    batch: TdBatch<'_>,
) -> Result<f32> {
    let (mut targets, _) = td_targets(&member.online, &member.target, &member.prior, beta, gamma, batch);
    let arch = *member.online.arch();
    let dim = arch.input_dim();
    if beta != 0.0 {
        let mut qp = vec![0.0; arch.actions];
        for (b, y) in targets.iter_mut().enumerate() {
            let x = &batch.xs[b * dim..(b + 1) * dim];
            member
                .prior
                .forward_into(x, batch.masks[b], &mut member.scratch.act, &mut qp);
            *y -= beta * qp[batch.actions[b] as usize];
        }
    }
    let s = &mut member.scratch;
    let loss = nn::gradients(
        &member.online,
        RegressionBatch {
            xs: batch.xs,
            masks: batch.masks,
            actions: batch.actions,
            targets: &targets,
        },
        delta,
        &mut s.grads,
        &mut s.grad,
    )?;
    member.adam.step(member.online.params_mut(), &s.grads);
    Ok(loss)
}

/// Samples a mini-batch from member `k`'s share of the replay memory and takes
/// one optimizer step. `Ok(None)` when the member holds too few experiences.
pub fn member_update<R: Rng + ?Sized>(
    member: &mut Member,
    k: usize,
    cfg: &RpfConfig,
    beta: f64,
    replay: &BootstrapReplay,
    rng: &mut R,
) -> Result<Option<f32>> {
    let Some(idx) = replay.sample_member(k, cfg.batch_size, rng) else {
        return Ok(None);
    };
    let n = idx.len();
    let dim = replay.obs_dim();
    let mut xs = Vec::with_capacity(n * dim);
    let mut next_xs = Vec::with_capacity(n * dim);
    let mut masks = Vec::with_capacity(n);
    let mut next_masks = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut terminal = Vec::with_capacity(n);
    for &i in &idx {
        let e = replay.get(i);
        xs.extend_from_slice(e.obs);
        next_xs.extend_from_slice(e.next_obs);
        masks.push(e.mask);
        next_masks.push(e.next_mask);
        actions.push(e.action);
        rewards.push(e.reward);
        terminal.push(e.terminal);
    }
    let batch = TdBatch {
        xs: &xs,
        masks: &masks,
        actions: &actions,
        rewards: &rewards,
        next_xs: &next_xs,
        next_masks: &next_masks,
        terminal: &terminal,
    };
    td_step(member, beta as f32, cfg.gamma as f32, cfg.huber_delta as f32, batch).map(Some)
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub cfg: RpfConfig,
    pub members: Vec<Member>,
}

impl Ensemble {
    /// Member `k` draws its trainable weights from the `init` stream and its
    /// prior from the `prior` stream of `master`.
    pub fn new(arch: Arch, cfg: RpfConfig, master: u64) -> Result<Self> {
        cfg.validate()?;
        arch.validate()?;
        let members = (0..cfg.members)
            .map(|k| {
                Member::new(
                    arch,
                    seed::derive(master, seed::INIT, k as u64),
                    seed::derive(master, seed::PRIOR, k as u64),
                    cfg.adam,
                )
            })
            .collect();
        Ok(Self { cfg, members })
    }

    pub fn arch(&self) -> &Arch {
        self.members[0].online.arch()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn beta(&self) -> f32 {
        self.cfg.prior_scale as f32
    }

    pub fn member_q(&self, k: usize, obs: &[f32], mask: ActionMask) -> Vec<f32> {
        self.members[k].q(self.beta(), obs, mask)
    }

    pub fn ensemble_q(&self, obs: &[f32], mask: ActionMask) -> QMatrix {
        let actions = self.arch().actions;
        let mut values = Vec::with_capacity(self.len() * actions);
        let mut act = Activations::new(self.arch());
        let mut q = vec![0.0; actions];
        for m in &self.members {
            member_q_into(&m.online, &m.prior, self.beta(), obs, mask, &mut act, &mut q);
            values.extend_from_slice(&q);
        }
        QMatrix {
            members: self.len(),
            actions,
            values,
            mask,
        }
    }

    /// Member followed during one training episode.
    pub fn begin_episode<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.gen_range(0..self.len())
    }

    /// Greedy action of member `nu`, lowest index on ties.
    pub fn act_training(&self, obs: &[f32], mask: ActionMask, nu: usize) -> usize {
        let q = self.member_q(nu, obs, mask);
        nn::masked_argmax(&q, mask).expect("at least one allowed action")
    }

    /// Argmax of the member mean, without any confidence restriction.
    pub fn act_mean(&self, obs: &[f32], mask: ActionMask) -> usize {
        let q = self.ensemble_q(obs, mask);
        crate::gate::argmax_some(&crate::gate::mean_per_action(&q)).expect("at least one allowed action")
    }

    /// One update of every member; member `k` samples with the stream
    /// `minibatch/(step, k)`. Members run in parallel and are independent.
    pub fn update_all(&mut self, replay: &BootstrapReplay, master: u64, step: u64) -> Result<Vec<Option<f32>>> {
        let cfg = self.cfg;
        self.members
            .par_iter_mut()
            .enumerate()
            .map(|(k, m)| {
                let mut rng = seed::rng(master, seed::MINIBATCH, minibatch_index(step, k));
                member_update(m, k, &cfg, cfg.prior_scale, replay, &mut rng)
            })
            .collect()
    }

    pub fn sync_targets(&mut self) {
        for m in &mut self.members {
            m.sync_target();
        }
    }

    pub fn write(&self, w: &mut CheckpointWriter, with_training_state: bool) {
        for (k, m) in self.members.iter().enumerate() {
            w.network(&format!("member{k}/online/"), &m.online);
            w.network(&format!("member{k}/prior/"), &m.prior);
            if with_training_state {
                write_training_state(w, &format!("member{k}/"), m);
            }
        }
    }

    pub fn read(ck: &Checkpoint, arch: Arch, cfg: RpfConfig, with_training_state: bool) -> Result<Self> {
        cfg.validate()?;
        let mut members = Vec::with_capacity(cfg.members);
        for k in 0..cfg.members {
            let online = ck.network(&format!("member{k}/online/"), arch)?;
            let prior = ck.network(&format!("member{k}/prior/"), arch)?;
            members.push(read_member(ck, &format!("member{k}/"), online, prior, cfg.adam, with_training_state)?);
        }
        if ck.has(&format!("member{}/online/adv.b", cfg.members)) {
            return Err(Error::Incompatible(format!(
                "checkpoint holds more than {} members",
                cfg.members
            )));
        }
        Ok(Self { cfg, members })
    }
}

/// Index of the minibatch stream for member `k` at decision step `step`.
pub fn minibatch_index(step: u64, k: usize) -> u64 {
    step.wrapping_mul(crate::replay::MAX_MEMBERS as u64) + k as u64
}

pub(crate) fn write_training_state(w: &mut CheckpointWriter, prefix: &str, m: &Member) {
    w.network(&format!("{prefix}target/"), &m.target);
    let n = m.adam.m.len();
    w.f32(&format!("{prefix}adam.m"), &[n], &m.adam.m);
    w.f32(&format!("{prefix}adam.v"), &[n], &m.adam.v);
    w.bytes(&format!("{prefix}adam.t"), &m.adam.t.to_le_bytes());
}

pub(crate) fn read_member(
    ck: &Checkpoint,
    prefix: &str,
    online: Network<f32>,
    prior: Network<f32>,
    adam_cfg: AdamConfig,
    with_training_state: bool,
) -> Result<Member> {
    let arch = *online.arch();
    let n = arch.param_count();
    if !with_training_state {
        let target = online.clone();
        return Ok(Member::from_parts(online, prior, target, Adam::new(adam_cfg, n)));
    }
    let target = ck.network(&format!("{prefix}target/"), arch)?;
    let mut adam = Adam::new(adam_cfg, n);
    adam.m = ck.f32(&format!("{prefix}adam.m"), &[n])?;
    adam.v = ck.f32(&format!("{prefix}adam.v"), &[n])?;
    let t = ck.bytes(&format!("{prefix}adam.t"))?;
    adam.t = u64::from_le_bytes(
        t.try_into()
            .map_err(|_| Error::MalformedCheckpoint("adam step counter".into()))?,
    );
    Ok(Member::from_parts(online, prior, target, adam))
}
