#![allow(dead_code)]

use rand::Rng;
use rpf_core::env::{ActionMask, EnvStep, Environment, Termination};
use rpf_core::nn::Arch;
use rpf_core::Result;

/// Small architecture with random widths.
pub fn random_arch<R: Rng>(rng: &mut R) -> Arch {
    let slots = rng.gen_range(0..=3);
    Arch {
        ego_inputs: rng.gen_range(1..=4),
        slot_inputs: if slots > 0 { rng.gen_range(1..=4) } else { 0 },
        slots,
        conv1: if slots > 0 { rng.gen_range(1..=5) } else { 0 },
        conv2: if slots > 0 { rng.gen_range(1..=4) } else { 0 },
        ego_units: rng.gen_range(1..=5),
        joint_units: rng.gen_range(1..=6),
        actions: rng.gen_range(1..=6),
    }
}

fn take<'a>(p: &'a [f64], off: &mut usize, n: usize) -> &'a [f64] {
    let s = &p[*off..*off + n];
    *off += n;
    s
}

/// Plain matrix-vector layer, `w` laid out `[input][output]`.
fn layer(w: &[f64], b: &[f64], x: &[f64], relu: bool) -> Vec<f64> {
    (0..b.len())
        .map(|j| {
            let z = b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * b.len() + j]).sum::<f64>();
            if relu {
                z.max(0.0)
            } else {
                z
            }
        })
        .collect()
}

/// Reference dueling forward pass written from the layer description alone.
/// Masked actions get `None`.
pub fn oracle_q(arch: &Arch, params: &[f64], x: &[f64], mask: ActionMask) -> Vec<Option<f64>> {
    let mut o = 0;
    let c1w = take(params, &mut o, arch.slot_inputs * arch.conv1);
    let c1b = take(params, &mut o, arch.conv1);
    let c2w = take(params, &mut o, arch.conv1 * arch.conv2);
    let c2b = take(params, &mut o, arch.conv2);
    let ew = take(params, &mut o, arch.ego_inputs * arch.ego_units);
    let eb = take(params, &mut o, arch.ego_units);
    let ji = arch.ego_units + arch.slots * arch.conv2;
    let jw = take(params, &mut o, ji * arch.joint_units);
    let jb = take(params, &mut o, arch.joint_units);
    let vw = take(params, &mut o, arch.joint_units);
    let vb = take(params, &mut o, 1);
    let aw = take(params, &mut o, arch.joint_units * arch.actions);
    let ab = take(params, &mut o, arch.actions);
    assert_eq!(o, params.len());

    let mut joint = layer(ew, eb, &x[..arch.ego_inputs], true);
    for s in 0..arch.slots {
        let start = arch.ego_inputs + s * arch.slot_inputs;
        let h1 = layer(c1w, c1b, &x[start..start + arch.slot_inputs], true);
        joint.extend(layer(c2w, c2b, &h1, true));
    }
    let h = layer(jw, jb, &joint, true);
    let v = layer(vw, vb, &h, false)[0];
    let adv = layer(aw, ab, &h, false);
    let allowed: Vec<usize> = (0..arch.actions).filter(|&a| mask.allows(a)).collect();
    let mean = allowed.iter().map(|&a| adv[a]).sum::<f64>() / allowed.len().max(1) as f64;
    (0..arch.actions)
        .map(|a| mask.allows(a).then(|| v + adv[a] - mean))
        .collect()
}

pub fn oracle_huber(e: f64, delta: f64) -> f64 {
    if e.abs() <= delta {
        0.5 * e * e
    } else {
        delta * (e.abs() - 0.5 * delta)
    }
}

/// Mean Huber loss of `Q(x_b, a_b) - y_b` computed with the reference forward pass.
pub fn oracle_loss(
    arch: &Arch,
    params: &[f64],
    xs: &[f64],
    masks: &[ActionMask],
    actions: &[u8],
    targets: &[f64],
    delta: f64,
) -> f64 {
    let dim = arch.ego_inputs + arch.slots * arch.slot_inputs;
    let n = masks.len();
    (0..n)
        .map(|b| {
            let q = oracle_q(arch, params, &xs[b * dim..(b + 1) * dim], masks[b]);
            oracle_huber(q[actions[b] as usize].unwrap() - targets[b], delta)
        })
        .sum::<f64>()
        / n as f64
}

/// Random mask with at least one allowed action.
pub fn random_mask<R: Rng>(rng: &mut R, actions: usize) -> ActionMask {
    loop {
        let m = ActionMask(rng.gen::<u8>() & ((1u16 << actions) - 1) as u8);
        if m.count() > 0 {
            return m;
        }
    }
}

pub const CHAIN_LEN: usize = 10;
pub const CHAIN_START: usize = 1;
pub const CHAIN_HORIZON: u32 = 30;
pub const CHAIN_STEP_COST: f32 = -0.01;
pub const CHAIN_LEFT_REWARD: f32 = 0.1;
pub const CHAIN_RIGHT_REWARD: f32 = 1.0;

/// Deterministic chain of ten states. Action 0 moves left, action 1 right.
/// Leaving through the left end pays a small terminal reward, reaching the
/// right end pays the large one; every other move costs a little.
#[derive(Debug, Clone, Default)]
pub struct Chain {
    pub pos: usize,
    pub t: u32,
}

/// Where a move leads: next state, reward and whether the episode ended.
pub fn chain_transition(pos: usize, action: usize) -> (Option<usize>, f32) {
    if action == 0 {
        if pos == 0 {
            (None, CHAIN_LEFT_REWARD)
        } else {
            (Some(pos - 1), CHAIN_STEP_COST)
        }
    } else if pos + 1 >= CHAIN_LEN - 1 {
        (None, CHAIN_RIGHT_REWARD)
    } else {
        (Some(pos + 1), CHAIN_STEP_COST)
    }
}

pub fn one_hot(pos: usize) -> Vec<f32> {
    let mut o = vec![0.0; CHAIN_LEN];
    o[pos] = 1.0;
    o
}

impl Environment for Chain {
    fn obs_dim(&self) -> usize {
        CHAIN_LEN
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn reset(&mut self, _seed: u64) -> Result<(Vec<f32>, ActionMask)> {
        self.pos = CHAIN_START;
        self.t = 0;
        Ok((one_hot(self.pos), ActionMask::all(2)))
    }
    fn step(&mut self, action: usize) -> Result<EnvStep> {
        self.t += 1;
        let (next, reward) = chain_transition(self.pos, action);
        let termination = match next {
            None if reward > CHAIN_LEFT_REWARD => Termination::Goal,
            None => Termination::Collision,
            Some(p) => {
                self.pos = p;
                if self.t >= CHAIN_HORIZON {
                    Termination::Timeout
                } else {
                    Termination::None
                }
            }
        };
        Ok(EnvStep {
            obs: one_hot(self.pos),
            mask: ActionMask::all(2),
            reward,
            termination,
        })
    }
}

/// Discounted optimal values by value iteration (horizon ignored).
pub fn chain_values(gamma: f64) -> Vec<f64> {
    let mut v = vec![0.0; CHAIN_LEN];
    for _ in 0..10_000 {
        let next: Vec<f64> = (0..CHAIN_LEN)
            .map(|s| {
                (0..2)
                    .map(|a| {
                        let (n, r) = chain_transition(s, a);
                        r as f64 + n.map_or(0.0, |n| gamma * v[n])
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if diff < 1e-12 {
            break;
        }
    }
    v
}

pub fn chain_greedy(values: &[f64], gamma: f64, pos: usize) -> usize {
    let q = |a: usize| {
        let (n, r) = chain_transition(pos, a);
        r as f64 + n.map_or(0.0, |n| gamma * values[n])
    };
    if q(1) > q(0) {
        1
    } else {
        0
    }
}

/// Undiscounted return of a policy from the start state within the horizon.
pub fn chain_rollout(mut policy: impl FnMut(usize) -> usize) -> f64 {
    let mut env = Chain::default();
    env.reset(0).unwrap();
    let mut ret = 0.0;
    loop {
        let a = policy(env.pos);
        let out = env.step(a).unwrap();
        ret += out.reward as f64;
        if out.termination.is_done() {
            return ret;
        }
    }
}

/// Below this magnitude a central difference with `h = 1e-6` only sees
/// roundoff of the loss (one ulp of a unit loss is ~1e-10 after division by 2h).
pub const GRAD_FLOOR: f64 = 1e-5;

/// Largest relative difference between analytic gradients and central finite
/// differences of the reference loss, for one random network and batch.
/// Relative error is `|g - fd| / max(|g|, |fd|, GRAD_FLOOR)`.
pub fn gradient_check_case(seed: u64) -> f64 {
    use rand::SeedableRng;
    use rpf_core::nn::{gradients, GradScratch, Network, RegressionBatch};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let arch = random_arch(&mut rng);
    let net = Network::<f64>::init(arch, rng.gen());
    let n = rng.gen_range(1..=6);
    let dim = arch.input_dim();
    let xs: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let masks: Vec<ActionMask> = (0..n).map(|_| random_mask(&mut rng, arch.actions)).collect();
    let actions: Vec<u8> = masks
        .iter()
        .map(|m| {
            let allowed: Vec<usize> = m.allowed(arch.actions).collect();
            allowed[rng.gen_range(0..allowed.len())] as u8
        })
        .collect();
    let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let delta = 1.0;

    let mut grads = vec![0.0; net.params().len()];
    let mut scratch = GradScratch::new(&arch);
    let batch = RegressionBatch {
        xs: &xs,
        masks: &masks,
        actions: &actions,
        targets: &targets,
    };
    let loss = gradients(&net, batch, delta, &mut grads, &mut scratch).unwrap();
    let base = oracle_loss(&arch, net.params(), &xs, &masks, &actions, &targets, delta);
    assert!((loss - base).abs() <= 1e-12 * base.abs().max(1.0), "loss {loss} vs {base}");

    let h = 1e-6;
    let mut p = net.params().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let keep = p[i];
        p[i] = keep + h;
        let up = oracle_loss(&arch, &p, &xs, &masks, &actions, &targets, delta);
        p[i] = keep - h;
        let down = oracle_loss(&arch, &p, &xs, &masks, &actions, &targets, delta);
        p[i] = keep;
        let fd = (up - down) / (2.0 * h);
        let rel = (grads[i] - fd).abs() / grads[i].abs().max(fd.abs()).max(GRAD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

pub fn chain_arch() -> Arch {
    Arch {
        ego_inputs: CHAIN_LEN,
        slot_inputs: 0,
        slots: 0,
        conv1: 0,
        conv2: 0,
        ego_units: 16,
        joint_units: 16,
        actions: 2,
    }
}

pub fn chain_rpf_config() -> rpf_core::rpf::RpfConfig {
    rpf_core::rpf::RpfConfig {
        members: 5,
        n_start: 1_000,
        n_update: 500,
        batch_size: 32,
        replay_capacity: 50_000,
        ..rpf_core::rpf::RpfConfig::default()
    }
}

/// Trains an ensemble on the chain and returns the greedy (member-mean)
/// return after `steps` decisions.
pub fn train_chain(master: u64, steps: u64) -> f64 {
    use rpf_core::dqn::EpsilonSchedule;
    use rpf_core::train::{Learner, Trainer};
    let learner = Learner::new(
        rpf_core::config::AgentKind::Rpf,
        chain_arch(),
        chain_rpf_config(),
        EpsilonSchedule::default(),
        master,
    )
    .unwrap();
    let mut t = Trainer::new(Chain::default(), learner, master).unwrap();
    for _ in 0..steps {
        t.step().unwrap();
    }
    let rpf_core::train::Learner::Rpf(e) = &t.learner else {
        unreachable!()
    };
    chain_rollout(|pos| e.act_mean(&one_hot(pos), ActionMask::all(2)))
}

pub fn chain_optimal_return(gamma: f64) -> f64 {
    let v = chain_values(gamma);
    chain_rollout(|pos| chain_greedy(&v, gamma, pos))
}
