//! Dueling Q-network with a shared per-vehicle encoder.
//!
//! Each vehicle slot passes through two dense layers whose weights are shared
//! across slots (a one-dimensional convolution with size and stride equal to
//! the slot width). The ego features pass through their own dense layer; both
//! branches are concatenated into a joint layer, which feeds a state-value head
//! and an advantage head. All hidden layers use ReLU.
//!
//! Parameters live in one flat vector so that optimizers, target copies,
//! hashing and checkpoints can treat a network as a single tensor list.

mod adam;
pub mod checkpoint;

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{Adam, AdamConfig};

use crate::env::ActionMask;
use crate::error::{Error, Result};

pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn to_le_bytes_vec(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Layer widths. [`Arch::intersection`] is the production architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub ego_inputs: usize,
    pub slot_inputs: usize,
    pub slots: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub ego_units: usize,
    pub joint_units: usize,
    pub actions: usize,
}

impl Arch {
    pub const fn intersection() -> Self {
        Self {
            ego_inputs: 3,
            slot_inputs: 6,
            slots: 4,
            conv1: 32,
            conv2: 16,
            ego_units: 16,
            joint_units: 64,
            actions: 6,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.ego_inputs + self.slots * self.slot_inputs
    }

    pub fn joint_inputs(&self) -> usize {
        self.ego_units + self.slots * self.conv2
    }

    pub fn tensors(&self) -> Vec<TensorSpec> {
        let shapes: [(&'static str, usize, usize); 12] = [
            ("conv1.w", self.slot_inputs, self.conv1),
            ("conv1.b", 1, self.conv1),
            ("conv2.w", self.conv1, self.conv2),
            ("conv2.b", 1, self.conv2),
            ("ego.w", self.ego_inputs, self.ego_units),
            ("ego.b", 1, self.ego_units),
            ("joint.w", self.joint_inputs(), self.joint_units),
            ("joint.b", 1, self.joint_units),
            ("value.w", self.joint_units, 1),
            ("value.b", 1, 1),
            ("adv.w", self.joint_units, self.actions),
            ("adv.b", 1, self.actions),
        ];
        let mut offset = 0;
        shapes
            .iter()
            .map(|&(name, rows, cols)| {
                let spec = TensorSpec {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += rows * cols;
                spec
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(TensorSpec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions == 0 || self.actions > 8 || self.joint_units == 0 {
            return Err(Error::InvalidConfig(format!("unsupported architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".b")
    }

    pub fn shape(&self) -> Vec<usize> {
        if self.is_bias() {
            vec![self.cols]
        } else {
            vec![self.rows, self.cols]
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    c1w: usize,
    c1b: usize,
    c2w: usize,
    c2b: usize,
    ew: usize,
    eb: usize,
    jw: usize,
    jb: usize,
    vw: usize,
    vb: usize,
    aw: usize,
    ab: usize,
}

impl Offsets {
    fn of(arch: &Arch) -> Self {
        let t = arch.tensors();
        Self {
            c1w: t[0].offset,
            c1b: t[1].offset,
            c2w: t[2].offset,
            c2b: t[3].offset,
            ew: t[4].offset,
            eb: t[5].offset,
            jw: t[6].offset,
            jb: t[7].offset,
            vw: t[8].offset,
            vb: t[9].offset,
            aw: t[10].offset,
            ab: t[11].offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<F> {
    arch: Arch,
    params: Vec<F>,
    off: OffsetsEq,
}

// Offsets are derived from `arch`; equality only needs to look at the arch.
#[derive(Clone, Copy, Debug)]
struct OffsetsEq(Offsets);

impl PartialEq for OffsetsEq {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Bound of the fan-in scaled uniform initialization of a tensor.
pub fn init_bound(spec: &TensorSpec, arch: &Arch) -> f64 {
    let fan_in = match spec.name {
        "conv1.w" | "conv1.b" => arch.slot_inputs,
        "conv2.w" | "conv2.b" => arch.conv1,
        "ego.w" | "ego.b" => arch.ego_inputs,
        "joint.w" | "joint.b" => arch.joint_inputs(),
        _ => arch.joint_units,
    };
    if fan_in == 0 {
        0.0
    } else {
        1.0 / (fan_in as f64).sqrt()
    }
}

impl<F: Scalar> Network<F> {
    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            params: vec![F::zero(); arch.param_count()],
            off: OffsetsEq(Offsets::of(&arch)),
        }
    }

    /// Every weight and bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut net = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in arch.tensors() {
            let bound = init_bound(&spec, &arch);
            for p in &mut net.params[spec.range()] {
                let u: f64 = rng.gen();
                *p = F::of((2.0 * u - 1.0) * bound);
            }
        }
        net
    }

    pub fn from_params(arch: Arch, params: Vec<F>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                name: "params".into(),
                expected: vec![arch.param_count()],
                found: vec![params.len()],
            });
        }
        Ok(Self {
            arch,
            params,
            off: OffsetsEq(Offsets::of(&arch)),
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.arch
            .tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let spec = self.arch.tensors().into_iter().find(|t| t.name == name)?;
        Some(&mut self.params[spec.range()])
    }

    /// Target network refresh: `self` becomes an exact copy of `online`.
    pub fn hard_update(&mut self, online: &Network<F>) {
        debug_assert_eq!(self.arch, online.arch);
        self.params.copy_from_slice(&online.params);
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            arch: self.arch,
            params: self.params.iter().map(|p| G::of(p.as_f64())).collect(),
            off: self.off,
        }
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            p.to_le_bytes_vec(&mut bytes);
        }
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Q-values of one state; masked actions get `-inf`.
    pub fn forward(&self, x: &[F], mask: ActionMask) -> Vec<F> {
        let mut q = vec![F::zero(); self.arch.actions];
        let mut scratch = Activations::new(&self.arch);
        self.forward_into(x, mask, &mut scratch, &mut q);
        apply_mask(&mut q, mask);
        q
    }

    /// Dueling Q-values of one state with masked entries left at zero.
    pub fn forward_into(&self, x: &[F], mask: ActionMask, act: &mut Activations<F>, q: &mut [F]) {
        let a = &self.arch;
        let o = &self.off.0;
        let p = &self.params;
        debug_assert_eq!(x.len(), a.input_dim());

        let (ego_x, slots_x) = x.split_at(a.ego_inputs);
        let (he, h2_all) = act.joint_in.split_at_mut(a.ego_units);
        dense(&p[o.ew..o.eb], &p[o.eb..o.eb + a.ego_units], ego_x, he);
        relu(he);
        for s in 0..a.slots {
            let xs = &slots_x[s * a.slot_inputs..(s + 1) * a.slot_inputs];
            let h1 = &mut act.h1[s * a.conv1..(s + 1) * a.conv1];
            dense(&p[o.c1w..o.c1b], &p[o.c1b..o.c1b + a.conv1], xs, h1);
            relu(h1);
            let h2 = &mut h2_all[s * a.conv2..(s + 1) * a.conv2];
            dense(&p[o.c2w..o.c2b], &p[o.c2b..o.c2b + a.conv2], h1, h2);
            relu(h2);
        }
        dense(&p[o.jw..o.jb], &p[o.jb..o.jb + a.joint_units], &act.joint_in, &mut act.hj);
        relu(&mut act.hj);
        let mut value = [F::zero()];
        dense(&p[o.vw..o.vb], &p[o.vb..o.vb + 1], &act.hj, &mut value);
        dense(&p[o.aw..o.ab], &p[o.ab..o.ab + a.actions], &act.hj, &mut act.adv);
        act.value = value[0];
        dueling(act.value, &act.adv, mask, q);
    }

    /// Batched forward. `q` receives `B x actions` values with masked entries
    /// at zero. When a tape is given it records what backpropagation needs.
    pub fn forward_batch(
        &self,
        xs: &[F],
        masks: &[ActionMask],
        q: &mut [F],
        mut tape: Option<&mut Tape<F>>,
        scratch: &mut Activations<F>,
    ) {
        let a = &self.arch;
        let dim = a.input_dim();
        let batch = masks.len();
        debug_assert_eq!(xs.len(), batch * dim);
        if let Some(t) = tape.as_deref_mut() {
            t.reset(a, batch);
            t.x.extend_from_slice(xs);
            t.masks.extend_from_slice(masks);
        }
        for b in 0..batch {
            let x = &xs[b * dim..(b + 1) * dim];
            let qb = &mut q[b * a.actions..(b + 1) * a.actions];
            self.forward_into(x, masks[b], scratch, qb);
            if let Some(t) = tape.as_deref_mut() {
                t.h1.extend_from_slice(&scratch.h1);
                t.joint_in.extend_from_slice(&scratch.joint_in);
                t.hj.extend_from_slice(&scratch.hj);
            }
        }
    }

    /// Accumulates into `grads` the gradient of `sum_b <dq_b, Q(x_b)>` with
    /// respect to the parameters. `dq` is `B x actions`; entries of masked
    /// actions are ignored. The tape is consumed.
    pub fn backward(&self, tape: &mut Tape<F>, dq: &[F], grads: &mut [F]) -> Result<()> {
        if !tape.armed {
            return Err(Error::MalformedCheckpoint("forward tape already consumed".into()));
        }
        tape.armed = false;
        let a = &self.arch;
        let o = &self.off.0;
        let p = &self.params;
        let dim = a.input_dim();
        let ji = a.joint_inputs();
        debug_assert_eq!(grads.len(), p.len());

        let mut d_adv = vec![F::zero(); a.actions];
        let mut d_hj = vec![F::zero(); a.joint_units];
        let mut d_joint_in = vec![F::zero(); ji];
        let mut d_h1 = vec![F::zero(); a.conv1];

        for b in 0..tape.batch {
            let mask = tape.masks[b];
            let dqb = &dq[b * a.actions..(b + 1) * a.actions];
            let n = mask.count();
            if n == 0 {
                continue;
            }
            let mut total = F::zero();
            for (act, &g) in dqb.iter().enumerate() {
                if mask.allows(act) {
                    total += g;
                }
            }
            let mean = total / F::of(n as f64);
            for act in 0..a.actions {
                d_adv[act] = if mask.allows(act) { dqb[act] - mean } else { F::zero() };
            }
            let d_value = [total];
            if total == F::zero() && d_adv.iter().all(|g| *g == F::zero()) {
                continue;
            }

            let x = &tape.x[b * dim..(b + 1) * dim];
            let h1_all = &tape.h1[b * a.slots * a.conv1..(b + 1) * a.slots * a.conv1];
            let joint_in = &tape.joint_in[b * ji..(b + 1) * ji];
            let hj = &tape.hj[b * a.joint_units..(b + 1) * a.joint_units];

            // Heads.
            {
                let (gv, gvb) = split_wb(grads, o.vw, o.vb, 1);
                dense_backward_params(hj, &d_value, gv, gvb);
                let (ga, gab) = split_wb(grads, o.aw, o.ab, a.actions);
                dense_backward_params(hj, &d_adv, ga, gab);
            }
            for (j, dh) in d_hj.iter_mut().enumerate() {
                let g = p[o.vw + j] * total + dot(&p[o.aw + j * a.actions..o.aw + (j + 1) * a.actions], &d_adv);
                *dh = if hj[j] > F::zero() { g } else { F::zero() };
            }

            // Joint layer.
            {
                let (gw, gb) = split_wb(grads, o.jw, o.jb, a.joint_units);
                dense_backward_params(joint_in, &d_hj, gw, gb);
            }
            for (i, d) in d_joint_in.iter_mut().enumerate() {
                *d = if joint_in[i] > F::zero() {
                    dot(&p[o.jw + i * a.joint_units..o.jw + (i + 1) * a.joint_units], &d_hj)
                } else {
                    F::zero()
                };
            }

            // Ego branch.
            {
                let (gw, gb) = split_wb(grads, o.ew, o.eb, a.ego_units);
                dense_backward_params(&x[..a.ego_inputs], &d_joint_in[..a.ego_units], gw, gb);
            }

            // Shared slot encoder: contributions of all slots add up.
            for s in 0..a.slots {
                let d_h2 = &d_joint_in[a.ego_units + s * a.conv2..a.ego_units + (s + 1) * a.conv2];
                if d_h2.iter().all(|g| *g == F::zero()) {
                    continue;
                }
                let h1 = &h1_all[s * a.conv1..(s + 1) * a.conv1];
                {
                    let (gw, gb) = split_wb(grads, o.c2w, o.c2b, a.conv2);
                    dense_backward_params(h1, d_h2, gw, gb);
                }
                for (i, d) in d_h1.iter_mut().enumerate() {
                    *d = if h1[i] > F::zero() {
                        dot(&p[o.c2w + i * a.conv2..o.c2w + (i + 1) * a.conv2], d_h2)
                    } else {
                        F::zero()
                    };
                }
                let xs = &x[a.ego_inputs + s * a.slot_inputs..a.ego_inputs + (s + 1) * a.slot_inputs];
                let (gw, gb) = split_wb(grads, o.c1w, o.c1b, a.conv1);
                dense_backward_params(xs, &d_h1, gw, gb);
            }
        }
        Ok(())
    }
}

fn split_wb<F>(grads: &mut [F], w: usize, b: usize, cols: usize) -> (&mut [F], &mut [F]) {
    let (head, tail) = grads.split_at_mut(b);
    (&mut head[w..], &mut tail[..cols])
}

/// Per-sample intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations<F> {
    h1: Vec<F>,
    joint_in: Vec<F>,
    hj: Vec<F>,
    adv: Vec<F>,
    value: F,
}

impl<F: Scalar> Activations<F> {
    pub fn new(arch: &Arch) -> Self {
        Self {
            h1: vec![F::zero(); arch.slots * arch.conv1],
            joint_in: vec![F::zero(); arch.joint_inputs()],
            hj: vec![F::zero(); arch.joint_units],
            adv: vec![F::zero(); arch.actions],
            value: F::zero(),
        }
    }

    pub fn value(&self) -> F {
        self.value
    }

    pub fn advantages(&self) -> &[F] {
        &self.adv
    }
}

/// Cached activations of one batched forward pass, consumed by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    batch: usize,
    x: Vec<F>,
    masks: Vec<ActionMask>,
    h1: Vec<F>,
    joint_in: Vec<F>,
    hj: Vec<F>,
    armed: bool,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            batch: 0,
            x: Vec::new(),
            masks: Vec::new(),
            h1: Vec::new(),
            joint_in: Vec::new(),
            hj: Vec::new(),
            armed: false,
        }
    }

    fn reset(&mut self, _arch: &Arch, batch: usize) {
        self.batch = batch;
        self.x.clear();
        self.masks.clear();
        self.h1.clear();
        self.joint_in.clear();
        self.hj.clear();
        self.armed = true;
    }

    pub fn is_armed(&self) -> bool {
        self.armed
    }
}

/// `Q = V + A - mean(A over allowed actions)`; masked entries set to zero.
pub fn dueling<F: Scalar>(value: F, adv: &[F], mask: ActionMask, q: &mut [F]) {
    let n = mask.count();
    let mut sum = F::zero();
    for (a, &v) in adv.iter().enumerate() {
        if mask.allows(a) {
            sum += v;
        }
    }
    let mean = if n > 0 { sum / F::of(n as f64) } else { F::zero() };
    for (a, qa) in q.iter_mut().enumerate() {
        *qa = if mask.allows(a) { value + adv[a] - mean } else { F::zero() };
    }
}

/// Replace masked entries by the `-inf` sentinel.
pub fn apply_mask<F: Scalar>(q: &mut [F], mask: ActionMask) {
    for (a, qa) in q.iter_mut().enumerate() {
        if !mask.allows(a) {
            *qa = F::neg_infinity();
        }
    }
}

/// Lowest-index argmax over allowed actions.
pub fn masked_argmax<F: Scalar>(q: &[F], mask: ActionMask) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for (a, &v) in q.iter().enumerate() {
        if mask.allows(a) && best.map_or(true, |(_, b)| v > b) {
            best = Some((a, v));
        }
    }
    best.map(|(a, _)| a)
}

#[inline]
fn relu<F: Scalar>(h: &mut [F]) {
    for v in h {
        if !(*v > F::zero()) {
            *v = F::zero();
        }
    }
}

/// `out = b + x W` with `W` stored input-major (`x.len()` rows of `out.len()`).
#[inline]
fn dense<F: Scalar>(w: &[F], b: &[F], x: &[F], out: &mut [F]) {
    let n = out.len();
    out.copy_from_slice(b);
    for (i, &xi) in x.iter().enumerate() {
        if xi != F::zero() {
            axpy(xi, &w[i * n..(i + 1) * n], out);
        }
    }
}

#[inline]
fn dense_backward_params<F: Scalar>(x: &[F], dz: &[F], gw: &mut [F], gb: &mut [F]) {
    let n = dz.len();
    for (g, &d) in gb.iter_mut().zip(dz) {
        *g += d;
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi != F::zero() {
            axpy(xi, dz, &mut gw[i * n..(i + 1) * n]);
        }
    }
}

#[inline(always)]
fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dot product with a fixed eight-lane accumulation order.
#[inline(always)]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn huber<F: Scalar>(err: F, delta: F) -> F {
    let abs = err.abs();
    if abs <= delta {
        F::of(0.5) * err * err
    } else {
        delta * (abs - F::of(0.5) * delta)
    }
}

pub fn huber_grad<F: Scalar>(err: F, delta: F) -> F {
    err.max(-delta).min(delta)
}

/// One regression batch: inputs, masks, the action whose value is regressed and its target.
#[derive(Debug, Clone, Copy)]
pub struct RegressionBatch<'a, F> {
    pub xs: &'a [F],
    pub masks: &'a [ActionMask],
    pub actions: &'a [u8],
    pub targets: &'a [F],
}

/// Reusable buffers for [`gradients`].
#[derive(Debug, Clone)]
pub struct GradScratch<F> {
    pub tape: Tape<F>,
    pub act: Activations<F>,
    pub q: Vec<F>,
    pub dq: Vec<F>,
}

impl<F: Scalar> GradScratch<F> {
    pub fn new(arch: &Arch) -> Self {
        Self {
            tape: Tape::new(),
            act: Activations::new(arch),
            q: Vec::new(),
            dq: Vec::new(),
        }
    }
}

/// Gradient of the mean Huber loss of `Q(x_b, a_b) - target_b` over the batch.
/// Returns the loss; `grads` is overwritten.
pub fn gradients<F: Scalar>(
    net: &Network<F>,
    batch: RegressionBatch<'_, F>,
    delta: F,
    grads: &mut [F],
    scratch: &mut GradScratch<F>,
) -> Result<F> {
    let n = batch.masks.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if !batch.xs.iter().chain(batch.targets).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("gradient batch"));
    }
    let acts = net.arch.actions;
    scratch.q.clear();
    scratch.q.resize(n * acts, F::zero());
    scratch.dq.clear();
    scratch.dq.resize(n * acts, F::zero());
    net.forward_batch(batch.xs, batch.masks, &mut scratch.q, Some(&mut scratch.tape), &mut scratch.act);

    let scale = F::one() / F::of(n as f64);
    let mut loss = F::zero();
    for b in 0..n {
        let a = batch.actions[b] as usize;
        if !batch.masks[b].allows(a) {
            continue;
        }
        let err = scratch.q[b * acts + a] - batch.targets[b];
        loss += huber(err, delta);
        scratch.dq[b * acts + a] = huber_grad(err, delta) * scale;
    }
    grads.iter_mut().for_each(|g| *g = F::zero());
    net.backward(&mut scratch.tape, &scratch.dq, grads)?;
    Ok(loss * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Arch {
        Arch {
            ego_inputs: 2,
            slot_inputs: 3,
            slots: 2,
            conv1: 3,
            conv2: 2,
            ego_units: 2,
            joint_units: 4,
            actions: 3,
        }
    }

    #[test]
    fn intersection_param_count() {
        let a = Arch::intersection();
        let expected = 6 * 32 + 32 + 32 * 16 + 16 + 3 * 16 + 16 + 80 * 64 + 64 + 64 + 1 + 64 * 6 + 6;
        assert_eq!(a.param_count(), expected);
        assert_eq!(a.input_dim(), 27);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = Arch::intersection();
        let n1 = Network::<f32>::init(a, 5);
        assert_eq!(n1, Network::<f32>::init(a, 5));
        assert_ne!(n1.params(), Network::<f32>::init(a, 6).params());
        for spec in a.tensors() {
            let bound = init_bound(&spec, &a) as f32;
            assert!(n1.params()[spec.range()].iter().all(|p| p.abs() <= bound));
        }
    }

    #[test]
    fn zero_weights_give_zero_q() {
        let net = Network::<f32>::zeros(Arch::intersection());
        let q = net.forward(&[0.3; 27], ActionMask::from_bools(&[true, true, true, false, false, false]));
        assert_eq!(&q[..3], &[0.0, 0.0, 0.0]);
        assert!(q[3..].iter().all(|v| *v == f32::NEG_INFINITY));
    }

    #[test]
    fn swapping_identical_slots_is_invariant() {
        let net = Network::<f64>::init(Arch::intersection(), 1);
        let mut x = vec![0.0; 27];
        for (i, v) in x.iter_mut().enumerate() {
            *v = ((i * 7) % 11) as f64 / 11.0 - 0.5;
        }
        let slot: Vec<f64> = x[3..9].to_vec();
        x[9..15].copy_from_slice(&slot);
        let q1 = net.forward(&x, ActionMask::all(6));
        let mut y = x.clone();
        y[3..9].copy_from_slice(&x[9..15]);
        y[9..15].copy_from_slice(&x[3..9]);
        assert_eq!(q1, net.forward(&y, ActionMask::all(6)));
    }

    #[test]
    fn zero_td_error_gives_zero_gradient() {
        let net = Network::<f64>::init(toy(), 2);
        let x = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        let mask = ActionMask::all(3);
        let q = net.forward(&x, mask);
        let mut grads = vec![1.0; net.params().len()];
        let mut scratch = GradScratch::new(&toy());
        let loss = gradients(
            &net,
            RegressionBatch {
                xs: &x,
                masks: &[mask],
                actions: &[1],
                targets: &[q[1]],
            },
            10.0,
            &mut grads,
            &mut scratch,
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn huber_tail_gradient_is_constant() {
        let net = Network::<f64>::init(toy(), 3);
        let x = vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8];
        let mask = ActionMask::all(3);
        let q = net.forward(&x, mask);
        let mut scratch = GradScratch::new(&toy());
        let mut g1 = vec![0.0; net.params().len()];
        let mut g2 = g1.clone();
        for (target, g) in [(q[0] - 20.0, &mut g1), (q[0] - 200.0, &mut g2)] {
            gradients(
                &net,
                RegressionBatch {
                    xs: &x,
                    masks: &[mask],
                    actions: &[0],
                    targets: &[target],
                },
                10.0,
                g,
                &mut scratch,
            )
            .unwrap();
        }
        assert_eq!(g1, g2);
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        let net = Network::<f64>::init(toy(), 3);
        let mut scratch = GradScratch::new(&toy());
        let mut g = vec![0.0; net.params().len()];
        let empty = RegressionBatch {
            xs: &[],
            masks: &[],
            actions: &[],
            targets: &[],
        };
        assert!(matches!(gradients(&net, empty, 10.0, &mut g, &mut scratch), Err(Error::EmptyBatch)));
        let x = vec![f64::NAN; 8];
        let bad = RegressionBatch {
            xs: &x,
            masks: &[ActionMask::all(3)],
            actions: &[0],
            targets: &[0.0],
        };
        assert!(matches!(gradients(&net, bad, 10.0, &mut g, &mut scratch), Err(Error::NonFinite(_))));
    }

    #[test]
    fn tape_is_single_use() {
        let net = Network::<f64>::init(toy(), 3);
        let mut tape = Tape::new();
        let mut act = Activations::new(&toy());
        let mut q = vec![0.0; 3];
        net.forward_batch(&[0.5; 8], &[ActionMask::all(3)], &mut q, Some(&mut tape), &mut act);
        let mut g = vec![0.0; net.params().len()];
        assert!(net.backward(&mut tape, &[1.0, 0.0, 0.0], &mut g).is_ok());
        assert!(net.backward(&mut tape, &[1.0, 0.0, 0.0], &mut g).is_err());
    }

    #[test]
    fn hard_update_is_a_deep_copy() {
        let online = Network::<f32>::init(Arch::intersection(), 1);
        let mut target = Network::<f32>::init(Arch::intersection(), 2);
        target.hard_update(&online);
        let x = [0.1f32; 27];
        assert_eq!(target.forward(&x, ActionMask::all(6)), online.forward(&x, ActionMask::all(6)));
        let mut online = online;
        online.params_mut()[0] += 1.0;
        assert_ne!(target.params()[0], online.params()[0]);
    }

    #[test]
    fn masked_argmax_breaks_ties_low() {
        let mask = ActionMask::all(3);
        assert_eq!(masked_argmax(&[1.0f32, 1.0, 0.0], mask), Some(0));
        let mask = ActionMask::from_bools(&[false, true, true]);
        assert_eq!(masked_argmax(&[9.0f32, 1.0, 2.0], mask), Some(2));
    }
}
