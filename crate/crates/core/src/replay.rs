//! Experience replay with per-member inclusion masks.
//!
//! Every experience is stored once. A bitmask records which ensemble members
//! see it, so member `k`'s buffer is the set of entries with bit `k` set.

use rand::Rng;

use crate::env::ActionMask;
use crate::error::{Error, Result};

pub const MAX_MEMBERS: usize = 64;

/// One stored transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub obs: Vec<f32>,
    pub mask: ActionMask,
    pub action: u8,
    pub reward: f32,
    pub next_obs: Vec<f32>,
    pub next_mask: ActionMask,
    /// Goal or collision: no bootstrap from `next_obs`.
    pub terminal: bool,
}

/// Borrowed view of one stored entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperienceRef<'a> {
    pub obs: &'a [f32],
    pub mask: ActionMask,
    pub action: u8,
    pub reward: f32,
    pub next_obs: &'a [f32],
    pub next_mask: ActionMask,
    pub terminal: bool,
    pub members: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapReplay {
    capacity: usize,
    obs_dim: usize,
    members: usize,
    p_add: f64,
    len: usize,
    head: usize,
    obs: Vec<f32>,
    next_obs: Vec<f32>,
    masks: Vec<ActionMask>,
    next_masks: Vec<ActionMask>,
    actions: Vec<u8>,
    rewards: Vec<f32>,
    terminal: Vec<bool>,
    bits: Vec<u64>,
    counts: Vec<usize>,
}

impl BootstrapReplay {
    pub fn new(capacity: usize, obs_dim: usize, members: usize, p_add: f64) -> Result<Self> {
        if capacity == 0 || members == 0 || members > MAX_MEMBERS || !(0.0..=1.0).contains(&p_add) {
            return Err(Error::InvalidConfig(format!(
                "replay needs capacity > 0, 1..={MAX_MEMBERS} members and p_add in [0, 1]; got {capacity}, {members}, {p_add}"
            )));
        }
        Ok(Self {
            capacity,
            obs_dim,
            members,
            p_add,
            len: 0,
            head: 0,
            obs: Vec::new(),
            next_obs: Vec::new(),
            masks: Vec::new(),
            next_masks: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: Vec::new(),
            bits: Vec::new(),
            counts: vec![0; members],
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn p_add(&self) -> f64 {
        self.p_add
    }

    /// Size of member `k`'s logical buffer.
    pub fn member_len(&self, k: usize) -> usize {
        self.counts[k]
    }

    /// Draws one inclusion bit per member, in member order.
    pub fn draw_bits<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let mut bits = 0u64;
        for k in 0..self.members {
            if rng.gen::<f64>() < self.p_add {
                bits |= 1 << k;
            }
        }
        bits
    }

    pub fn push<R: Rng + ?Sized>(&mut self, exp: &Experience, rng: &mut R) -> Result<()> {
        let bits = self.draw_bits(rng);
        self.push_with_bits(exp, bits)
    }

    pub fn push_with_bits(&mut self, exp: &Experience, bits: u64) -> Result<()> {
        if exp.obs.len() != self.obs_dim || exp.next_obs.len() != self.obs_dim {
            return Err(Error::ShapeMismatch {
                name: "experience".into(),
                expected: vec![self.obs_dim],
                found: vec![exp.obs.len()],
            });
        }
        if !exp.obs.iter().chain(&exp.next_obs).all(|v| v.is_finite()) || !exp.reward.is_finite() {
            return Err(Error::NonFinite("experience"));
        }
        let bits = bits & self.member_bits();
        let d = self.obs_dim;
        if self.len < self.capacity {
            self.obs.extend_from_slice(&exp.obs);
            self.next_obs.extend_from_slice(&exp.next_obs);
            self.masks.push(exp.mask);
            self.next_masks.push(exp.next_mask);
            self.actions.push(exp.action);
            self.rewards.push(exp.reward);
            self.terminal.push(exp.terminal);
            self.bits.push(bits);
            self.len += 1;
        } else {
            let i = self.head;
            self.forget(self.bits[i]);
            self.obs[i * d..(i + 1) * d].copy_from_slice(&exp.obs);
            self.next_obs[i * d..(i + 1) * d].copy_from_slice(&exp.next_obs);
            self.masks[i] = exp.mask;
            self.next_masks[i] = exp.next_mask;
            self.actions[i] = exp.action;
            self.rewards[i] = exp.reward;
            self.terminal[i] = exp.terminal;
            self.bits[i] = bits;
        }
        self.head = (self.head + 1) % self.capacity;
        for (k, c) in self.counts.iter_mut().enumerate() {
            if bits >> k & 1 == 1 {
                *c += 1;
            }
        }
        Ok(())
    }

    fn forget(&mut self, bits: u64) {
        for (k, c) in self.counts.iter_mut().enumerate() {
            if bits >> k & 1 == 1 {
                *c -= 1;
            }
        }
    }

    fn member_bits(&self) -> u64 {
        if self.members == 64 {
            u64::MAX
        } else {
            (1u64 << self.members) - 1
        }
    }

    pub fn get(&self, i: usize) -> ExperienceRef<'_> {
        let d = self.obs_dim;
        ExperienceRef {
            obs: &self.obs[i * d..(i + 1) * d],
            mask: self.masks[i],
            action: self.actions[i],
            reward: self.rewards[i],
            next_obs: &self.next_obs[i * d..(i + 1) * d],
            next_mask: self.next_masks[i],
            terminal: self.terminal[i],
            members: self.bits[i],
        }
    }

    /// Physical index of the `age`-th oldest entry.
    pub fn oldest(&self, age: usize) -> usize {
        if self.len < self.capacity {
            age
        } else {
            (self.head + age) % self.capacity
        }
    }

    /// Indices drawn uniformly with replacement from member `k`'s buffer, by
    /// rejection over the physical buffer. `None` while the member holds fewer
    /// than `n` entries.
    pub fn sample_member<R: Rng + ?Sized>(&self, k: usize, n: usize, rng: &mut R) -> Option<Vec<usize>> {
        if self.counts[k] < n || n == 0 {
            return None;
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let i = rng.gen_range(0..self.len);
            if self.bits[i] >> k & 1 == 1 {
                out.push(i);
            }
        }
        Some(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.capacity, self.obs_dim, self.members, self.len, self.head] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.p_add.to_le_bytes());
        for v in self.obs.iter().chain(&self.next_obs).chain(&self.rewards) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len {
            out.push(self.masks[i].0);
            out.push(self.next_masks[i].0);
            out.push(self.actions[i]);
            out.push(self.terminal[i] as u8);
            out.extend_from_slice(&self.bits[i].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::MalformedCheckpoint("replay section".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(bad());
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        let mut head_fields = [0usize; 5];
        for f in &mut head_fields {
            *f = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        }
        let [capacity, obs_dim, members, len, head] = head_fields;
        let p_add = f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let mut rb = Self::new(capacity, obs_dim, members, p_add)?;
        if len > capacity || head >= capacity.max(1) {
            return Err(bad());
        }
        let floats = |raw: &[u8]| -> Vec<f32> {
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        rb.obs = floats(take(len * obs_dim * 4)?);
        rb.next_obs = floats(take(len * obs_dim * 4)?);
        rb.rewards = floats(take(len * 4)?);
        for _ in 0..len {
            let r = take(12)?;
            rb.masks.push(ActionMask(r[0]));
            rb.next_masks.push(ActionMask(r[1]));
            rb.actions.push(r[2]);
            rb.terminal.push(r[3] != 0);
            let bits = u64::from_le_bytes(r[4..12].try_into().expect("8 bytes"));
            rb.bits.push(bits);
            for (k, c) in rb.counts.iter_mut().enumerate() {
                if bits >> k & 1 == 1 {
                    *c += 1;
                }
            }
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        rb.len = len;
        rb.head = head;
        Ok(rb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp(tag: f32) -> Experience {
        Experience {
            obs: vec![tag; 2],
            mask: ActionMask::all(3),
            action: 1,
            reward: tag,
            next_obs: vec![tag + 1.0; 2],
            next_mask: ActionMask::all(3),
            terminal: false,
        }
    }

    #[test]
    fn fifo_eviction_keeps_counts() {
        let mut rb = BootstrapReplay::new(3, 2, 2, 1.0).unwrap();
        for i in 0..5 {
            rb.push_with_bits(&exp(i as f32), if i % 2 == 0 { 0b01 } else { 0b11 }).unwrap();
        }
        assert_eq!(rb.len(), 3);
        // Entries 2, 3, 4 remain.
        let rewards: Vec<f32> = (0..3).map(|a| rb.get(rb.oldest(a)).reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        assert_eq!(rb.member_len(0), 3);
        assert_eq!(rb.member_len(1), 1);
    }

    #[test]
    fn p_add_one_sets_every_bit() {
        let rb = BootstrapReplay::new(10, 2, 7, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(rb.draw_bits(&mut rng), 0b111_1111);
    }

    #[test]
    fn member_samples_respect_bits() {
        let mut rb = BootstrapReplay::new(100, 2, 2, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..100 {
            rb.push(&exp(i as f32), &mut rng).unwrap();
        }
        for k in 0..2 {
            let idx = rb.sample_member(k, 32, &mut rng).unwrap();
            assert!(idx.iter().all(|&i| rb.get(i).members >> k & 1 == 1));
        }
        assert!(rb.sample_member(0, rb.member_len(0) + 1, &mut rng).is_none());
    }

    #[test]
    fn byte_round_trip() {
        let mut rb = BootstrapReplay::new(4, 2, 3, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..6 {
            rb.push(&exp(i as f32), &mut rng).unwrap();
        }
        assert_eq!(BootstrapReplay::from_bytes(&rb.to_bytes()).unwrap(), rb);
        let bytes = rb.to_bytes();
        assert!(BootstrapReplay::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn rejects_wrong_width() {
        let mut rb = BootstrapReplay::new(4, 3, 1, 1.0).unwrap();
        assert!(rb.push_with_bits(&exp(0.0), 1).is_err());
    }
}
