use proptest::prelude::*;

use rpf_core::env::{action_mask, observe, ActionMask, EnvConfig, IntersectionEnv, OBS_DIM};
use rpf_core::gate::{cv_per_action, gated_action, GateConfig};
use rpf_core::nn::checkpoint::{Checkpoint, CheckpointWriter};
use rpf_core::nn::{dueling, Arch, Network};
use rpf_core::replay::{BootstrapReplay, Experience};
use rpf_core::rpf::QMatrix;
use rpf_core::sim::{init_scenario, Footprint, SimConfig};
use rpf_core::{seed, Error};

fn footprint() -> impl Strategy<Value = Footprint> {
    (-20.0..20.0f64, -20.0..20.0f64, 0.1..5.0f64, 0.1..5.0f64).prop_map(|(cx, cy, hx, hy)| Footprint { cx, cy, hx, hy })
}

fn q_rows(members: usize, actions: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2.0f32..2.0, members * actions)
}

fn qmatrix(values: Vec<f32>, members: usize, mask: ActionMask) -> QMatrix {
    let actions = values.len() / members;
    QMatrix {
        members,
        actions,
        values,
        mask,
    }
}

proptest! {
    #[test]
    fn collision_is_symmetric(a in footprint(), b in footprint()) {
        prop_assert_eq!(a.overlaps(&b), b.overlaps(&a));
    }

    #[test]
    fn cv_is_scale_invariant(values in q_rows(5, 6), scale in prop_oneof![-8.0f32..-0.125, 0.125f32..8.0]) {
        let mask = ActionMask::all(6);
        let a = cv_per_action(&qmatrix(values.clone(), 5, mask), 1e-6).unwrap();
        let scaled: Vec<f32> = values.iter().map(|v| v * scale).collect();
        let b = cv_per_action(&qmatrix(scaled, 5, mask), 1e-6).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let (x, y) = (x.unwrap(), y.unwrap());
            // Scaling keeps c_v unless the mean drops under the floor.
            if x.is_finite() && x < 1e3 {
                prop_assert!((x - y).abs() <= 1e-3 * x.max(1.0), "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn lower_threshold_never_admits_more_actions(values in q_rows(4, 6), t1 in 0.01f64..2.0, t2 in 0.01f64..2.0, bits in 1u8..64) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let q = qmatrix(values, 4, ActionMask(bits));
        let strict = gated_action(&q, &GateConfig { cv_safe: lo, mean_floor: 1e-6 });
        let loose = gated_action(&q, &GateConfig { cv_safe: hi, mean_floor: 1e-6 });
        for a in 0..6 {
            prop_assert!(!loose.gated_out[a] || strict.gated_out[a]);
        }
        // Fallback under the loose threshold implies fallback under the strict one.
        if loose.chosen == rpf_core::env::Control::Fallback {
            prop_assert_eq!(strict.chosen, rpf_core::env::Control::Fallback);
        }
    }

    #[test]
    fn dueling_ignores_advantage_offset(v in -5.0f64..5.0, adv in prop::collection::vec(-5.0f64..5.0, 6), c in -5.0f64..5.0, bits in 1u8..64) {
        let mask = ActionMask(bits);
        let mut q1 = vec![0.0; 6];
        let mut q2 = vec![0.0; 6];
        dueling(v, &adv, mask, &mut q1);
        let shifted: Vec<f64> = adv.iter().map(|a| a + c).collect();
        dueling(v, &shifted, mask, &mut q2);
        for a in 0..6 {
            prop_assert!((q1[a] - q2[a]).abs() < 1e-9);
        }
        let allowed: Vec<usize> = mask.allowed(6).collect();
        let mean: f64 = allowed.iter().map(|&a| q1[a]).sum::<f64>() / allowed.len() as f64;
        prop_assert!((mean - v).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), extra in prop::collection::vec(any::<u8>(), 0..64)) {
        let arch = Arch { ego_inputs: 2, slot_inputs: 3, slots: 2, conv1: 4, conv2: 2, ego_units: 3, joint_units: 4, actions: 3 };
        let net = Network::<f32>::init(arch, seed);
        let mut w = CheckpointWriter::new("test", "abc", serde_json::json!({ "seed": seed }));
        w.network("net/", &net).bytes("extra", &extra);
        let bytes = w.to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(ck.network("net/", arch).unwrap(), net);
        prop_assert_eq!(ck.bytes("extra").unwrap(), &extra[..]);
        let cut = (seed as usize) % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn observations_bounded_and_masks_valid(s in any::<u64>(), steps in 0usize..60) {
        let cfg = EnvConfig::default();
        let mut env = IntersectionEnv::new(cfg, s).unwrap();
        for i in 0..steps {
            let obs = observe(&env.state);
            prop_assert!(obs.features.iter().all(|f| (-1.0..=1.0).contains(f)));
            for slot in 0..4 {
                if !obs.present[slot] {
                    prop_assert!(obs.features[3 + 6 * slot..9 + 6 * slot].iter().all(|&f| f == -1.0));
                }
            }
            let mask = action_mask(&env.state);
            prop_assert!(mask.allows(0) && mask.allows(1));
            let allowed: Vec<usize> = mask.allowed(6).collect();
            let a = allowed[i % allowed.len()];
            let out = rpf_core::env::Environment::step(&mut env, a).unwrap();
            prop_assert_eq!(out.obs.len(), OBS_DIM);
            if out.termination.is_done() {
                break;
            }
        }
    }

    #[test]
    fn scenarios_are_reproducible(s in any::<u64>()) {
        let cfg = SimConfig::default();
        prop_assert_eq!(init_scenario(s, &cfg).unwrap(), init_scenario(s, &cfg).unwrap());
    }

    #[test]
    fn seed_streams_do_not_collide(master in any::<u64>(), i in 0u64..1000) {
        let streams = [seed::SCENARIO, seed::MASKS, seed::MEMBER, seed::EPSILON, seed::INIT, seed::PRIOR, seed::MINIBATCH, seed::SUITE];
        let mut all: Vec<u64> = streams.iter().map(|s| seed::derive(master, s, i)).collect();
        all.push(seed::derive(master, seed::SCENARIO, i + 1));
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), streams.len() + 1);
    }

    #[test]
    fn replay_serialization_round_trip(n in 1usize..80, cap in 1usize..40, bits in prop::collection::vec(any::<u64>(), 80)) {
        let mut r = BootstrapReplay::new(cap, 2, 5, 0.5).unwrap();
        for i in 0..n {
            let exp = Experience {
                obs: vec![i as f32, 0.5],
                mask: ActionMask(0b11),
                action: (i % 2) as u8,
                reward: -(i as f32),
                next_obs: vec![0.0, i as f32],
                next_mask: ActionMask(0b01),
                terminal: i % 3 == 0,
            };
            r.push_with_bits(&exp, bits[i]).unwrap();
        }
        let back = BootstrapReplay::from_bytes(&r.to_bytes()).unwrap();
        prop_assert_eq!(back.len(), r.len());
        for k in 0..5 {
            prop_assert_eq!(back.member_len(k), r.member_len(k));
            // Counts agree with the stored masks after eviction.
            let direct = (0..r.len()).filter(|&i| r.get(i).members >> k & 1 == 1).count();
            prop_assert_eq!(r.member_len(k), direct);
        }
        for i in 0..r.len() {
            prop_assert_eq!(back.get(i), r.get(i));
        }
    }
}

#[test]
fn checkpoint_version_and_shape_errors_are_distinct() {
    let arch = Arch::intersection();
    let net = Network::<f32>::init(arch, 3);
    let mut w = CheckpointWriter::new("test", "abc", serde_json::json!({}));
    w.network("n/", &net);
    let bytes = w.to_bytes().unwrap();
    let smaller = Arch { joint_units: 32, ..arch };
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(matches!(ck.network("n/", smaller), Err(Error::ShapeMismatch { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]), Err(Error::Truncated { .. })));
}
