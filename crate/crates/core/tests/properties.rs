use proptest::prelude::*;

use ien_core::data::idx::{encode_images, encode_labels, parse_idx};
use ien_core::data::Idx;
use ien_core::equiv::{layer_equiv_loss, ElementPolicy};
use ien_core::group::{plan_for, GroupElement};
use ien_core::train::{one_cycle_lr, Checkpoint, RngState, TrainConfig};
use ien_core::{Action, GroupSpec, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn exact_elements() -> Vec<GroupElement> {
    let mut out: Vec<GroupElement> = GroupSpec::parse("R4R").unwrap().elements().to_vec();
    out.extend(GroupSpec::reflection().elements());
    out
}

fn planes(n: usize, s: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n * s * s)
}

proptest! {
    #[test]
    fn exact_actions_invert_bit_exactly(s in 1usize..12, idx in 0usize..10, seed in any::<u64>()) {
        let g = exact_elements()[idx % exact_elements().len()];
        let x = Tensor::<f32>::new(&[2, 3, s, s], ien_core::Fill::Normal { seed, mean: 0.0, std: 1.0 }).unwrap();
        let there = plan_for(g.action, s, s).unwrap().apply(&x).unwrap();
        let back = plan_for(g.inverse_action(), s, s).unwrap().apply(&there).unwrap();
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn loss_is_symmetric_under_swap_and_inverse(s in 2usize..9, idx in 0usize..10, a in planes(6, 8), b in planes(6, 8)) {
        let spec = GroupSpec::parse("R4R").unwrap();
        let g = spec.elements()[idx % spec.order()];
        let inv = spec.elements().iter().copied().find(|e| e.action == g.inverse_action()).unwrap();
        let take = |v: &[f64]| Tensor::<f64>::from_vec(&[2, 3, s, s], v[..2 * 3 * s * s].to_vec()).unwrap();
        let mut tape = Tape::new();
        let (p, q) = (tape.constant(take(&a)), tape.constant(take(&b)));
        let forward = layer_equiv_loss(&mut tape, p, q, &g).unwrap();
        let swapped = layer_equiv_loss(&mut tape, q, p, &inv).unwrap();
        let (l1, l2) = (tape.value(forward).item(), tape.value(swapped).item());
        prop_assert!((l1 - l2).abs() <= 1e-6 * l1.abs().max(1.0), "{l1} vs {l2}");
    }

    #[test]
    fn identity_contributes_exactly_zero(s in 1usize..9, a in planes(2, 8)) {
        let spec = GroupSpec::rotation(8).unwrap();
        let h = Tensor::<f64>::from_vec(&[1, 2, s, s], a[..2 * s * s].to_vec()).unwrap();
        let mut tape = Tape::new();
        let (p, q) = (tape.constant(h.clone()), tape.constant(h));
        let l = layer_equiv_loss(&mut tape, p, q, spec.identity()).unwrap();
        prop_assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn sampled_elements_are_distinct_and_repeatable(k in 1usize..8, seed in any::<u64>(), step in any::<u64>()) {
        let spec = GroupSpec::rotation(8).unwrap();
        let policy = ElementPolicy::Sample { k, seed };
        let first: Vec<usize> = policy.select(&spec, step).iter().map(|g| g.index).collect();
        let again: Vec<usize> = policy.select(&spec, step).iter().map(|g| g.index).collect();
        prop_assert_eq!(&first, &again);
        prop_assert_eq!(first.len(), k.min(7));
        prop_assert!(first.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(!first.contains(&0));
    }

    #[test]
    fn image_bytes_survive_the_idx_round_trip(n in 1usize..4, h in 1usize..6, w in 1usize..6, bytes in prop::collection::vec(any::<u8>(), 100)) {
        let data: Vec<f32> = bytes.iter().cycle().take(n * h * w).map(|b| *b as f32 / 255.0).collect();
        let images = Tensor::from_vec(&[n, 1, h, w], data).unwrap();
        let Idx::Images(back) = parse_idx(&encode_images(&images).unwrap(), "mem").unwrap() else {
            panic!("decoded labels from an image file");
        };
        prop_assert_eq!(back, images);
    }

    #[test]
    fn labels_survive_the_idx_round_trip(labels in prop::collection::vec(0usize..10, 0..50)) {
        let decoded = parse_idx(&encode_labels(&labels).unwrap(), "mem").unwrap();
        prop_assert_eq!(decoded, Idx::Labels(labels));
    }

    #[test]
    fn learning_rate_stays_within_bounds(e in 0.0f64..90.0) {
        let cfg = TrainConfig::default();
        let lr = one_cycle_lr(e, &cfg).unwrap();
        prop_assert!((cfg.lr_min..=cfg.lr_max).contains(&lr));
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(-1e6f32..1e6, 1..40), epoch in 0u64..100, seed in any::<u64>()) {
        let ck = Checkpoint {
            config_hash: seed ^ 0xabcd,
            epoch,
            step: epoch * 31,
            tensors: vec![
                ("w".into(), Tensor::from_vec(&[values.len()], values.clone()).unwrap()),
                ("s".into(), Tensor::scalar(values[0])),
            ],
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(seed)),
        };
        prop_assert_eq!(Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }
}

#[test]
fn quarter_turn_matches_the_rotation_convention() {
    // Counterclockwise as displayed: the top-right pixel moves to the top-left.
    let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = plan_for(Action::Rotation { k: 1, order: 4 }, 2, 2).unwrap().apply(&x).unwrap();
    assert_eq!(y.data(), &[2.0, 4.0, 1.0, 3.0]);
}
