//! Property tests for invariants that must hold for every input.

use ndarray::Array3;
use proptest::prelude::*;

use patchlab::attack::{decode_delta, default_sticker_mask, encode_delta, poster_mask, AttackMode, PatchSpec, PerturbationNorm};
use patchlab::detector::{nms, Detection};
use patchlab::difftrans::{warp_backward, warp_projective, PoseDistribution};
use patchlab::eval::{classify_outcome, Outcome};
use patchlab::geometry::{iou, BBox};
use patchlab::scenegen::{render_canonical_sign, SignClass};
use patchlab::seed;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.05..0.95f64, 0.05..0.95f64, 0.02..0.6f64, 0.02..0.6f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn detection() -> impl Strategy<Value = Detection> {
    (bbox(), 0..3usize, 0.0..1.0f64, 0..64usize).prop_map(|(bbox, class_id, score, cell)| Detection { bbox, class_id, score, cell })
}

fn random_field(seed_value: u64, amp: f64) -> Array3<f64> {
    use rand::Rng as _;
    let mut rng = seed::rng(seed_value);
    Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(-amp..amp))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - iou(&b, &a)).abs() < 1e-15);
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_a_non_overlapping_subset(dets in prop::collection::vec(detection(), 0..12), t in 0.1..0.9f64) {
        let kept = nms(dets.clone(), t);
        prop_assert!(kept.len() <= dets.len());
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= t);
            }
        }
        // Every dropped detection is covered by a kept one of its class.
        for d in dets.iter().filter(|d| !kept.contains(d)) {
            prop_assert!(kept.iter().any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > t));
        }
        prop_assert_eq!(nms(kept.clone(), t), kept);
    }

    #[test]
    fn extra_detections_never_undo_a_true_detection(dets in prop::collection::vec(detection(), 0..6), extra in detection(), gt in bbox(), cls in 0..3usize) {
        if classify_outcome(&dets, &gt, cls) == Outcome::TrueDetect {
            let mut more = dets.clone();
            more.push(extra);
            prop_assert_eq!(classify_outcome(&more, &gt, cls), Outcome::TrueDetect);
        }
    }

    #[test]
    fn projection_enforces_patch_invariants(seed_value in any::<u64>(), amp in 0.0..3.0f64, sticker in any::<bool>(), radius in prop::option::of(0.01..0.5f64)) {
        let tex = render_canonical_sign::<f64>(0, seed_value % 7).unwrap();
        let mask = if sticker { default_sticker_mask() } else { poster_mask(SignClass::Stop) };
        let norm = radius.map_or(PerturbationNorm::L2, |radius| PerturbationNorm::Linf { radius });
        let mut spec = PatchSpec::<f64>::new(mask, AttackMode::Disappearance, SignClass::Stop, None, 0.01, norm).unwrap()
            .with_delta(random_field(seed_value, amp));
        spec.project(&tex);
        for ((r, c, ch), &d) in spec.delta.indexed_iter() {
            if !spec.mask[[r, c]] {
                prop_assert_eq!(d, 0.0);
                continue;
            }
            let v = tex.rgba[[r, c, ch]] + d;
            prop_assert!((0.0..=1.0).contains(&v));
            if let Some(rad) = radius {
                prop_assert!(d.abs() <= rad);
            }
        }
        let once = spec.delta.clone();
        spec.project(&tex);
        prop_assert_eq!(spec.delta, once);
    }

    #[test]
    fn delta_png_round_trip_is_within_one_level(seed_value in any::<u64>()) {
        let delta = random_field(seed_value, 1.0);
        let back: Array3<f64> = decode_delta(&encode_delta(&delta));
        for (a, b) in delta.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 0.5 / 127.0 + 1e-12);
        }
        let zero: Array3<f64> = decode_delta(&encode_delta(&Array3::<f64>::zeros((8, 8, 3))));
        prop_assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_backward_is_the_adjoint(seed_value in any::<u64>()) {
        let pose = PoseDistribution::default().sample_pose(&SignClass::Stop.outline(), &mut seed::rng(seed_value)).unwrap();
        let params = pose.transform_params().unwrap();
        let x = random_field(seed_value ^ 1, 1.0);
        let y = random_field(seed_value ^ 2, 1.0);
        let lhs = (&warp_projective(&x, &params, (64, 64)).unwrap() * &y).sum();
        let rhs = (&x * &warp_backward(x.dim(), &params, &y).unwrap()).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn pinned_poses_sit_at_the_center(seed_value in any::<u64>()) {
        let dist = PoseDistribution { translation_invariance: false, ..PoseDistribution::default() };
        let pose = dist.sample_pose(&SignClass::Stop.outline(), &mut seed::rng(seed_value)).unwrap();
        prop_assert_eq!((pose.translate_x, pose.translate_y), (0.5, 0.5));
    }

    #[test]
    fn derived_seeds_depend_on_label_and_parent(s in any::<u64>(), a in "[a-z/]{1,12}", b in "[a-z/]{1,12}") {
        prop_assert_eq!(seed::derive(s, &a), seed::derive(s, &a));
        if a != b {
            prop_assert_ne!(seed::derive(s, &a), seed::derive(s, &b));
        }
        prop_assert_ne!(seed::derive(s, &a), seed::derive(s.wrapping_add(1), &a));
    }
}
