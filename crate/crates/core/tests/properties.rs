use candle_core::{Device, Tensor};
use mptp_core::data::{batch_schedule, BatchMode};
use mptp_core::losses::{scalar, total_loss, wdice, LossConfig};
use mptp_core::metrics::{confusion, dice_score, evaluate, BinaryMask};
use mptp_core::msff::{expand_slices, merge_slices};
use mptp_core::nn::{bilinear_weights, to_f64_vec};
use mptp_core::pretrain::augment::{AugmentConfig, AugmentationPolicy};
use proptest::prelude::*;

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn mask_pair() -> impl Strategy<Value = (usize, usize, Vec<u8>, Vec<u8>)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(0u8..=1, h * w),
            prop::collection::vec(0u8..=1, h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_keeps_the_multiset_and_expand_inverts_its_shape(
        b in 1usize..3, h2 in 1usize..5, w2 in 1usize..5, c in 1usize..4, seed in any::<u64>()
    ) {
        let (h, w) = (2 * h2, 2 * w2);
        let n = b * h * w * c;
        let values: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1009) as f64).collect();
        let x = Tensor::from_vec(values.clone(), (b, h, w, c), &Device::Cpu).unwrap();
        let merged = merge_slices(&x).unwrap();
        prop_assert_eq!(merged.dims(), &[b, h2, w2, 4 * c]);
        prop_assert_eq!(sorted(to_f64_vec(&merged).unwrap()), sorted(values));
        let y = Tensor::zeros((b, h2, w2, 4 * c), candle_core::DType::F64, &Device::Cpu).unwrap();
        let expanded = expand_slices(&y).unwrap();
        prop_assert_eq!(expanded.dims(), &[b, h, w, c]);
    }

    #[test]
    fn weighted_dice_stays_in_unit_interval(
        pred in prop::collection::vec(0f64..=1.0, 2 * 16),
        target in prop::collection::vec(0u8..=1, 2 * 16),
    ) {
        let cfg = LossConfig::default();
        let p = Tensor::from_vec(pred, (2, 1, 4, 4), &Device::Cpu).unwrap();
        let t: Vec<f64> = target.into_iter().map(f64::from).collect();
        let t = Tensor::from_vec(t, (2, 1, 4, 4), &Device::Cpu).unwrap();
        let d = scalar(&wdice(&p, &t, &cfg).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&d), "wdice {d}");
    }

    #[test]
    fn loss_of_a_perfect_binary_prediction_is_the_floor(target in prop::collection::vec(0u8..=1, 16)) {
        let t: Vec<f64> = target.into_iter().map(f64::from).collect();
        let t = Tensor::from_vec(t, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let cfg = LossConfig { prob_clamp_eps: 1e-12, ..LossConfig::default() };
        let l = scalar(&total_loss(&t, &t, &cfg).unwrap()).unwrap();
        prop_assert!((l - 0.375).abs() < 1e-6, "loss {l}");
    }

    #[test]
    fn batch_loss_is_the_mean_of_per_sample_losses(
        pred in prop::collection::vec(0.01f64..0.99, 3 * 9),
        target in prop::collection::vec(0u8..=1, 3 * 9),
    ) {
        let cfg = LossConfig::default();
        let t: Vec<f64> = target.into_iter().map(f64::from).collect();
        let p = Tensor::from_vec(pred, (3, 1, 3, 3), &Device::Cpu).unwrap();
        let t = Tensor::from_vec(t, (3, 1, 3, 3), &Device::Cpu).unwrap();
        let whole = scalar(&total_loss(&p, &t, &cfg).unwrap()).unwrap();
        let parts: f64 = (0..3)
            .map(|i| scalar(&total_loss(&p.narrow(0, i, 1).unwrap(), &t.narrow(0, i, 1).unwrap(), &cfg).unwrap()).unwrap())
            .sum::<f64>() / 3.0;
        prop_assert!((whole - parts).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_bounded_and_dice_is_symmetric((h, w, a, b) in mask_pair()) {
        let pa = BinaryMask::new(h, w, a).unwrap();
        let pb = BinaryMask::new(h, w, b).unwrap();
        let row = evaluate(&pa, &pb).unwrap();
        for v in row.values() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(dice_score(&pa, &pb).unwrap(), dice_score(&pb, &pa).unwrap());
        let c = confusion(&pa, &pb).unwrap();
        prop_assert_eq!(c.total(), (h * w) as u64);
        prop_assert_eq!(evaluate(&pa, &pa).unwrap().dice, 1.0);
    }

    #[test]
    fn train_schedule_is_a_partial_permutation(n in 0usize..60, bs in 2usize..9, seed in any::<u64>(), epoch in 0usize..5) {
        let batches = batch_schedule(n, bs, seed, epoch, BatchMode::Train).unwrap();
        prop_assert_eq!(batches.len(), n / bs);
        prop_assert!(batches.iter().all(|b| b.len() == bs));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), (n / bs) * bs);
        prop_assert!(seen.iter().all(|&i| i < n));
        prop_assert_eq!(batches, batch_schedule(n, bs, seed, epoch, BatchMode::Train).unwrap());
    }

    #[test]
    fn eval_schedule_covers_everything_in_order(n in 0usize..60, bs in 1usize..9) {
        let batches = batch_schedule(n, bs, 0, 0, BatchMode::Eval).unwrap();
        prop_assert_eq!(batches.concat(), (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_is_bounded_and_deterministic(
        image in prop::collection::vec(0f32..=1.0, 3 * 8 * 8), stream in any::<u64>(), seed in any::<u64>()
    ) {
        let cfg = AugmentConfig { seed, ..AugmentConfig::default() };
        let policy = AugmentationPolicy::from_config(&cfg).unwrap();
        let a = policy.apply(&image, 8, 8, stream, 1);
        prop_assert_eq!(a.len(), image.len());
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&a, &policy.apply(&image, 8, 8, stream, 1));
    }

    #[test]
    fn bilinear_rows_sum_to_one(out in 1usize..40, input in 1usize..40) {
        let w = bilinear_weights(out, input);
        prop_assert_eq!(w.len(), out * input);
        for row in w.chunks(input) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
