use itgan_core::data::{parse_attr_list, to_pixels, AttrList, AttrRow, SyntheticSpec};
use itgan_core::eval::{cosine_distance, hamming_loss, AblationSetting};
use itgan_core::losses::{
    adv_loss_d, adv_loss_g, label_loss, latent_loss, perceptual_loss, pixel_loss, LossWeights, Norm,
};
use itgan_core::nn::{init_params, ArchConfig, ModelBundle};
use itgan_core::pipeline::{apply_edits, Edit, EditValue};
use itgan_core::tensor::{Conv2dSpec, Tape};
use itgan_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, spec: Conv2dSpec) -> Tensor<f64> {
    let mut tape = Tape::new();
    let cout = k.shape()[0];
    let (xv, kv, bv) = (
        tape.constant(x.clone()),
        tape.constant(k.clone()),
        tape.constant(Tensor::zeros(&[cout])),
    );
    let y = tape.conv2d(xv, kv, bv, spec).unwrap();
    tape.value(y).clone()
}

fn tiny_bundle(seed: u64) -> ModelBundle {
    init_params(&ArchConfig::new(16, 4, 0.0625).unwrap(), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_is_linear(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        hw in 3usize..9,
        k in 1usize..4,
        s in 1usize..3,
        p in 0usize..2,
    ) {
        let x = tensor(&[2, 2, hw, hw], seed);
        let x2 = tensor(&[2, 2, hw, hw], seed ^ 1);
        let kern = tensor(&[3, 2, k, k], seed ^ 2);
        let spec = Conv2dSpec::new(s, p);
        let mix = x.zip_map(&x2, |u, v| a * u + b * v).unwrap();
        let lhs = conv(&mix, &kern, spec);
        let rhs = conv(&x, &kern, spec).zip_map(&conv(&x2, &kern, spec), |u, v| a * u + b * v).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn forward_passes_are_bitwise_reproducible(seed in 0u64..1000, zseed in any::<u64>()) {
        let m = tiny_bundle(seed);
        let mut r = ChaCha8Rng::seed_from_u64(zseed);
        let z = Tensor::uniform(&[2, 100], -1.0, 1.0, &mut r);
        let c = Tensor::new(&[2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = m.generate(&z, &c).unwrap();
        let b = tiny_bundle(seed).generate(&z, &c).unwrap();
        prop_assert_eq!(a.data(), b.data());
        let (za, ca) = m.encode(&a).unwrap();
        let (zb, cb) = m.encode(&b).unwrap();
        prop_assert_eq!(za.data(), zb.data());
        prop_assert_eq!(ca.data(), cb.data());
    }

    #[test]
    fn outputs_stay_inside_open_ranges(seed in 0u64..1000, scale in 1.0f64..400.0) {
        // Blown-up weights push every activation towards saturation.
        let mut m = tiny_bundle(seed);
        for t in m.generator.params.tensors_mut().iter_mut()
            .chain(m.classifier.params.tensors_mut().iter_mut())
        {
            for v in t.data_mut() {
                *v *= scale as f32;
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::uniform(&[3, 100], -1.0, 1.0, &mut r);
        let c = Tensor::new(&[3, 4], vec![1.0; 12]).unwrap();
        let x = m.generate(&z, &c).unwrap();
        prop_assert!(x.data().iter().all(|v| v.abs() < 1.0));
        let (zt, ct) = m.encode(&x).unwrap();
        prop_assert!(zt.data().iter().all(|v| v.abs() < 1.0));
        prop_assert!(ct.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn losses_are_non_negative_and_vanish_at_fixed_points(seed in any::<u64>(), b in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::uniform(&[b, 1], 0.001, 0.999, &mut r));
        let q = tape.constant(Tensor::uniform(&[b, 1], 0.001, 0.999, &mut r));
        let x = tape.constant(Tensor::randn(&[b, 3, 4, 4], 1.0, &mut r));
        let y = tape.constant(Tensor::randn(&[b, 3, 4, 4], 1.0, &mut r));
        let labels = Tensor::from_f64(&[b, 1], &vec![1.0; b]).unwrap();
        let ones = tape.constant(Tensor::full(&[b, 1], 1.0 - 1e-9));
        let zeros = tape.constant(Tensor::full(&[b, 1], 1e-9));
        for norm in [Norm::Mse, Norm::Mae] {
            let l = pixel_loss(&mut tape, x, y, norm).unwrap();
            prop_assert!(tape.value(l).item() >= 0.0);
            let l = latent_loss(&mut tape, x, x, norm).unwrap();
            prop_assert_eq!(tape.value(l).item(), 0.0);
            let l = perceptual_loss(&mut tape, &[x, x], &[x, x], &[1.0, 1.0], norm).unwrap();
            prop_assert_eq!(tape.value(l).item(), 0.0);
        }
        let l = adv_loss_d(&mut tape, p, q).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
        let l = adv_loss_d(&mut tape, ones, zeros).unwrap();
        prop_assert!(tape.value(l).item() < 1e-6);
        let l = adv_loss_g(&mut tape, q);
        prop_assert!(tape.value(l).item() >= 0.0);
        let l = label_loss(&mut tape, p, &labels).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
        let l = label_loss(&mut tape, ones, &labels).unwrap();
        prop_assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn perceptual_loss_scales_with_alpha(seed in any::<u64>(), k in 0.0f64..10.0) {
        let mut tape = Tape::<f64>::new();
        let real: Vec<_> = (0..4).map(|i| tape.constant(tensor(&[2, i + 1, 3, 3], seed ^ i as u64))).collect();
        let fake: Vec<_> = (0..4).map(|i| tape.constant(tensor(&[2, i + 1, 3, 3], seed ^ (i as u64 + 9)))).collect();
        let alpha = [1.0, 0.5, 2.0, 0.25];
        let scaled: Vec<f64> = alpha.iter().map(|a| a * k).collect();
        let base = perceptual_loss(&mut tape, &real, &fake, &alpha, Norm::Mse).unwrap();
        let big = perceptual_loss(&mut tape, &real, &fake, &scaled, Norm::Mse).unwrap();
        let (base, big) = (tape.value(base).item(), tape.value(big).item());
        prop_assert!((big - k * base).abs() <= 1e-12 * big.abs().max(1.0));
    }

    #[test]
    fn integrated_weights_combine_conically(
        per in 0.0f64..5.0, pix in 0.0f64..5.0, z in 0.0f64..5.0,
        l1 in 0.0f64..3.0, l2 in 0.0f64..3.0, l3 in 0.0f64..3.0,
    ) {
        let w = LossWeights { lambda_per: l1, lambda_pix: l2, lambda_z: l3, ..LossWeights::default() };
        prop_assert!(w.combine(per, pix, z) >= 0.0);
        prop_assert_eq!(w.combine(per, pix, z), l1 * per + l2 * pix + l3 * z);
    }

    #[test]
    fn hamming_ignores_threshold_preserving_rescaling(seed in any::<u64>(), gain in 0.01f64..1.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pred = Tensor::<f32>::uniform(&[6, 5], 0.0, 1.0, &mut r);
        let truth = Tensor::<f32>::uniform(&[6, 5], 0.0, 1.0, &mut r).map(|v| v.round());
        // Monotone and fixes 0.5.
        let squashed = pred.map(|v| 0.5 + (v - 0.5) * gain as f32);
        let h = hamming_loss(&pred, &truth, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert_eq!(h, hamming_loss(&squashed, &truth, 0.5).unwrap());
    }

    #[test]
    fn cosine_distance_is_symmetric_and_zero_on_self(seed in any::<u64>(), n in 1usize..64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f32>::randn(&[n], 1.0, &mut r);
        let b = Tensor::<f32>::randn(&[n], 1.0, &mut r);
        prop_assert!(cosine_distance(a.data(), a.data()).unwrap() < 1e-6);
        prop_assert_eq!(
            cosine_distance(a.data(), b.data()).unwrap(),
            cosine_distance(b.data(), a.data()).unwrap()
        );
    }

    #[test]
    fn attribute_lists_round_trip(rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 40), 1..12)) {
        let list = AttrList {
            names: (0..40).map(|i| format!("Attr_{i}")).collect(),
            rows: rows.into_iter().enumerate().map(|(i, values)| AttrRow { file: format!("{i:06}.jpg"), values }).collect(),
        };
        prop_assert_eq!(parse_attr_list(&list.to_text()).unwrap(), list);
    }

    #[test]
    fn pixels_are_strictly_inside_range(b in any::<u8>()) {
        let v = to_pixels(b);
        prop_assert!(v > -1.0 && v < 1.0);
    }

    #[test]
    fn sprites_are_deterministic_and_in_range(seed in any::<u64>(), index in any::<u64>()) {
        let spec = SyntheticSpec::new(16, seed);
        let a = spec.item(index).unwrap();
        prop_assert_eq!(&a, &spec.item(index).unwrap());
        prop_assert!(a.pixels.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn edits_round_trip_through_text(name in "[a-z_]{1,12}", v in 0u8..3) {
        let value = match v { 0 => EditValue::Set(false), 1 => EditValue::Set(true), _ => EditValue::Flip };
        let e = Edit { name, value };
        prop_assert_eq!(e.to_string().parse::<Edit>().unwrap(), e);
    }

    #[test]
    fn double_flip_restores_binarized_labels(probs in prop::collection::vec(0.0f32..1.0, 4)) {
        let m = tiny_bundle(0);
        let c = Tensor::new(&[1, 4], probs.clone()).unwrap();
        let flips: Vec<Edit> = m.attributes.iter().map(|n| Edit { name: n.clone(), value: EditValue::Flip }).collect();
        let once = apply_edits(&m, &c, &flips).unwrap();
        let twice = apply_edits(&m, &once, &flips).unwrap();
        let rounded: Vec<f32> = probs.iter().map(|p| p.round()).collect();
        prop_assert_eq!(twice.data(), &rounded[..]);
    }
}

#[test]
fn ablation_settings_isolate_terms() {
    let base = LossWeights::default();
    let w = |s: AblationSetting| {
        let w = s.weights(&base);
        (w.lambda_per, w.lambda_pix, w.lambda_z)
    };
    assert_eq!(w(AblationSetting::PixelOnly), (0.0, 0.5, 0.0));
    assert_eq!(w(AblationSetting::ZOnly), (0.0, 0.0, 1.0));
    assert_eq!(w(AblationSetting::PixelPlusZ), (0.0, 0.5, 1.0));
    assert_eq!(w(AblationSetting::Integrated), (2.0, 0.5, 1.0));
}
