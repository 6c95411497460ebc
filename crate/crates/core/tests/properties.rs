use proptest::prelude::*;

use cmems::datamodel::{resize_nearest, ProbMap, PseudoLabel, Target};
use cmems::evalmetrics::{dsc_volume, hd95_volume};
use cmems::objective::{ce_loss, cmfp_loss, cmip_loss, dice_loss, seg_loss, softmax_probs};
use cmems::tensor::Tensor;

const K: usize = 3;
const SIDE: usize = 6;
const PLANE: usize = SIDE * SIDE;

fn probs(logits: &[f64]) -> ProbMap<f64> {
    softmax_probs(&Tensor::from_vec(logits.to_vec(), K, 1, SIDE, SIDE)).unwrap()
}

fn pseudo(classes: Vec<u8>, valid: Vec<bool>) -> PseudoLabel {
    PseudoLabel { classes, valid, n: 1, height: SIDE, width: SIDE }
}

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, K * PLANE)
}

fn labels() -> impl Strategy<Value = (Vec<u8>, Vec<bool>)> {
    (
        prop::collection::vec(0..K as u8, PLANE),
        prop::collection::vec(any::<bool>(), PLANE),
    )
}

fn volume(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![3 => Just(0u8), 1 => Just(1u8), 1 => Just(2u8)], len)
}

proptest! {
    #[test]
    fn losses_are_finite_and_nonnegative(z in logits(), (c, v) in labels()) {
        let p = probs(&z);
        let t = Target { classes: &c, valid: Some(&v) };
        for l in [ce_loss(&p, t).unwrap(), dice_loss(&p, t).unwrap(), seg_loss(&p, t).unwrap()] {
            prop_assert!(l.is_finite() && l >= 0.0, "{l}");
        }
    }

    #[test]
    fn consistency_losses_swap_with_networks(za in logits(), zb in logits(), (ca, va) in labels(), (cb, vb) in labels()) {
        let (p, q) = (probs(&za), probs(&zb));
        let (a, b) = (pseudo(ca, va), pseudo(cb, vb));
        prop_assert_eq!(cmip_loss([&p, &q], [&a, &b]).unwrap(), cmip_loss([&q, &p], [&b, &a]).unwrap());
        prop_assert_eq!(cmfp_loss([&p, &q], [&a, &b]).unwrap(), cmfp_loss([&q, &p], [&b, &a]).unwrap());
    }

    #[test]
    fn dsc_and_hd95_are_symmetric(p in volume(2 * 7 * 5), g in volume(2 * 7 * 5), k in 0u8..3) {
        let dims = [2, 7, 5];
        prop_assert_eq!(dsc_volume(&p, &g, k), dsc_volume(&g, &p, k));
        prop_assert_eq!(hd95_volume(&p, &g, dims, k).unwrap(), hd95_volume(&g, &p, dims, k).unwrap());
        let d = dsc_volume(&p, &g, k);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn dsc_survives_nearest_upscaling(p in volume(8 * 8), g in volume(8 * 8), k in 0u8..3) {
        let up = |m: &[u8]| resize_nearest(m, 8, 8, 16, 16);
        prop_assert_eq!(dsc_volume(&p, &g, k), dsc_volume(&up(&p), &up(&g), k));
    }
}
