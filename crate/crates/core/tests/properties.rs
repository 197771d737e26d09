use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lungseg::attr_text::{AttributeLabels, AttributeParser, AttributeTaxonomy, NUM_ATTRIBUTES};
use lungseg::config::RunConfig;
use lungseg::data::{augment, synth_generate, AugmentConfig, Mask, SynthConfig};
use lungseg::eval::{dice_metric, jaccard_metric};
use lungseg::losses::{pseudo_labels, seg_loss, seg_loss_grad};
use lungseg::tensor::Tensor;

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
        (
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
            .prop_map(move |(a, b)| {
                (
                    Mask::from_fn(h, w, |y, x| a[y * w + x]),
                    Mask::from_fn(h, w, |y, x| b[y * w + x]),
                )
            })
    })
}

fn labels() -> impl Strategy<Value = AttributeLabels> {
    let sizes = AttributeTaxonomy::default().sizes();
    (0..sizes[0], 0..sizes[1], 0..sizes[2], 0..sizes[3]).prop_map(|(a, b, c, d)| AttributeLabels {
        categories: [a, b, c, d],
    })
}

proptest! {
    #[test]
    fn dice_and_jaccard_agree((a, b) in mask_pair()) {
        let d = dice_metric(&a, &b).unwrap();
        let j = jaccard_metric(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        prop_assert_eq!(d, dice_metric(&b, &a).unwrap());
        prop_assert_eq!(dice_metric(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn pseudo_labels_shrink_as_delta_grows(
        logits in prop::collection::vec(-20.0f64..20.0, 36),
        d1 in 0.01f64..0.99,
        d2 in 0.01f64..0.99,
    ) {
        let p = Tensor::from_vec(&[1, 6, 6], logits).unwrap();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let small = pseudo_labels(&p, hi).unwrap();
        let big = pseudo_labels(&p, lo).unwrap();
        prop_assert!(small.count() <= big.count());
        for (s, b) in small.bits().iter().zip(big.bits()) {
            prop_assert!(s <= b);
        }
    }

    #[test]
    fn seg_loss_is_finite_and_non_negative(
        logits in prop::collection::vec(-1e4f64..1e4, 16),
        targets in prop::collection::vec(any::<bool>(), 16),
    ) {
        let p = Tensor::from_vec(&[1, 4, 4], logits).unwrap();
        let y = Tensor::from_vec(&[1, 4, 4], targets.iter().map(|&t| t as u8 as f64).collect()).unwrap();
        let (l, g) = seg_loss_grad(&p, &y).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        prop_assert!(g.all_finite());
        prop_assert_eq!(l, seg_loss(&p, &y).unwrap());
    }

    #[test]
    fn sentences_and_descriptions_round_trip(l in labels()) {
        let parser = AttributeParser::default();
        let sentence = parser.render_sentence(&l).unwrap();
        prop_assert_eq!(parser.parse(&sentence).unwrap(), l);
        let desc = parser.to_attribute_description(&l).unwrap();
        prop_assert_eq!(parser.parse(&desc.text).unwrap(), l);
    }

    #[test]
    fn config_overrides_round_trip(delta in 0.01f64..0.99, epochs in 0usize..500, aica in any::<bool>()) {
        let mut c = RunConfig::default();
        c.set("delta", &delta.to_string()).unwrap();
        c.set("epochs", &epochs.to_string()).unwrap();
        c.set("use_aica", &aica.to_string()).unwrap();
        prop_assert_eq!((c.delta, c.epochs, c.use_aica), (delta, epochs, aica));
        prop_assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn double_flips_are_identities(index in 0u64..1000, h in any::<bool>()) {
        let cfg = SynthConfig { height: 64, width: 64, ..SynthConfig::default() };
        let s = synth_generate(index, 1, &cfg).unwrap().remove(0);
        let parser = AttributeParser::default();
        let flip = AugmentConfig {
            max_rotation_deg: 0.0,
            hflip_prob: if h { 1.0 } else { 0.0 },
            vflip_prob: if h { 0.0 } else { 1.0 },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(index);
        let once = augment(&s, &flip, &parser, &mut rng).unwrap();
        let twice = augment(&once, &flip, &parser, &mut rng).unwrap();
        prop_assert_eq!(&twice.image, &s.image);
        prop_assert_eq!(&twice.coarse_mask, &s.coarse_mask);
        prop_assert_eq!(&twice.gt_mask, &s.gt_mask);
        prop_assert_eq!(&twice.attr_labels, &s.attr_labels);
        // The flipped labels describe the flipped image.
        prop_assert_eq!(parser.parse(&once.raw_text).unwrap(), once.attr_labels);
        if h {
            let c = s.attr_labels.categories;
            prop_assert_eq!(once.attr_labels.categories, [c[0], c[1], c[3], c[2]]);
        }
    }

    #[test]
    fn generated_labels_match_parsed_text(seed in 0u64..1000) {
        let cfg = SynthConfig { height: 64, width: 64, ..SynthConfig::default() };
        let parser = AttributeParser::default();
        for s in synth_generate(seed, 3, &cfg).unwrap() {
            prop_assert_eq!(parser.parse(&s.raw_text).unwrap(), s.attr_labels);
            prop_assert_eq!(s.attr_labels.categories.len(), NUM_ATTRIBUTES);
            let img = s.image.data();
            prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
