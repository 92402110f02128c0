mod common;

use capsnet::capsule::{route, Activation, RoutingCapsuleConfig};
use capsnet::config::{Dataset, RunConfig};
use capsnet::data::{batches, permutation, AugmentationConfig, DatasetSplit, SplitName};
use capsnet::ensemble::mean_scores;
use capsnet::loss::{margin_loss, LossConfig};
use capsnet::model::{argmax, ConvLayerConfig};
use capsnet::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn vectors(max_n: usize, max_d: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_n, 1..=max_d).prop_flat_map(|(n, d)| (Just(n), Just(d), prop::collection::vec(-50.0f64..50.0, n * d)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn activations_shrink_into_unit_ball_and_keep_direction((n, d, data) in vectors(6, 16)) {
        let s = Tensor::from_vec([n, d], data).unwrap();
        for act in [Activation::Squash, Activation::Custom] {
            let v = act.apply_tensor(&s);
            for (a, b) in s.data().chunks(d).zip(v.data().chunks(d)) {
                let (na, nb) = (norm(a), norm(b));
                prop_assert!((0.0..1.0).contains(&nb));
                if na > 1e-3 {
                    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                    prop_assert!((cos - 1.0).abs() < 1e-9, "cosine {cos}");
                }
            }
        }
    }

    #[test]
    fn couplings_are_distributions(nin in 1usize..12, nout in 1usize..6, iterations in 1usize..5, seed in any::<u64>()) {
        let mut g = common::rng(seed);
        let u = common::uniform(&[nin, 4], &mut g);
        let w = common::uniform(&[nin, nout, 3, 4], &mut g);
        let cfg = RoutingCapsuleConfig { num_out_capsules: nout, out_dim: 3, routing_iterations: iterations };
        let (_, state) = route(&u, &cfg, &w, Activation::Squash).unwrap();
        prop_assert_eq!(state.coupling_history.len(), iterations);
        for c in &state.coupling_history {
            for row in c.data().chunks(nout) {
                prop_assert!(row.iter().all(|&x| x > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
        prop_assert!(state.coupling_history[0].data().iter().all(|&x| x == 1.0 / nout as f64));
    }

    #[test]
    fn margin_loss_is_nonnegative_and_zero_when_separated(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 10), 0usize..10), 1..6),
    ) {
        let cfg = LossConfig::default();
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.0.clone()).collect();
        let tape = Tape::new();
        let l = margin_loss(tape.constant(Tensor::from_vec([rows.len(), 10], data).unwrap()), &labels, 10, &cfg).unwrap();
        prop_assert!(l.value().data()[0] >= 0.0);

        let separated: Vec<f64> = labels.iter().flat_map(|&t| (0..10).map(move |k| if k == t { 0.95 } else { 0.05 })).collect();
        let l = margin_loss(tape.constant(Tensor::from_vec([rows.len(), 10], separated).unwrap()), &labels, 10, &cfg).unwrap();
        prop_assert_eq!(l.value().data()[0], 0.0);
    }

    #[test]
    fn permutations_visit_every_index_once(n in 0usize..300, shuffle in any::<u64>(), epoch in any::<u64>()) {
        let mut p = permutation(n, shuffle, epoch);
        prop_assert_eq!(&p, &permutation(n, shuffle, epoch));
        p.sort_unstable();
        prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn crops_are_sub_windows(n in 1usize..12, crop in 1usize..=8, batch in 1usize..5, epoch in any::<u64>()) {
        let pixels: Vec<u8> = (0..n * 2 * 8 * 8).map(|i| (i * 37 % 251) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        let split = DatasetSplit::new(SplitName::Train, 2, 8, 8, 3, pixels, labels).unwrap();
        let mut seen = 0;
        for b in batches::<f64>(&split, batch, epoch, &AugmentationConfig::crop(crop)) {
            prop_assert_eq!(b.images.shape(), &[b.labels.len(), 2, crop, crop]);
            for (k, (&idx, &(oy, ox))) in b.indices.iter().zip(&b.offsets).enumerate() {
                prop_assert!(oy + crop <= 8 && ox + crop <= 8);
                prop_assert_eq!(b.labels[k], split.label(idx));
                let src = split.image_bytes(idx);
                for c in 0..2 {
                    for y in 0..crop {
                        for x in 0..crop {
                            let got = b.images.data()[((k * 2 + c) * crop + y) * crop + x];
                            let want = src[c * 64 + (oy + y) * 8 + ox + x] as f64 / 255.0;
                            prop_assert_eq!(got, want);
                        }
                    }
                }
            }
            seen += b.labels.len();
        }
        prop_assert_eq!(seen, n);
    }

    #[test]
    fn config_text_round_trips(
        mnist in any::<bool>(),
        seed in any::<u64>(),
        nota in any::<bool>(),
        custom in any::<bool>(),
        convs in prop::collection::vec((1usize..300, 1usize..4), 0..3),
        stack in prop::collection::vec((1usize..20, 1usize..20, 1usize..5), 0..3),
        hidden in prop::collection::vec(1usize..2000, 0..4),
        lr in 1e-6f64..1.0,
        recon in 0.0f64..1.0,
        epochs in 1usize..100,
        batch in 1usize..512,
    ) {
        let mut cfg = RunConfig {
            dataset: if mnist { Dataset::Mnist } else { Dataset::Cifar10 },
            ..RunConfig::default()
        };
        cfg.model.seed = seed;
        cfg.model.nota = nota;
        cfg.model.activation = if custom { Activation::Custom } else { Activation::Squash };
        cfg.model.conv_layers = convs.iter().map(|&(f, k)| ConvLayerConfig::new(f, k, 1)).collect();
        cfg.model.stacked_capsule_layers = stack
            .iter()
            .map(|&(n, d, r)| RoutingCapsuleConfig { num_out_capsules: n, out_dim: d, routing_iterations: r })
            .collect();
        cfg.model.decoder.hidden = hidden;
        cfg.model.loss.reconstruction_scale = recon;
        cfg.train.adam.lr = lr;
        cfg.train.epochs = epochs;
        cfg.train.batch_size = batch;
        cfg.sync_derived();
        // Only shapes that validate are representable as config files.
        prop_assume!(cfg.validate().is_ok());
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn ensemble_mean_ignores_member_order(
        tables in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 12), 1..6),
        rotate in 0usize..6,
    ) {
        let tensors: Vec<Tensor<f32>> = tables.iter().map(|t| Tensor::from_vec([3, 4], t.clone()).unwrap()).collect();
        let mut shuffled = tensors.clone();
        shuffled.rotate_left(rotate % tensors.len());
        shuffled.reverse();
        prop_assert_eq!(mean_scores(&tensors), mean_scores(&shuffled));
    }

    #[test]
    fn argmax_survives_positive_scaling(row in prop::collection::vec(0.0f64..1.0, 1..12), k in 1e-3f64..1e3) {
        let scaled: Vec<f64> = row.iter().map(|x| x * k).collect();
        prop_assert_eq!(argmax(&row), argmax(&scaled));
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut g = common::rng(seed);
        let a = common::uniform(&[m, k], &mut g);
        let b = common::uniform(&[k, n], &mut g);
        let tape = Tape::new();
        let got = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value();
        prop_assert!(common::max_abs_diff(&got, &common::naive_matmul(&a, &b)) < 1e-12);
    }
}
