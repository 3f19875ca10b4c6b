mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sformer::data::{extract_patches, fit_pca, stratified_split, HsiCube, SplitSpec};
use sformer::ksa::KsaParams;
use sformer::metrics::{evaluate, report_from_confusion};
use sformer::model::{ModelConfig, ModelParams, Readout};
use sformer::nn::randomize;
use sformer::tensor::{conv2d, conv3d, softmax_rows, topk_row_threshold, ConvSpec, SelectionRate};
use sformer::tsa::{from_tokens, to_tokens, TsaParams};
use sformer::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_normalise_with_masks(rows in 1usize..12, cols in 1usize..12, seed: u64) {
        let mut r = rng(seed);
        let mut x = Tensor::from_fn([rows, cols], |_| 10.0 * common::normal(&mut r));
        for row in 0..rows {
            // Mask a random subset, always leaving one finite entry.
            let keep = r.random_range(0..cols);
            for c in 0..cols {
                if c != keep && r.random_bool(0.4) {
                    x.set(&[row, c], f64::NEG_INFINITY);
                }
            }
        }
        let y = softmax_rows(&x).unwrap();
        for row in 0..rows {
            let s: f64 = (0..cols).map(|c| y.at(&[row, c])).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            for c in 0..cols {
                if x.at(&[row, c]) == f64::NEG_INFINITY {
                    prop_assert_eq!(y.at(&[row, c]), 0.0);
                }
            }
        }
    }

    #[test]
    fn retained_count_is_ceiling(n in 1usize..=64, den in 1usize..=50, num_seed: usize, seed: u64) {
        let num = 1 + num_seed % den;
        let mut r = rng(seed);
        let a = Tensor::from_fn([3, n], |_| common::normal(&mut r));
        let (_, mask) = topk_row_threshold(&a, SelectionRate::new(num as f64 / den as f64).unwrap()).unwrap();
        for row in 0..3 {
            prop_assert_eq!(mask.retained_in_row(row), common::ceil_fraction(num, den, n));
        }
    }

    #[test]
    fn same_padding_preserves_extents(k in 0usize..3, dil in 1usize..3, h in 1usize..8, w in 1usize..8, d in 1usize..4) {
        let k = 2 * k + 1;
        let spec = ConvSpec::same(&[k, k], &[dil, dil], 1).unwrap();
        let y = conv2d(&Tensor::zeros([2, h, w]), &Tensor::zeros(spec.weight_shape(2, 3)), None, &spec).unwrap();
        prop_assert_eq!(y.shape(), &[3, h, w]);
        let spec = ConvSpec::same(&[1, k, k], &[1, dil, dil], 2).unwrap();
        let y = conv3d(&Tensor::zeros([2, d, h, w]), &Tensor::zeros(spec.weight_shape(2, 2)), None, &spec).unwrap();
        prop_assert_eq!(y.shape(), &[2, d, h, w]);
    }

    #[test]
    fn ksa_masks_and_shape(half in 1usize..4, w in 1usize..6, std in 0.1f64..3.0, seed: u64) {
        let mut r = rng(seed);
        let c = 2 * half;
        let mut p = KsaParams::new(c, &mut r).unwrap();
        randomize(&mut p, std, &mut r);
        let x = common::random_tensor(&[c, w, w], &mut r);
        let (out, cache) = p.forward(&x).unwrap();
        prop_assert_eq!(out.shape(), x.shape());
        let (c1, c2) = cache.spectral_masks();
        for (a, b) in c1.iter().zip(c2) {
            prop_assert!((a + b - 1.0).abs() < 1e-9);
        }
        // Moderate parameter scales keep the sigmoid away from saturation.
        if std < 1.0 {
            prop_assert!(cache.spatial_masks().data().iter().all(|&s| s > 0.0 && s < 1.0));
        }
    }

    #[test]
    fn ksa_shared_logit_shift_is_invisible(half in 1usize..4, w in 1usize..5, seed: u64) {
        let mut r = rng(seed);
        let c = 2 * half;
        let mut p = KsaParams::new(c, &mut r).unwrap();
        randomize(&mut p, 0.7, &mut r);
        let x = common::random_tensor(&[c, w, w], &mut r);
        let (_, base) = p.forward(&x).unwrap();
        let mut shifted = p.clone();
        for j in 0..half {
            let delta = common::normal(&mut r);
            shifted.m.data_mut()[j] += delta;
            shifted.n.data_mut()[j] += delta;
        }
        let (_, moved) = shifted.forward(&x).unwrap();
        let (a1, a2) = base.spectral_masks();
        let (b1, b2) = moved.spectral_masks();
        prop_assert!(common::max_abs_diff(a1, b1) < 1e-12);
        prop_assert!(common::max_abs_diff(a2, b2) < 1e-12);
    }

    #[test]
    fn tsa_attention_rows(heads in 1usize..3, gi in 0usize..3, h in 1usize..4, w in 1usize..4, tenths in 1usize..=10, seed: u64) {
        let mut r = rng(seed);
        let groups = 1 << gi;
        let c = heads * groups * 2;
        let mut p = TsaParams::new(c, heads, groups, SelectionRate::new(tenths as f64 / 10.0).unwrap(), &mut r).unwrap();
        randomize(&mut p, 0.5, &mut r);
        let (out, cache) = p.forward(&common::random_tensor(&[c, h, w], &mut r)).unwrap();
        prop_assert_eq!(out.shape(), &[c, h, w]);
        let n = groups * h * w;
        let m = common::ceil_fraction(tenths, 10, n);
        for head in 0..heads {
            let attn = cache.attention(head);
            let mask = cache.mask(head);
            prop_assert_eq!(attn.shape(), &[n, n]);
            for row in 0..n {
                prop_assert_eq!(mask.retained_in_row(row), m);
                let s: f64 = (0..n).map(|col| attn.at(&[row, col])).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                for col in 0..n {
                    if !mask.is_kept(row, col) {
                        prop_assert_eq!(attn.at(&[row, col]), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn one_group_gives_spatial_tokens(h in 1usize..5, w in 1usize..5, seed: u64) {
        let mut r = rng(seed);
        let p = TsaParams::new(4, 2, 1, SelectionRate::DENSE, &mut r).unwrap();
        let (_, cache) = p.forward(&common::random_tensor(&[4, h, w], &mut r)).unwrap();
        prop_assert_eq!(cache.dense_scores(0).shape(), &[h * w, h * w]);
    }

    #[test]
    fn tokens_round_trip(g in 1usize..4, c in 1usize..4, h in 1usize..4, w in 1usize..4, seed: u64) {
        let mut r = rng(seed);
        let v = common::random_tensor(&[g, c, h, w], &mut r);
        let t = to_tokens(&v).unwrap();
        prop_assert_eq!(t.shape(), &[g * h * w, c]);
        prop_assert_eq!(t.at(&[(g - 1) * h * w + (h - 1) * w, c - 1]), v.at(&[g - 1, c - 1, h - 1, 0]));
        prop_assert_eq!(from_tokens(&t, g, h, w).unwrap(), v);
    }

    #[test]
    fn mean_pool_ignores_spatial_order(c in 1usize..5, h in 1usize..5, w in 1usize..5, seed: u64) {
        let mut r = rng(seed);
        let x = common::random_tensor(&[c, h, w], &mut r);
        let plane = h * w;
        let mut perm: Vec<usize> = (0..plane).collect();
        for i in (1..plane).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = Tensor::from_fn([c, h, w], |i| x.data()[(i / plane) * plane + perm[i % plane]]);
        let a = Readout::MeanPool.apply(&x).unwrap();
        let b = Readout::MeanPool.apply(&permuted).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn pca_variances_do_not_increase(bands in 2usize..7, seed: u64) {
        let mut r = rng(seed);
        let (h, w) = (4, 6);
        let values: Vec<f64> = (0..bands * h * w).map(|_| common::normal(&mut r)).collect();
        let cube = HsiCube::new(bands, h, w, values, vec![0; h * w], vec![]).unwrap();
        let model = fit_pca(&cube, bands).unwrap();
        for pair in model.explained_variance.windows(2) {
            prop_assert!(pair[0] >= pair[1]);
        }
    }

    #[test]
    fn patch_centre_is_source_pixel(size in 1usize..8, h in 1usize..7, w in 1usize..7, seed: u64) {
        let mut r = rng(seed);
        let values: Vec<f64> = (0..2 * h * w).map(|_| common::normal(&mut r)).collect();
        let labels: Vec<u16> = (0..h * w).map(|_| r.random_range(0..=2)).collect();
        let cube = HsiCube::new(2, h, w, values.clone(), labels.clone(), vec!["a".into(), "b".into()]).unwrap();
        let set = extract_patches(&cube, size).unwrap();
        prop_assert_eq!(set.len(), labels.iter().filter(|&&l| l > 0).count());
        let mid = (size - 1) / 2;
        for (&pix, patch) in set.pixels.iter().zip(&set.samples) {
            for b in 0..2 {
                prop_assert_eq!(patch.at(&[b, mid, mid]), values[b * h * w + pix]);
            }
        }
    }

    #[test]
    fn splits_partition_labeled_pixels(n in 1usize..4, classes in 1usize..5, seed: u64) {
        let mut r = rng(seed);
        let mut labels: Vec<u16> = (0..200).map(|_| r.random_range(0..=classes as u16)).collect();
        // Guarantee every class is large enough for the split.
        for (i, l) in labels.iter_mut().take(classes * (n + 1)).enumerate() {
            *l = (i / (n + 1) + 1) as u16;
        }
        let spec = SplitSpec { train_per_class: n, seed };
        let split = stratified_split(&labels, classes, spec).unwrap();
        prop_assert_eq!(&split, &stratified_split(&labels, classes, spec).unwrap());
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        let labeled: Vec<usize> = (0..labels.len()).filter(|&p| labels[p] > 0).collect();
        prop_assert_eq!(all, labeled);
        prop_assert_eq!(split.train.len(), n * classes);
    }

    #[test]
    fn kappa_is_one_exactly_for_diagonal(k in 1usize..6, seed: u64, diagonal: bool) {
        let mut r = rng(seed);
        let mut m = vec![vec![0u64; k]; k];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                if i == j || !diagonal {
                    *cell = r.random_range(0..20);
                }
            }
        }
        m[0][0] += 1;
        let is_diagonal = (0..k).all(|i| (0..k).all(|j| i == j || m[i][j] == 0));
        let kappa = report_from_confusion(m).unwrap().kappa;
        if is_diagonal {
            prop_assert!((kappa - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(kappa < 1.0 - 1e-12);
        }
    }

    #[test]
    fn overall_accuracy_ignores_class_relabelling(k in 2usize..7, n in 1usize..100, seed: u64) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let a = evaluate(&preds, &labels, k).unwrap();
        let relabel = |v: &[usize]| v.iter().map(|&c| perm[c]).collect::<Vec<_>>();
        let b = evaluate(&relabel(&preds), &relabel(&labels), k).unwrap();
        prop_assert_eq!(a.overall_accuracy, b.overall_accuracy);
        prop_assert!((a.kappa - b.kappa).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn batch_order_only_permutes_logits(seed: u64, swap_a in 0usize..3, swap_b in 0usize..3) {
        let mut r = rng(seed);
        let mut model = ModelParams::new(ModelConfig::tiny(3, 4), &mut r).unwrap();
        randomize(&mut model, 0.3, &mut r);
        let batch = common::random_tensor(&[3, 3, 4, 4], &mut r);
        let sample = 3 * 16;
        let mut swapped = batch.clone();
        for i in 0..sample {
            swapped.data_mut()[swap_a * sample + i] = batch.data()[swap_b * sample + i];
            swapped.data_mut()[swap_b * sample + i] = batch.data()[swap_a * sample + i];
        }
        let a = model.forward(&batch, false).unwrap().logits;
        let again = model.forward(&batch, false).unwrap().logits;
        prop_assert_eq!(&a, &again);
        let b = model.forward(&swapped, false).unwrap().logits;
        for i in 0..3 {
            let src = if i == swap_a { swap_b } else if i == swap_b { swap_a } else { i };
            for c in 0..4 {
                prop_assert_eq!(b.at(&[i, c]), a.at(&[src, c]));
            }
        }
    }
}

#[test]
fn identical_patches_give_identical_logits() {
    let mut r = rng(1);
    let model = ModelParams::new(ModelConfig::tiny(3, 2), &mut r).unwrap();
    let one = common::random_tensor(&[3, 4, 4], &mut r);
    let batch = Tensor::new([2, 3, 4, 4], [one.data(), one.data()].concat()).unwrap();
    let logits = model.forward(&batch, false).unwrap().logits;
    assert_eq!(logits.data()[..2], logits.data()[2..]);
}
