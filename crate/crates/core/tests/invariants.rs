//! Property tests for the structural invariants of each stage.

use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;

use hwid_core::calibrate::{ClassifierState, LabeledImage};
use hwid_core::contrastive::{info_nce, ContrastConfig};
use hwid_core::corpus::{
    defect_mask, inject_forgeries, plan_corpus, CorpusParams, DefectKind, DefectSpec, Split,
    WriterStyle,
};
use hwid_core::encoder::{encode, init_state, Branch, EncoderConfig};
use hwid_core::evaluate::{report_from_scores, Condition};
use hwid_core::matching::{boost_step, prune_step, MatchingConfig, WeightVector};
use hwid_core::patches::{patchify, unpatchify};
use hwid_core::prefilter::{block_spectral_energy, window_weights, FilterConfig, WindowProfile};
use hwid_core::Image;

fn image(h: usize, w: usize, c: usize, values: &[f64]) -> Image {
    let data = (0..h * w * c).map(|i| values[i % values.len()]).collect();
    Image::from_vec(h, w, c, data).unwrap()
}

proptest! {
    #[test]
    fn defect_mask_covers_the_requested_area(
        kind in 0usize..4,
        ratio in 0.02f64..=1.0,
        seed in any::<u64>(),
        side in prop::sample::select(vec![64usize, 96, 128]),
    ) {
        let spec = DefectSpec { kind: DefectKind::ALL[kind], area_ratio: ratio, seed };
        let (mask, strength) = defect_mask(side, side, &spec).unwrap();
        let area = mask.iter().filter(|&&m| m).count() as f64;
        let target = ratio * (side * side) as f64;
        prop_assert!((area - target).abs() <= 0.02 * target.max(1.0), "{area} vs {target}");
        for (m, s) in mask.iter().zip(&strength) {
            if *m {
                prop_assert!((0.0..=1.0).contains(s));
            }
        }
    }

    #[test]
    fn writer_styles_are_pairwise_distinct(corpus_seed in any::<u64>(), writers in 2u32..48) {
        let mut seen = HashSet::new();
        for id in 0..writers {
            let s = WriterStyle::derive(corpus_seed, id);
            let key = (s.stroke_thickness.to_bits(), s.slant.to_bits(), s.glyph_density.to_bits());
            prop_assert!(seen.insert(key), "writer {id} repeats a style");
        }
    }

    #[test]
    fn corpus_plans_have_unique_ids_and_balanced_calibration(
        seed in any::<u64>(),
        writers in 2u32..6,
        calibrate in 1usize..3,
        test in 1usize..3,
        extra in 1usize..6,
        forgery in 0.0f64..=0.5,
    ) {
        let params = CorpusParams {
            num_writers: writers,
            samples_per_writer: calibrate + test + extra,
            image_height: 64,
            image_width: 64,
            seed,
            calibrate_per_writer: calibrate,
            test_per_writer: test,
            ..CorpusParams::default()
        };
        let manifest = plan_corpus(&params).unwrap();
        let ids: HashSet<&str> = manifest.samples.iter().map(|r| r.sample_id.as_str()).collect();
        prop_assert_eq!(ids.len(), manifest.samples.len());
        let mut per_writer: BTreeMap<u32, usize> = BTreeMap::new();
        for r in manifest.split(Split::Calibrate) {
            *per_writer.entry(r.writer_id).or_default() += 1;
        }
        prop_assert_eq!(per_writer.len(), writers as usize);
        prop_assert!(per_writer.values().all(|&n| n == calibrate));

        let forged = inject_forgeries(&manifest, forgery, seed ^ 1).unwrap();
        for r in forged.samples.iter().filter(|r| r.forged) {
            let truth = r.true_writer_id;
            prop_assert!(truth.is_some() && truth != Some(r.writer_id));
        }
    }

    #[test]
    fn windows_integrate_to_one(size_log in 0u32..6, gaussian in any::<bool>()) {
        let profile = if gaussian { WindowProfile::Gaussian } else { WindowProfile::RaisedCosine };
        let w = window_weights(1 << size_log, profile);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_energies_are_nonnegative_one_per_block(
        block_log in 0u32..4,
        rows in 1usize..5,
        cols in 1usize..5,
        values in prop::collection::vec(0.0f64..=1.0, 1..64),
    ) {
        let bs = 1usize << block_log;
        let img = image(rows * bs, cols * bs, 1, &values);
        let config = FilterConfig { block_size: bs, ..FilterConfig::default() };
        let map = block_spectral_energy(&img, &config).unwrap();
        prop_assert_eq!(map.block_grid, (rows, cols));
        prop_assert_eq!(map.per_block_energy.len(), rows * cols);
        prop_assert!(map.per_block_energy.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn patch_grid_is_row_major_and_lossless(
        p in 1usize..6,
        rows in 1usize..6,
        cols in 1usize..6,
        channels in 1usize..4,
        values in prop::collection::vec(0.0f64..=1.0, 1..50),
    ) {
        let img = image(rows * p, cols * p, channels, &values);
        let seq = patchify(&img, p).unwrap();
        prop_assert_eq!(seq.len(), rows * cols);
        prop_assert_eq!(seq.grid, (rows, cols));
        // first value of patch (r, c) is pixel (r·p, c·p)
        for r in 0..rows {
            for c in 0..cols {
                prop_assert_eq!(seq.patches.row(r * cols + c)[0].to_bits(), img.get(r * p, c * p, 0).to_bits());
            }
        }
        prop_assert_eq!(unpatchify(&seq).unwrap(), img);
    }

    #[test]
    fn weights_stay_on_the_simplex(
        m in 1usize..40,
        min_active in 1usize..40,
        boost_count in 1usize..40,
        ops in prop::collection::vec((any::<bool>(), prop::collection::vec(0.0f64..1.0, 40)), 1..30),
    ) {
        let config = MatchingConfig {
            min_active,
            boost_count: boost_count.min(m),
            ..MatchingConfig::default()
        };
        let floor = min_active.min(m);
        let mut w = WeightVector::uniform(m).unwrap();
        for (boost, scores) in ops {
            w = if boost {
                boost_step(&w, &scores[..m], &config).unwrap()
            } else {
                let next = prune_step(&w, &scores[..m], &config).unwrap();
                prop_assert!(next.active_count() >= floor);
                next
            };
            prop_assert!((w.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (&v, &a) in w.weights().iter().zip(w.active()) {
                prop_assert!(if a { v >= 0.0 } else { v == 0.0 }, "weight {} active {}", v, a);
            }
        }
    }

    #[test]
    fn info_nce_is_nonnegative_and_ignores_negative_order(
        sims in prop::collection::vec(-1.0f64..=1.0, 2..9),
        tau in 0.05f64..2.0,
        rotate in 0usize..8,
    ) {
        let keys: Vec<[f64; 1]> = sims.iter().map(|&s| [s]).collect();
        let refs: Vec<&[f64]> = keys.iter().map(|k| &k[..]).collect();
        let l = info_nce(&[1.0], &refs, 0, tau).unwrap();
        prop_assert!(l >= 0.0);
        let mut negatives = refs[1..].to_vec();
        let k = rotate % negatives.len();
        negatives.rotate_left(k);
        let mut shuffled = vec![refs[0]];
        shuffled.extend(negatives);
        let l2 = info_nce(&[1.0], &shuffled, 0, tau).unwrap();
        prop_assert!((l - l2).abs() < 1e-12);
    }

    #[test]
    fn contrast_config_needs_positive_temperature_and_negatives(
        tau in -1.0f64..1.0,
        batch in 1usize..4,
        queue in 0usize..3,
    ) {
        let cfg = ContrastConfig { temperature: tau, batch_size: batch, queue_size: queue, ..ContrastConfig::default() };
        let legal = tau > 0.0 && (batch >= 2 || queue > 0);
        prop_assert_eq!(cfg.validate().is_ok(), legal);
    }

    #[test]
    fn reports_are_consistent_with_their_scores(
        writers in 1u32..9,
        samples in prop::collection::vec((0u32..9, prop::collection::vec(-1.0f64..1.0, 9)), 1..30),
    ) {
        let state = init_state(&EncoderConfig { embed_dim: 8, heads: 2, token_len: 4, patch_size: 2, ..EncoderConfig::default() }).unwrap();
        let labels: Vec<u32> = (0..writers).map(|w| 10 + 3 * w).collect();
        let clf = ClassifierState::from_encoder(&state, labels.clone(), 0).unwrap();
        let classes: HashSet<usize> = labels.iter().map(|&w| clf.class_of(w).unwrap()).collect();
        prop_assert_eq!(classes.len(), labels.len());

        let images: Vec<LabeledImage> = samples
            .iter()
            .enumerate()
            .map(|(i, (w, _))| LabeledImage {
                id: format!("s{i}"),
                writer: labels[*w as usize % labels.len()],
                forged: false,
                image: Image::zeros(4, 4, 1),
            })
            .collect();
        let scores: Vec<Vec<f64>> = samples.iter().map(|(_, s)| s[..labels.len()].to_vec()).collect();
        let r = report_from_scores(&clf, &images, &scores, Condition::BASELINE, 0).unwrap();
        prop_assert!(r.top5 >= r.top1);
        for (c, &w) in labels.iter().enumerate() {
            let count = images.iter().filter(|s| s.writer == w).count() as u64;
            prop_assert_eq!(r.confusion[c].iter().sum::<u64>(), count);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoders_pair_branches_and_emit_one_finite_row_per_patch(
        heads in 1usize..4,
        head_dim in 1usize..4,
        depth in 1usize..3,
        grid in 1usize..4,
        values in prop::collection::vec(0.0f64..=1.0, 1..32),
        seed in any::<u64>(),
    ) {
        let config = EncoderConfig {
            embed_dim: heads * head_dim,
            depth,
            heads,
            token_len: grid * grid,
            patch_size: 2,
            seed,
            ..EncoderConfig::default()
        };
        let state = init_state(&config).unwrap();
        state.online.prefix(state.momentum.len()).ensure_matches(&state.momentum, "branches").unwrap();
        prop_assert!(state.momentum.names().iter().all(|n| !n.starts_with("prediction")));
        let seq = patchify(&image(2 * grid, 2 * grid, 1, &values), 2).unwrap();
        for branch in [Branch::Online, Branch::Momentum] {
            let tokens = encode(&seq, None, branch, &state).unwrap();
            prop_assert_eq!(tokens.shape(), (grid * grid, config.embed_dim));
            prop_assert!(tokens.is_finite());
        }
    }
}
