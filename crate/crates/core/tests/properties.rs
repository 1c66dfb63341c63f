use std::collections::BTreeSet;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

use cotrain_core::io;
use cotrain_core::labeling::{
    combine_void, compute_class_thresholds, fuse, select_top_n, ClassConfidenceSample, PseudoLabelSet,
};
use cotrain_core::metrics::{iou_per_class, ConfusionMatrix};
use cotrain_core::mixing::{classmix_collage, collage_classes, compose_batches, LabeledImage, MixSources, SampleOrigin, SourcePool, TargetImages};
use cotrain_core::pipeline::{dynamic_threshold, ensemble_confidence, sort_rank};
use cotrain_core::preprocess::{lab_align_raster, weights_from_maps, LabAccumulator, LabRaster};
use cotrain_core::trainer::protocol::{decode, encode, ImageRef, Request};
use cotrain_core::trainer::{toy_fit, toy_predict, ToyModelState, TrainerConfig};
use cotrain_core::{
    mean_labeled_confidence, BranchTag, ConfidenceStack, CurriculumParams, LabelMap, LabelSpace, MixParams,
    PseudoLabeledImage, ThresholdVector, VOID_ID,
};

const LEVELS: [f32; 5] = [0.3, 0.5, 0.7, 0.9, 1.0];

/// Labels in `0..nc` or void, with matching confidences.
fn pixels(n: usize, nc: u8) -> impl Strategy<Value = Vec<(u8, f32)>> {
    prop::collection::vec(
        prop_oneof![
            1 => Just((VOID_ID, 0.0f32)),
            3 => (0..nc, 0..LEVELS.len()).prop_map(|(l, i)| (l, LEVELS[i])),
        ],
        n,
    )
}

fn pli(id: &str, w: usize, h: usize, px: &[(u8, f32)]) -> PseudoLabeledImage {
    let labels = LabelMap::new(w, h, px.iter().map(|p| p.0).collect()).unwrap();
    PseudoLabeledImage::new(id, labels, px.iter().map(|p| p.1).collect(), 0, BranchTag::Branch1).unwrap()
}

/// Up to 8 images `img0..img7` of 2x2 pixels.
fn pli_set(nc: u8) -> impl Strategy<Value = Vec<PseudoLabeledImage>> {
    prop::collection::btree_map(0..8u8, pixels(4, nc), 0..8).prop_map(|m| {
        m.into_iter()
            .map(|(i, px)| pli(&format!("img{i}"), 2, 2, &px))
            .collect()
    })
}

fn stack(w: usize, h: usize, nc: usize) -> impl Strategy<Value = ConfidenceStack> {
    prop::collection::vec(prop::collection::vec(0.01f32..1.0, nc), w * h).prop_map(move |raw| {
        let n = w * h;
        let mut values = vec![0f32; n * nc];
        for (p, row) in raw.iter().enumerate() {
            let sum: f32 = row.iter().sum();
            for (c, v) in row.iter().enumerate() {
                values[c * n + p] = (v / sum).min(1.0);
            }
        }
        ConfidenceStack::new(w, h, nc, values).unwrap()
    })
}

fn image(w: u32, h: u32, seed: u8) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        Rgb([seed.wrapping_mul(31).wrapping_add(x as u8), (y as u8).wrapping_mul(7), seed ^ (x as u8)])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn image_confidence_survives_storage(set in pli_set(4)) {
        let dir = tempfile::tempdir().unwrap();
        let set: PseudoLabelSet = set.into_iter().collect();
        io::save_pseudo_set(dir.path(), &set, None).unwrap();
        let (back, _) = io::load_pseudo_set(dir.path()).unwrap();
        for (a, b) in set.iter().zip(back.iter()) {
            prop_assert_eq!(a.image_confidence().to_bits(), b.image_confidence().to_bits());
            prop_assert_eq!(
                mean_labeled_confidence(b.labels(), b.pixel_confidence()).to_bits(),
                b.image_confidence().to_bits()
            );
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn thresholds_stay_in_clamp_bounds(
        vs in prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 0..40), 1..6),
        p in 0.0f64..=1.0,
        lo in 0.0f32..=1.0,
        span in 0.0f32..=1.0,
    ) {
        let t = CurriculumParams { p_min: 0.0, p_max: 1.0, p_step: 0.0, c_min: lo, c_max: (lo + span).min(1.0) };
        let vct = compute_class_thresholds(&ClassConfidenceSample::from_vectors(vs), p, &t, 0);
        for &x in &vct.per_class {
            prop_assert!(t.c_min <= x && x <= t.c_max);
        }
    }

    #[test]
    fn accepted_fraction_tracks_p(v in prop::collection::vec(0.001f32..=1.0, 1..300), p in 0.0f64..=1.0) {
        let open = CurriculumParams { p_min: 0.0, p_max: 1.0, p_step: 0.0, c_min: 0.0, c_max: 1.0 };
        let mut distinct = v.clone();
        distinct.sort_by(|a, b| a.total_cmp(b));
        distinct.dedup();
        prop_assume!(distinct.len() == v.len());
        let t = compute_class_thresholds(&ClassConfidenceSample::from_vectors(vec![v.clone()]), p, &open, 0).per_class[0];
        let accepted = v.iter().filter(|&&x| x >= t).count() as f64 / v.len() as f64;
        let step = 1.0 / v.len() as f64;
        prop_assert!(accepted >= p.min(1.0 - step) - 1e-12 && accepted <= p + step + 1e-12, "{} vs {}", accepted, p);
    }

    #[test]
    fn confusion_counts_partition_pixels(
        nc in 1usize..6,
        pairs in prop::collection::vec((prop::collection::vec(0u8..8, 36), prop::collection::vec(0u8..8, 36)), 1..5),
    ) {
        let space = LabelSpace::new((0..nc).map(|c| format!("c{c}"))).unwrap();
        let fold = |v: &Vec<u8>| -> LabelMap {
            LabelMap::new(6, 6, v.iter().map(|&x| if (x as usize) < nc { x } else { VOID_ID }).collect()).unwrap()
        };
        let maps: Vec<(LabelMap, LabelMap)> = pairs.iter().map(|(p, g)| (fold(p), fold(g))).collect();
        let mut forward = ConfusionMatrix::new(nc);
        for (p, g) in &maps {
            forward.accumulate(p, g, &space).unwrap();
        }
        let mut backward = ConfusionMatrix::new(nc);
        for (p, g) in maps.iter().rev() {
            let mut one = ConfusionMatrix::new(nc);
            one.accumulate(p, g, &space).unwrap();
            backward.merge(&one).unwrap();
        }
        prop_assert_eq!(&forward, &backward);

        let mut sum = forward.ignored_pixels();
        for g in 0..nc {
            sum += forward.void_predictions(g);
            for p in 0..nc {
                sum += forward.count(g, p);
            }
        }
        prop_assert_eq!(sum, forward.total_pixels());
        prop_assert_eq!(sum, 36 * maps.len() as u64);
        for iou in iou_per_class(&forward).into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&iou));
        }
    }

    #[test]
    fn alignment_is_idempotent(px in prop::collection::vec(any::<[u8; 3]>(), 2..64)) {
        let img = RgbImage::from_fn(px.len() as u32, 1, |x, _| Rgb(px[x as usize]));
        let raster = LabRaster::from_rgb(&img);
        let mut acc = LabAccumulator::default();
        acc.add(&raster);
        let own = acc.finish().unwrap();
        let same = lab_align_raster(&raster, &own, &own);
        for (a, b) in raster.pixels.iter().zip(&same.pixels) {
            for ch in 0..3 {
                prop_assert!((a[ch] - b[ch]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn balance_weights_ignore_dataset_scale(
        maps in prop::collection::vec(prop::collection::vec(0u8..5, 9), 1..6),
        copies in 2usize..4,
    ) {
        let once: Vec<(String, LabelMap)> = maps
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("m{i}"), LabelMap::new(3, 3, v.clone()).unwrap()))
            .collect();
        let many: Vec<(String, LabelMap)> = (0..copies)
            .flat_map(|k| once.iter().map(move |(id, m)| (format!("{id}_{k}"), m.clone())))
            .collect();
        let a = weights_from_maps(&once, 5).unwrap();
        let b = weights_from_maps(&many, 5).unwrap();
        for (id, w) in &a.weights {
            let w_copy = b.get(&format!("{id}_0")).unwrap();
            prop_assert!((w / copies as f64 - w_copy).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_is_associative_on_disjoint_ids(a in pli_set(3), b in pli_set(3), c in pli_set(3)) {
        let tag = |s: Vec<PseudoLabeledImage>, k: &str| -> Vec<PseudoLabeledImage> {
            s.into_iter()
                .map(|i| {
                    let id = format!("{k}{}", i.image_id());
                    let (_, labels, conf) = i.into_parts();
                    PseudoLabeledImage::new(id, labels, conf, 0, BranchTag::Branch1).unwrap()
                })
                .collect()
        };
        let (a, b, c) = (tag(a, "a"), tag(b, "b"), tag(c, "c"));
        let sa: PseudoLabelSet = a.into_iter().collect();
        let left = fuse(&fuse(&sa, b.clone()), c.clone());
        let right = fuse(&sa, fuse(&b.into_iter().collect(), c));
        prop_assert_eq!(left.iter().collect::<Vec<_>>(), right.iter().collect::<Vec<_>>());
    }

    #[test]
    fn fuse_is_idempotent(a in pli_set(3), b in pli_set(3)) {
        let sa: PseudoLabelSet = a.into_iter().collect();
        let once = fuse(&sa, b.clone());
        let twice = fuse(&once, b);
        prop_assert_eq!(once.iter().collect::<Vec<_>>(), twice.iter().collect::<Vec<_>>());
    }

    #[test]
    fn combine_void_only_adds_labels(x in pixels(12, 4), y in pixels(12, 4)) {
        let (a, b) = (pli("i", 4, 3, &x), pli("i", 4, 3, &y));
        let (ca, cb) = combine_void(&a, &b).unwrap();
        prop_assert!(ca.labeled_pixels() >= a.labeled_pixels());
        prop_assert!(cb.labeled_pixels() >= b.labeled_pixels());
        prop_assert_eq!(ca.labeled_pixels(), cb.labeled_pixels());
    }

    #[test]
    fn collage_pixels_come_from_donor_or_target(
        donor in prop::collection::vec(0u8..4, 16),
        target in pixels(16, 4),
        thresholds in prop::collection::vec(0.5f32..0.9, 4),
        p_cm in 0.0f64..=1.0,
    ) {
        let vct = ThresholdVector { per_class: thresholds, fraction: 0.5, cycle: 0 };
        let donor = LabeledImage {
            image_id: "d".into(),
            image: Arc::new(image(4, 4, 1)),
            labels: Arc::new(LabelMap::new(4, 4, donor).unwrap()),
        };
        let t = pli("t", 4, 4, &target);
        let timg = image(4, 4, 2);
        let out = classmix_collage(&donor, &t, &timg, &vct, p_cm).unwrap();
        let picked = collage_classes(&donor.labels, &vct, p_cm);
        for i in 0..16 {
            let (x, y) = ((i % 4) as u32, (i / 4) as u32);
            let dl = donor.labels.values()[i];
            if picked.contains(&dl) {
                prop_assert_eq!(out.labels.values()[i], dl);
                prop_assert_eq!(out.weights[i], 1.0);
                prop_assert_eq!(out.image.get_pixel(x, y), donor.image.get_pixel(x, y));
            } else {
                prop_assert_eq!(out.labels.values()[i], t.labels().values()[i]);
                prop_assert_eq!(out.weights[i], t.pixel_confidence()[i]);
                prop_assert_eq!(out.image.get_pixel(x, y), timg.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn composed_batches_have_exact_counts(
        n_mb in 1usize..9,
        p_mb in 0.0f64..=1.0,
        count in 1usize..6,
        collage in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let pool = SourcePool::new(
            (0..3u8)
                .map(|i| LabeledImage {
                    image_id: format!("s{i}"),
                    image: Arc::new(image(2, 2, i)),
                    labels: Arc::new(LabelMap::filled(2, 2, i)),
                })
                .collect(),
        );
        let pseudo: Vec<PseudoLabeledImage> =
            (0..2).map(|i| pli(&format!("t{i}"), 2, 2, &[(1, 0.7), (VOID_ID, 0.0), (0, 0.9), (2, 1.0)])).collect();
        let refs: Vec<&PseudoLabeledImage> = pseudo.iter().collect();
        let mut targets = TargetImages::default();
        for i in 0..2u8 {
            targets.insert(format!("t{i}"), image(2, 2, 10 + i));
        }
        let vct = ThresholdVector { per_class: vec![0.6; 3], fraction: 0.5, cycle: 0 };
        let sources = MixSources { source: &pool, pseudo: &refs, target_images: &targets, vct: &vct };
        let mix = MixParams { p_mb, p_cm: 0.5 };
        let batches = compose_batches(sources, count, n_mb, &mix, collage, seed).unwrap();
        let again = compose_batches(sources, count, n_mb, &mix, collage, seed).unwrap();
        prop_assert_eq!(batches.len(), count);
        let expected_targets = cotrain_core::mixing::target_count(n_mb, p_mb);
        for (batch, other) in batches.iter().zip(&again) {
            prop_assert_eq!(batch.len(), n_mb);
            let targets = batch.iter().filter(|s| s.origin != SampleOrigin::Source).count();
            prop_assert_eq!(targets, expected_targets);
            let want = if collage { SampleOrigin::CollagedTarget } else { SampleOrigin::Target };
            prop_assert!(batch[..targets].iter().all(|s| s.origin == want));
            let key = |b: &Vec<cotrain_core::mixing::TrainingSample>| {
                b.iter().map(|s| (s.image_id.clone(), s.donor_id.clone())).collect::<Vec<_>>()
            };
            prop_assert_eq!(key(batch), key(other));
        }
    }

    #[test]
    fn raster_files_roundtrip_bit_exact(values in prop::collection::vec(0.0f32..=1.0, 1..200)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        io::write_f32_raster(&path, &[values.len()], &values).unwrap();
        let first = Sha256::digest(std::fs::read(&path).unwrap());
        let (shape, back) = io::read_f32_raster(&path).unwrap();
        prop_assert_eq!(shape, vec![values.len()]);
        prop_assert_eq!(
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        io::write_f32_raster(&path, &[back.len()], &back).unwrap();
        prop_assert_eq!(first, Sha256::digest(std::fs::read(&path).unwrap()));
    }

    #[test]
    fn requests_roundtrip_through_text(ids in prop::collection::vec("[a-z0-9_]{1,8}", 0..5), model in "[a-z_]{1,10}") {
        let req = Request::Predict {
            model,
            images: ids.iter().map(|id| ImageRef { image_id: id.clone(), path: format!("{id}.png") }).collect(),
        };
        let text = encode(&req).unwrap();
        let back: Request = decode(&text).unwrap();
        prop_assert_eq!(&back, &req);
        prop_assert_eq!(Sha256::digest(encode(&back).unwrap()), Sha256::digest(&text));

        let cfg = Request::Finetune { config: TrainerConfig::default(), base: None, batches: Vec::new(), output: "m".into() };
        prop_assert_eq!(decode::<Request>(&encode(&cfg).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn toy_fit_is_deterministic_and_predictions_normalized(seed in any::<u8>(), labels in prop::collection::vec(0u8..4, 16)) {
        let sample = LabeledImage {
            image_id: "s".into(),
            image: Arc::new(image(4, 4, seed)),
            labels: Arc::new(LabelMap::new(4, 4, labels).unwrap()),
        }
        .to_sample();
        let a = toy_fit(ToyModelState::new(4, 1.0), std::slice::from_ref(&sample)).unwrap();
        let b = toy_fit(ToyModelState::new(4, 1.0), std::slice::from_ref(&sample)).unwrap();
        prop_assert_eq!(&a, &b);
        let s = toy_predict(&a, &image(4, 4, seed.wrapping_add(1)));
        prop_assert_eq!(&s, &toy_predict(&b, &image(4, 4, seed.wrapping_add(1))));
        prop_assert!(s.max_normalization_error() < 1e-5);
    }

    #[test]
    fn sort_rank_matches_full_sort(v in prop::collection::vec(prop_oneof![Just(0.5f32), -1.0f32..1.0], 0..12)) {
        let mut oracle: Vec<(f32, u8)> = v.iter().enumerate().map(|(i, &x)| (x, i as u8)).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        prop_assert_eq!(sort_rank(&v), oracle.into_iter().map(|p| p.1).collect::<Vec<_>>());
    }

    #[test]
    fn dynamic_threshold_lies_between_extremes(c in prop::collection::vec(0.0f32..=1.0, 1..20), lambda in 0.0f64..=1.0) {
        let t = dynamic_threshold(c.iter().copied(), lambda).unwrap();
        let lo = c.iter().copied().fold(f32::MAX, f32::min) as f64;
        let hi = c.iter().copied().fold(f32::MIN, f32::max) as f64;
        prop_assert!(lo <= t && t <= hi);
    }

    #[test]
    fn ensemble_is_the_elementwise_mean(a in stack(3, 2, 3), b in stack(3, 2, 3)) {
        let e = ensemble_confidence(&a, &b).unwrap();
        for ((x, y), m) in a.values().iter().zip(b.values()).zip(e.values()) {
            prop_assert!(((x + y) / 2.0 - m).abs() < 1e-7);
        }
        prop_assert!(e.max_normalization_error() < 1e-5);
    }

    #[test]
    fn top_n_keeps_the_most_confident(set in pli_set(3), n in 0usize..10) {
        let ids: BTreeSet<String> = set.iter().map(|i| i.image_id().to_string()).collect();
        let kept = select_top_n(set.clone(), n);
        prop_assert_eq!(kept.len(), n.min(set.len()));
        let floor = kept.iter().map(|i| i.image_confidence()).fold(f32::MAX, f32::min);
        for img in &set {
            if !kept.iter().any(|k| k.image_id() == img.image_id()) {
                prop_assert!(img.image_confidence() <= floor);
            }
        }
        prop_assert!(kept.iter().all(|k| ids.contains(k.image_id())));
    }
}
