use std::collections::{BTreeMap, BTreeSet};

use mixseg::benchgen::{synthesize_super_mask, BenchmarkFixtures, PartWholeInstance, SuperMaskSource};
use mixseg::mask::{mask_iou, SegCategory};
use mixseg::mask::{BinaryMask, LabelSpace, LabelSpaceId, SoftMask};
use mixseg::matching::{hungarian_assign, set_loss, set_loss_with_assignment, GroundTruthSegment};
use mixseg::metrics::{
    default_iou_thresholds, instance::match_category, instance_ap, panoptic_quality, piq_score, AreaBand,
    DetectionRecord, InstanceAnnotation, PiqAggregation, PiqImage,
};
use mixseg::postproc::{esf_omi_fusion, mask_nms, original_fusion, FusionConfig, PanopticMap, ScoredMask};
use mixseg::semantics::{
    class_probabilities, compose_queries, multi_pass_inference, select_label_spaces, ClassEmbeddingTable, Decoder,
    EmbeddingVector, Prediction, QuerySet, StubDecoder,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rect(h: u32, w: u32, (r0, r1, c0, c1): (u32, u32, u32, u32)) -> BinaryMask {
    let mut bits = vec![false; (h * w) as usize];
    for r in r0..r1 {
        for c in c0..c1 {
            bits[(r * w + c) as usize] = true;
        }
    }
    BinaryMask::from_row_major(h, w, &bits).unwrap()
}

fn random_rect(rng: &mut ChaCha8Rng, h: u32, w: u32) -> (u32, u32, u32, u32) {
    let r0 = rng.random_range(0..h);
    let r1 = rng.random_range(r0 + 1..=h);
    let c0 = rng.random_range(0..w);
    let c1 = rng.random_range(c0 + 1..=w);
    (r0, r1, c0, c1)
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_table(rng: &mut ChaCha8Rng, id: LabelSpaceId, c: usize, d: usize) -> ClassEmbeddingTable {
    let names: Vec<String> = (0..c).map(|i| format!("{id} class {i}")).collect();
    let pairs: Vec<(&str, bool)> = names.iter().map(|n| (n.as_str(), true)).collect();
    let space = LabelSpace::from_names(id, &pairs).unwrap();
    ClassEmbeddingTable::new(space, (0..c).map(|_| EmbeddingVector::new(unit(rng, d))).collect()).unwrap()
}

fn random_probs(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

fn random_prediction(rng: &mut ChaCha8Rng, h: u32, w: u32, classes: usize) -> Prediction {
    let soft: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Prediction {
        soft_mask: SoftMask::new(h, w, soft).unwrap(),
        image_embedding: EmbeddingVector::zeros(1),
        source: LabelSpaceId::Test,
        class_probs: Some(random_probs(rng, classes + 1)),
        score: None,
    }
}

fn fusion_space() -> LabelSpace {
    LabelSpace::from_names(LabelSpaceId::Test, &[("person", true), ("car", true), ("sky", false), ("road", false)])
        .unwrap()
}

fn scored(space: &LabelSpace, class: usize, mask: BinaryMask, score: f64, background: f64) -> ScoredMask {
    ScoredMask {
        mask,
        category: space.categories()[class].clone(),
        class_index: class,
        score,
        background_prob: background,
        is_background: background > score,
    }
}

fn random_scored(rng: &mut ChaCha8Rng, space: &LabelSpace, h: u32, w: u32) -> ScoredMask {
    let score = rng.random_range(0.01..0.99);
    let background = rng.random_range(0.0..1.0 - score);
    let class = rng.random_range(0..space.len());
    scored(space, class, rect(h, w, random_rect(rng, h, w)), score, background)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_are_a_distribution(seed in any::<u64>(), c in 1usize..20, d in 2usize..32, tau in 0.005f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random_table(&mut rng, LabelSpaceId::Test, c, d);
        let e = EmbeddingVector::new(unit(&mut rng, d));
        let p = class_probabilities(&e, &table, tau).unwrap();
        prop_assert_eq!(p.len(), c + 1);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn argmax_ignores_positive_rescaling(seed in any::<u64>(), c in 2usize..12, t1 in 0.01f64..2.0, t2 in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random_table(&mut rng, LabelSpaceId::Test, c, 8);
        let e = EmbeddingVector::new(unit(&mut rng, 8));
        let argmax = |p: &[f64]| (0..p.len()).max_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap()).unwrap();
        let a = class_probabilities(&e, &table, t1).unwrap();
        let b = class_probabilities(&e, &table, t2).unwrap();
        let sorted = { let mut v = a.clone(); v.sort_by(|x, y| y.partial_cmp(x).unwrap()); v };
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn selection_contains_best_matches(seed in any::<u64>(), k in 1usize..4, c in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let train: Vec<ClassEmbeddingTable> = (0..k)
            .map(|i| {
                let n = rng.random_range(1..5);
                random_table(&mut rng, LabelSpaceId::Train(i as u32 + 1), n, d)
            })
            .collect();
        let test = random_table(&mut rng, LabelSpaceId::Test, c, d);
        let selected = select_label_spaces(&test, &train).unwrap();
        prop_assert!(!selected.is_empty() && selected.len() <= k);
        for t in test.entries() {
            let best = train
                .iter()
                .enumerate()
                .map(|(i, tab)| (i, tab.entries().iter().map(|e| t.dot(e).unwrap()).fold(f64::NEG_INFINITY, f64::max)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            prop_assert!(selected.contains(&(best.0 as u32 + 1)));
        }

        let n = rng.random_range(1..6);
        let q = QuerySet::random(n, k, d, seed).unwrap();
        let dec = StubDecoder::new(seed, 5, 4);
        let preds = multi_pass_inference(&dec, &q, &9, &test, &train, 0.01).unwrap();
        prop_assert_eq!(preds.len(), n * selected.len());

        // Same as decoding each selected space by hand, in ascending order.
        let mut manual = Vec::new();
        for &s in &selected {
            for out in dec.decode(&compose_queries(&q, s).unwrap(), &9).unwrap() {
                manual.push((out.soft_mask, LabelSpaceId::Train(s)));
            }
        }
        let got: Vec<_> = preds.into_iter().map(|p| (p.soft_mask, p.source)).collect();
        prop_assert_eq!(got, manual);
    }

    #[test]
    fn hungarian_row_permutation(seed in any::<u64>(), rows in 1usize..6, extra in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = rows + extra;
        let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0..40) as f64 / 4.0).collect()).collect();
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<Vec<f64>> = order.iter().map(|&i| cost[i].clone()).collect();
        let a = hungarian_assign(&cost).unwrap();
        let b = hungarian_assign(&permuted).unwrap();
        prop_assert_eq!(a.total_cost, b.total_cost);
    }

    #[test]
    fn set_loss_permutation_invariant(seed in any::<u64>(), g in 1usize..4, extra in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, classes) = (5, 5, 3);
        let preds: Vec<Prediction> = (0..g + extra).map(|_| random_prediction(&mut rng, h, w, classes)).collect();
        let gts: Vec<GroundTruthSegment> = (0..g)
            .map(|_| GroundTruthSegment::new(rng.random_range(0..classes), rect(h, w, random_rect(&mut rng, h, w))).unwrap())
            .collect();
        let base = set_loss(&preds, &gts).unwrap().total;
        prop_assert!(base >= 0.0);
        let mut p2 = preds.clone();
        let mut g2 = gts.clone();
        p2.shuffle(&mut rng);
        g2.shuffle(&mut rng);
        let other = set_loss(&p2, &g2).unwrap().total;
        prop_assert!((base - other).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn loss_weakly_decreases_with_matched_confidence(seed in any::<u64>(), g in 1usize..4, frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, classes) = (5, 5, 3);
        let preds: Vec<Prediction> = (0..g + 1).map(|_| random_prediction(&mut rng, h, w, classes)).collect();
        let gts: Vec<GroundTruthSegment> = (0..g)
            .map(|_| GroundTruthSegment::new(rng.random_range(0..classes), rect(h, w, random_rect(&mut rng, h, w))).unwrap())
            .collect();
        let before = set_loss_with_assignment(&preds, &gts).unwrap();
        let row = rng.random_range(0..g);
        let j = before.assignment.pairs[row];
        let class = gts[row].class;
        let mut better = preds.clone();
        let probs = better[j].class_probs.as_mut().unwrap();
        // Move mass from the no-object slot onto the matched class.
        let delta = probs[classes] * frac;
        probs[classes] -= delta;
        probs[class] += delta;
        let after = set_loss(&better, &gts).unwrap();
        prop_assert!(after.total <= before.loss.total + 1e-12);
    }

    #[test]
    fn fusion_segments_come_from_inputs(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = fusion_space();
        let (h, w) = (rng.random_range(3..14), rng.random_range(3..14));
        let masks: Vec<ScoredMask> = (0..n).map(|_| random_scored(&mut rng, &space, h, w)).collect();
        for (map, cfg) in [
            (original_fusion(&masks, &FusionConfig::original()).unwrap(), FusionConfig::original()),
            (esf_omi_fusion(&masks, &FusionConfig::esf_omi()).unwrap(), FusionConfig::esf_omi()),
        ] {
            for seg in map.segments() {
                prop_assert!(seg.area > 0);
                let supported = masks.iter().any(|m| {
                    m.category.id == seg.category_id && m.score > cfg.score_threshold
                        && map.segment_mask(seg.id).intersection_area(&m.mask) > 0
                });
                prop_assert!(supported, "segment {:?} has no surviving input", seg);
            }
        }
    }

    #[test]
    fn disjoint_inputs_fuse_identically(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = fusion_space();
        let (h, w) = (4u32, 4 * n as u32);
        // Vertical strips never overlap.
        let masks: Vec<ScoredMask> = (0..n as u32)
            .map(|i| {
                let score = rng.random_range(0.85..0.99);
                let class = rng.random_range(0..space.len());
                scored(&space, class, rect(h, w, (0, h, 4 * i, 4 * i + rng.random_range(1..=4))), score, 0.01)
            })
            .collect();
        let a = original_fusion(&masks, &FusionConfig::original()).unwrap();
        let b = esf_omi_fusion(&masks, &FusionConfig::esf_omi()).unwrap();
        let mut fwd: BTreeMap<u32, u32> = BTreeMap::new();
        let mut back: BTreeMap<u32, u32> = BTreeMap::new();
        for (&x, &y) in a.ids().iter().zip(b.ids()) {
            prop_assert_eq!(*fwd.entry(x).or_insert(y), y);
            prop_assert_eq!(*back.entry(y).or_insert(x), x);
            if x != 0 {
                prop_assert_eq!(a.segment(x).unwrap().category_id, b.segment(y).unwrap().category_id);
            }
        }
    }

    #[test]
    fn nms_is_greedy_subset(seed in any::<u64>(), n in 1usize..10, thr in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = fusion_space();
        let masks: Vec<ScoredMask> = (0..n).map(|_| random_scored(&mut rng, &space, 8, 8)).collect();
        let kept = mask_nms(&masks, thr).unwrap();
        prop_assert!(!kept.is_empty());
        for k in &kept {
            prop_assert!(masks.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(mask_iou(&a.mask, &b.mask).unwrap() <= thr);
            }
        }
    }

    #[test]
    fn ap_monotone_in_detections(seed in any::<u64>(), g in 1usize..5, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (10, 10);
        let gts: Vec<InstanceAnnotation> = (0..g)
            .map(|_| InstanceAnnotation { image_id: 0, category_id: 1, mask: rect(h, w, random_rect(&mut rng, h, w)) })
            .collect();
        let mut scores: Vec<u32> = (2..100).collect();
        scores.shuffle(&mut rng);
        let mut dets: Vec<DetectionRecord> = (0..d)
            .map(|k| {
                let mask = if rng.random_bool(0.6) { gts[rng.random_range(0..g)].mask.clone() } else { rect(h, w, random_rect(&mut rng, h, w)) };
                DetectionRecord { image_id: 0, category_id: 1, score: scores[k] as f64 / 100.0, mask }
            })
            .collect();
        let t = [0.5];
        let ap = |dets: &[DetectionRecord]| instance_ap(dets, &gts, &t).unwrap().ap.unwrap();
        let base = ap(&dets);
        prop_assert!((0.0..=1.0).contains(&base));

        // Dropping the lowest-ranked true positive never helps.
        let refs_d: Vec<&DetectionRecord> = dets.iter().collect();
        let refs_g: Vec<&InstanceAnnotation> = gts.iter().collect();
        let outcome = match_category(&refs_d, &refs_g, 0.5, AreaBand::All).unwrap();
        if let Some(&(score, _)) = outcome.ranked.iter().rev().find(|(_, tp)| *tp) {
            let mut fewer = dets.clone();
            fewer.retain(|x| x.score != score);
            prop_assert!(ap(&fewer) <= base + 1e-12);
        }

        // An empty-overlap detection below every score is a false positive ranked last.
        let far = BinaryMask::empty(h, w).unwrap();
        dets.push(DetectionRecord { image_id: 0, category_id: 1, score: 0.001, mask: far });
        prop_assert!(ap(&dets) <= base + 1e-12);
    }

    #[test]
    fn panoptic_outputs_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = fusion_space();
        let (h, w) = (8, 8);
        let make = |rng: &mut ChaCha8Rng| {
            let masks: Vec<ScoredMask> = (0..rng.random_range(1..6))
                .map(|_| { let mut m = random_scored(rng, &space, h, w); m.score = 0.9; m.background_prob = 0.05; m.is_background = false; m })
                .collect();
            esf_omi_fusion(&masks, &FusionConfig::esf_omi()).unwrap()
        };
        let (p, g) = (make(&mut rng), make(&mut rng));
        let r = panoptic_quality(&p, &g, &space).unwrap();
        for v in [r.pq, r.sq, r.rq] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn piq_ignores_category_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = fusion_space();
        let (h, w) = (10, 10);
        let mut gt = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(1..5) {
            let cat = rng.random_range(1..=2u32);
            let mask = rect(h, w, random_rect(&mut rng, h, w));
            gt.push(InstanceAnnotation { image_id: 0, category_id: cat, mask: mask.clone() });
            let det_mask = if rng.random_bool(0.7) { mask } else { rect(h, w, random_rect(&mut rng, h, w)) };
            dets.push(DetectionRecord { image_id: 0, category_id: cat, score: rng.random_range(0.1..1.0), mask: det_mask });
        }
        let sky = rect(h, w, (0, 4, 0, 10));
        let road = rect(h, w, (4, 10, 0, 10));
        gt.push(InstanceAnnotation { image_id: 0, category_id: 3, mask: sky.clone() });
        gt.push(InstanceAnnotation { image_id: 0, category_id: 4, mask: road.clone() });
        let split = rng.random_range(1..10);
        let pred_sky = rect(h, w, (0, split, 0, 10));
        let pred_road = rect(h, w, (split, 10, 0, 10));
        let pred = PanopticMap::from_masks(h, w, &[(1, 3, false, &pred_sky), (2, 4, false, &pred_road)]).unwrap();
        let images = [PiqImage { image_id: 0, stuff_prediction: pred, ground_truth: gt }];

        let mut cats: Vec<SegCategory> = space.categories().to_vec();
        cats.shuffle(&mut rng);
        let shuffled = LabelSpace::new(LabelSpaceId::Test, cats).unwrap();
        for agg in [PiqAggregation::CategoryMean, PiqAggregation::SplitMean] {
            let a = piq_score(&dets, &images, &space, agg).unwrap();
            let b = piq_score(&dets, &images, &shuffled, agg).unwrap();
            prop_assert_eq!(a.per_category, b.per_category);
            let (x, y) = (a.piq.unwrap(), b.piq.unwrap());
            prop_assert!((x - y).abs() <= 1e-9);
            prop_assert!((0.0..=100.0).contains(&x));
        }
    }

    #[test]
    fn super_masks_cover_parts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fixtures = BenchmarkFixtures::builtin();
        let src = fixtures.source("csp").unwrap();
        let (h, w) = (12, 12);
        let instances: Vec<PartWholeInstance> = src
            .hierarchies
            .iter()
            .enumerate()
            .map(|(k, hier)| {
                let mut part_masks = BTreeMap::new();
                for p in &hier.parts {
                    if rng.random_bool(0.7) {
                        part_masks.insert(p.clone(), rect(h, w, random_rect(&mut rng, h, w)));
                    }
                }
                PartWholeInstance { image_id: 0, instance_id: k as u32 + 1, super_name: hier.super_name.clone(), part_masks, source_mask: None }
            })
            .filter(|i| !i.part_masks.is_empty())
            .collect();
        for inst in &instances {
            let sup = synthesize_super_mask(inst).unwrap();
            for m in inst.part_masks.values() {
                prop_assert_eq!(sup.intersection_area(m), m.area());
            }
        }
        for ds in fixtures.build("csp_pair", &instances, SuperMaskSource::PartUnion).unwrap() {
            prop_assert_eq!(ds.label_space.len(), 2);
            for img in &ds.images {
                let supers: Vec<_> = img.annotations.iter().filter(|a| ds.super_ids.contains(&a.category_id)).collect();
                for part in img.annotations.iter().filter(|a| !ds.super_ids.contains(&a.category_id)) {
                    let owner = supers.iter().find(|s| s.instance_id == part.instance_id);
                    prop_assert!(owner.is_some_and(|s| s.mask.intersection_area(&part.mask) == part.mask.area()));
                }
            }
        }
    }
}

#[test]
fn default_thresholds_are_coco() {
    let t = default_iou_thresholds();
    assert_eq!(t.len(), 10);
    assert!((t[0] - 0.5).abs() < 1e-12 && (t[9] - 0.95).abs() < 1e-12);
    let distinct: BTreeSet<u64> = t.iter().map(|x| (x * 100.0).round() as u64).collect();
    assert_eq!(distinct.len(), 10);
}

/// Under greedy matching an early true positive can block a better match, so
/// removing it may raise AP. Only the last-ranked true positive is safe.
#[test]
fn removing_an_early_true_positive_can_raise_ap() {
    let (h, w) = (1, 10);
    let a = rect(h, w, (0, 1, 0, 5));
    let b = rect(h, w, (0, 1, 5, 10));
    let gts = vec![
        InstanceAnnotation { image_id: 0, category_id: 1, mask: a.clone() },
        InstanceAnnotation { image_id: 0, category_id: 1, mask: b },
    ];
    let det = |score: f64, mask: BinaryMask| DetectionRecord { image_id: 0, category_id: 1, score, mask };
    // d takes b; e overlaps only b and becomes a false positive; f takes a.
    let d = det(0.9, rect(h, w, (0, 1, 4, 10)));
    let e = det(0.8, rect(h, w, (0, 1, 6, 10)));
    let f = det(0.7, a);
    let t = [0.5];
    let with_d = instance_ap(&[d, e.clone(), f.clone()], &gts, &t).unwrap().ap.unwrap();
    let without_d = instance_ap(&[e, f], &gts, &t).unwrap().ap.unwrap();
    assert!(without_d > with_d);
    assert_eq!(without_d, 1.0);
}
