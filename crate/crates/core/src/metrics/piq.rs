//! Combined thing/stuff quality: thing categories are scored by mask AP over
//! raw (possibly overlapping) detections, stuff categories by PQ, and the
//! per-category scores are averaged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelSpace};
use crate::metrics::instance::{default_iou_thresholds, per_category_ap, DetectionRecord, InstanceAnnotation};
use crate::metrics::panoptic::{pq_dataset_stats, PqOptions, PQ_MATCH_THRESHOLD};
use crate::metrics::AreaBand;
use crate::postproc::PanopticMap;

/// How per-category scores are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PiqAggregation {
    /// Plain mean over all categories.
    #[default]
    CategoryMean,
    /// Mean of (mean thing AP, mean stuff PQ).
    SplitMean,
}

/// One evaluated image: the stuff part of the prediction and every ground-truth
/// annotation, things and stuff alike.
#[derive(Debug, Clone)]
pub struct PiqImage {
    pub image_id: u64,
    /// Thing segments in this map are ignored.
    pub stuff_prediction: PanopticMap,
    pub ground_truth: Vec<InstanceAnnotation>,
}

/// All values are percentages; `None` when no category is scored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiqReport {
    pub piq: Option<f64>,
    pub piq50: Option<f64>,
    pub piq75: Option<f64>,
    pub piq_s: Option<f64>,
    pub piq_m: Option<f64>,
    pub piq_l: Option<f64>,
    /// Category scores weighted by their ground-truth instance counts.
    pub piq_instance_weighted: Option<f64>,
    /// AP for things, PQ for stuff, in [0, 1].
    pub per_category: BTreeMap<u32, f64>,
    pub aggregation: PiqAggregation,
}

/// Aggregate per-category scores in [0, 1] into a percentage.
pub fn piq_from_scores(thing_scores: &[f64], stuff_scores: &[f64], aggregation: PiqAggregation) -> Result<f64> {
    if let Some(v) = thing_scores.iter().chain(stuff_scores).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Format(format!("category score {v} outside [0,1]")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let value = match aggregation {
        PiqAggregation::CategoryMean => {
            let all: Vec<f64> = thing_scores.iter().chain(stuff_scores).copied().collect();
            if all.is_empty() {
                return Err(Error::Degenerate("no categories to score".into()));
            }
            mean(&all)
        }
        PiqAggregation::SplitMean => match (thing_scores.is_empty(), stuff_scores.is_empty()) {
            (true, true) => return Err(Error::Degenerate("no categories to score".into())),
            (false, true) => mean(thing_scores),
            (true, false) => mean(stuff_scores),
            (false, false) => (mean(thing_scores) + mean(stuff_scores)) / 2.0,
        },
    };
    Ok(value * 100.0)
}

struct Prepared<'a> {
    thing_gts: Vec<InstanceAnnotation>,
    stuff_pairs: Vec<(PanopticMap, PanopticMap)>,
    space: &'a LabelSpace,
}

struct Scores {
    things: BTreeMap<u32, f64>,
    stuff: BTreeMap<u32, f64>,
}

impl Prepared<'_> {
    fn scores(
        &self,
        dets: &[DetectionRecord],
        thresholds: &[f64],
        pq_threshold: f64,
        band: AreaBand,
    ) -> Result<Scores> {
        let things = per_category_ap(dets, &self.thing_gts, thresholds, band)?;
        let pairs: Vec<(&PanopticMap, &PanopticMap)> = self.stuff_pairs.iter().map(|(p, g)| (p, g)).collect();
        let opts = PqOptions { match_threshold: pq_threshold, band };
        let stuff = pq_dataset_stats(&pairs, self.space, opts)?
            .result()
            .per_category
            .into_iter()
            .map(|(c, v)| (c, v.pq))
            .collect();
        Ok(Scores { things, stuff })
    }
}

fn aggregate(s: &Scores, aggregation: PiqAggregation) -> Result<Option<f64>> {
    if s.things.is_empty() && s.stuff.is_empty() {
        return Ok(None);
    }
    let t: Vec<f64> = s.things.values().copied().collect();
    let st: Vec<f64> = s.stuff.values().copied().collect();
    piq_from_scores(&t, &st, aggregation).map(Some)
}

fn is_thing(space: &LabelSpace, category: u32) -> Result<bool> {
    space.by_id(category).map(|(_, c)| c.is_thing).ok_or_else(|| {
        Error::LabelSpace(format!("category {category} has no thing/stuff assignment in the label space"))
    })
}

/// Score raw thing detections and stuff predictions against full ground truth.
///
/// The stuff ground truth of an image is painted from its stuff annotations;
/// pixels outside them are void for PQ, so thing regions never produce stuff
/// false positives.
pub fn piq_score(
    thing_dets: &[DetectionRecord],
    images: &[PiqImage],
    space: &LabelSpace,
    aggregation: PiqAggregation,
) -> Result<PiqReport> {
    for d in thing_dets {
        if !is_thing(space, d.category_id)? {
            return Err(Error::LabelSpace(format!(
                "detection of stuff category {} passed as a thing detection",
                d.category_id
            )));
        }
    }
    let mut thing_gts = Vec::new();
    let mut stuff_pairs = Vec::with_capacity(images.len());
    let mut instance_counts: BTreeMap<u32, usize> = BTreeMap::new();
    for img in images {
        let pred = &img.stuff_prediction;
        for s in pred.segments() {
            is_thing(space, s.category_id)?;
        }
        let mut stuff_items: Vec<(u32, u32, bool, &BinaryMask)> = Vec::new();
        for g in &img.ground_truth {
            *instance_counts.entry(g.category_id).or_default() += 1;
            if is_thing(space, g.category_id)? {
                thing_gts.push(InstanceAnnotation { image_id: img.image_id, ..g.clone() });
            } else {
                stuff_items.push((stuff_items.len() as u32 + 1, g.category_id, false, &g.mask));
            }
        }
        let gt_map = PanopticMap::from_masks(pred.height(), pred.width(), &stuff_items)?;
        let pred_map = pred.filter_segments(|s| !is_thing(space, s.category_id).unwrap_or(true));
        stuff_pairs.push((pred_map, gt_map));
    }
    let dets: Vec<DetectionRecord> = thing_dets.to_vec();
    let prepared = Prepared { thing_gts, stuff_pairs, space };

    let thresholds = default_iou_thresholds();
    let main = prepared.scores(&dets, &thresholds, PQ_MATCH_THRESHOLD, AreaBand::All)?;
    let at =
        |t: f64| -> Result<Option<f64>> { aggregate(&prepared.scores(&dets, &[t], t, AreaBand::All)?, aggregation) };
    let band = |b: AreaBand| -> Result<Option<f64>> {
        aggregate(&prepared.scores(&dets, &thresholds, PQ_MATCH_THRESHOLD, b)?, aggregation)
    };

    let mut per_category = main.things.clone();
    per_category.extend(main.stuff.iter().map(|(c, v)| (*c, *v)));
    let weighted = {
        let (mut num, mut den) = (0.0, 0usize);
        for (c, v) in &per_category {
            let w = instance_counts.get(c).copied().unwrap_or(0);
            num += w as f64 * v;
            den += w;
        }
        (den > 0).then(|| 100.0 * num / den as f64)
    };

    Ok(PiqReport {
        piq: aggregate(&main, aggregation)?,
        piq50: at(0.5)?,
        piq75: at(0.75)?,
        piq_s: band(AreaBand::Small)?,
        piq_m: band(AreaBand::Medium)?,
        piq_l: band(AreaBand::Large)?,
        piq_instance_weighted: weighted,
        per_category,
        aggregation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::LabelSpaceId;

    fn cols(c0: u32, c1: u32) -> BinaryMask {
        let bits: Vec<bool> = (0..40u32).map(|i| (c0..c1).contains(&(i % 10))).collect();
        BinaryMask::from_row_major(4, 10, &bits).unwrap()
    }

    fn space() -> LabelSpace {
        LabelSpace::from_names(LabelSpaceId::Test, &[("car", true), ("sky", false), ("road", false)]).unwrap()
    }

    fn ann(cat: u32, m: BinaryMask) -> InstanceAnnotation {
        InstanceAnnotation { image_id: 7, category_id: cat, mask: m }
    }

    fn perfect() -> (Vec<DetectionRecord>, Vec<PiqImage>) {
        let car_a = cols(0, 3);
        let car_b = cols(2, 5); // overlaps car_a
        let sky = cols(5, 8);
        let road = cols(8, 10);
        let gt = vec![ann(1, car_a.clone()), ann(1, car_b.clone()), ann(2, sky.clone()), ann(3, road.clone())];
        let pred =
            PanopticMap::from_masks(4, 10, &[(1, 2, false, &sky), (2, 3, false, &road), (3, 1, true, &car_a)]).unwrap();
        let dets = vec![
            DetectionRecord { image_id: 7, category_id: 1, score: 0.9, mask: car_a },
            DetectionRecord { image_id: 7, category_id: 1, score: 0.8, mask: car_b },
        ];
        (dets, vec![PiqImage { image_id: 7, stuff_prediction: pred, ground_truth: gt }])
    }

    #[test]
    fn perfect_is_one_hundred() {
        let (dets, imgs) = perfect();
        let r = piq_score(&dets, &imgs, &space(), PiqAggregation::CategoryMean).unwrap();
        assert_eq!(r.piq, Some(100.0));
        assert_eq!(r.piq50, Some(100.0));
        assert_eq!(r.piq75, Some(100.0));
        assert_eq!(r.piq_s, Some(100.0));
        assert_eq!(r.piq_m, None);
        assert_eq!(r.piq_instance_weighted, Some(100.0));
        assert_eq!(r.per_category.len(), 3);
    }

    #[test]
    fn macro_average_fixture() {
        assert_eq!(piq_from_scores(&[0.4], &[0.6], PiqAggregation::CategoryMean).unwrap(), 50.0);
        assert_eq!(piq_from_scores(&[0.4], &[0.6], PiqAggregation::SplitMean).unwrap(), 50.0);
        let cm = piq_from_scores(&[0.4], &[0.6, 0.8], PiqAggregation::CategoryMean).unwrap();
        let sm = piq_from_scores(&[0.4], &[0.6, 0.8], PiqAggregation::SplitMean).unwrap();
        assert!((cm - 60.0).abs() < 1e-12);
        assert!((sm - 55.0).abs() < 1e-12);
        assert!(piq_from_scores(&[], &[], PiqAggregation::CategoryMean).is_err());
    }

    #[test]
    fn stuff_only_space_is_mean_pq() {
        let s = LabelSpace::from_names(LabelSpaceId::Test, &[("sky", false), ("road", false)]).unwrap();
        let sky = cols(0, 5);
        let road = cols(5, 10);
        let half_sky = cols(0, 3);
        let pred = PanopticMap::from_masks(4, 10, &[(1, 1, false, &half_sky), (2, 2, false, &road)]).unwrap();
        let img = PiqImage {
            image_id: 1,
            stuff_prediction: pred.clone(),
            ground_truth: vec![ann(1, sky.clone()), ann(2, road.clone())],
        };
        let r = piq_score(&[], &[img], &s, PiqAggregation::CategoryMean).unwrap();
        let gt = PanopticMap::from_masks(4, 10, &[(1, 1, false, &sky), (2, 2, false, &road)]).unwrap();
        let pq = crate::metrics::panoptic_quality(&pred, &gt, &s).unwrap();
        assert!((r.piq.unwrap() - pq.pq * 100.0).abs() < 1e-9);
    }

    #[test]
    fn unknown_category_is_an_error() {
        let (mut dets, imgs) = perfect();
        dets[0].category_id = 42;
        assert!(piq_score(&dets, &imgs, &space(), PiqAggregation::CategoryMean).is_err());
        let (mut dets, imgs) = perfect();
        dets[0].category_id = 2;
        assert!(piq_score(&dets, &imgs, &space(), PiqAggregation::CategoryMean).is_err());
    }
}
