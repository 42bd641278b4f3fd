//! Panoptic post-processing: turns scored, possibly overlapping masks into an
//! overlap-free panoptic map.
//!
//! Two algorithms are provided. [`original_fusion`] is the greedy placement of
//! the base mask-classification model: drop background and low-confidence
//! masks, then paint masks in descending score onto still-free pixels when
//! enough of each mask remains visible. [`esf_omi_fusion`] changes two things:
//! the confidence filter ignores the background slot, and placement runs after
//! a mask-NMS pass and additionally lets a mask that sits inside a single
//! placed segment overwrite that part of it ("valid selective overlap"), so
//! small objects on top of large ones survive.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{covered_with_slack, mask_iou, BinaryMask, LabelSpace, SegCategory, DEFAULT_BINARIZE_THRESHOLD};
use crate::semantics::Prediction;

/// A binarized prediction with its most likely foreground class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    /// Most likely non-background class.
    pub category: SegCategory,
    /// Position of `category` in its label space.
    pub class_index: usize,
    /// Probability of `category`.
    pub score: f64,
    pub background_prob: f64,
    /// The no-object slot strictly beats every class.
    pub is_background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
    pub containment_slack: f64,
    pub min_visible_ratio: f64,
    pub binarize_threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::esf_omi()
    }
}

impl FusionConfig {
    pub fn original() -> Self {
        FusionConfig { score_threshold: 0.8, ..FusionConfig::esf_omi() }
    }

    pub fn esf_omi() -> Self {
        FusionConfig {
            score_threshold: 0.5,
            nms_iou_threshold: 0.8,
            containment_slack: 0.1,
            min_visible_ratio: 0.8,
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open = [
            ("score_threshold", self.score_threshold),
            ("nms_iou_threshold", self.nms_iou_threshold),
            ("min_visible_ratio", self.min_visible_ratio),
            ("binarize_threshold", self.binarize_threshold),
        ];
        for (name, v) in open {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1), got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.containment_slack) {
            return Err(Error::Config(format!("containment_slack must be in [0,1), got {}", self.containment_slack)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub category_id: u32,
    pub area: u64,
    pub is_thing: bool,
}

/// Per-pixel segment ids (row-major, 0 = void) and the matching segment table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanopticMap {
    height: u32,
    width: u32,
    ids: Vec<u32>,
    segments: Vec<SegmentInfo>,
}

impl PanopticMap {
    /// Validates that ids and the segment table agree and that areas match
    /// pixel counts.
    pub fn new(height: u32, width: u32, ids: Vec<u32>, segments: Vec<SegmentInfo>) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height as usize * width as usize {
            return Err(Error::Dimension(format!("panoptic map {height}x{width} with {} pixels", ids.len())));
        }
        let mut counts: HashMap<u32, u64> = HashMap::new();
        for &id in ids.iter().filter(|&&id| id != 0) {
            *counts.entry(id).or_default() += 1;
        }
        let mut seen = HashMap::new();
        for s in &segments {
            if s.id == 0 {
                return Err(Error::Format("segment id 0 is reserved for void".into()));
            }
            if seen.insert(s.id, ()).is_some() {
                return Err(Error::Format(format!("duplicate segment id {}", s.id)));
            }
            let px = counts.get(&s.id).copied().unwrap_or(0);
            if px != s.area {
                return Err(Error::Format(format!("segment {} records area {} but covers {px} pixels", s.id, s.area)));
            }
        }
        if let Some(id) = counts.keys().find(|id| !seen.contains_key(id)) {
            return Err(Error::Format(format!("pixel id {id} has no segment entry")));
        }
        Ok(PanopticMap { height, width, ids, segments })
    }

    /// Paint non-overlapping segments; later entries win where they overlap.
    /// Areas are recomputed and empty segments dropped.
    pub fn from_masks(height: u32, width: u32, items: &[(u32, u32, bool, &BinaryMask)]) -> Result<Self> {
        let mut ids = vec![0u32; height as usize * width as usize];
        for (id, _, _, mask) in items {
            if mask.height() != height || mask.width() != width {
                return Err(Error::Dimension("segment mask does not match the canvas".into()));
            }
            for (px, bit) in ids.iter_mut().zip(mask.to_row_major()) {
                if bit {
                    *px = *id;
                }
            }
        }
        let mut area: HashMap<u32, u64> = HashMap::new();
        for &id in ids.iter().filter(|&&id| id != 0) {
            *area.entry(id).or_default() += 1;
        }
        let segments = items
            .iter()
            .filter_map(|(id, cat, thing, _)| {
                area.get(id).map(|&a| SegmentInfo { id: *id, category_id: *cat, area: a, is_thing: *thing })
            })
            .collect();
        PanopticMap::new(height, width, ids, segments)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn segments(&self) -> &[SegmentInfo] {
        &self.segments
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn segment_mask(&self, id: u32) -> BinaryMask {
        let bits: Vec<bool> = self.ids.iter().map(|&p| p == id).collect();
        BinaryMask::from_row_major(self.height, self.width, &bits).expect("map dims are valid")
    }

    /// Keep only segments accepted by `keep`; everything else becomes void.
    pub fn filter_segments(&self, keep: impl Fn(&SegmentInfo) -> bool) -> PanopticMap {
        let kept: HashMap<u32, ()> = self.segments.iter().filter(|s| keep(s)).map(|s| (s.id, ())).collect();
        PanopticMap {
            height: self.height,
            width: self.width,
            ids: self.ids.iter().map(|id| if kept.contains_key(id) { *id } else { 0 }).collect(),
            segments: self.segments.iter().filter(|s| kept.contains_key(&s.id)).cloned().collect(),
        }
    }

    /// No pixel is shared between segments by construction; this checks the
    /// weaker property that segment ids are dense from 1.
    pub fn ids_are_dense(&self) -> bool {
        let mut ids: Vec<u32> = self.segments.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.iter().enumerate().all(|(i, &id)| id == i as u32 + 1)
    }
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Most likely class and its confidence; the mask is binarized at
/// `binarize_threshold`. Probability ties go to the lowest class index, and the
/// no-object slot only wins when strictly most likely.
pub fn score_and_label(pred: &Prediction, space: &LabelSpace, binarize_threshold: f64) -> Result<ScoredMask> {
    let probs = pred.class_probs.as_deref().ok_or(Error::MissingClassProbs(0))?;
    if probs.len() != space.len() + 1 {
        return Err(Error::LabelSpace(format!(
            "{} probabilities for a label space of {} classes",
            probs.len(),
            space.len()
        )));
    }
    let classes = &probs[..space.len()];
    let best = argmax_lowest(classes);
    let background_prob = probs[space.len()];
    Ok(ScoredMask {
        mask: pred.soft_mask.binarize(binarize_threshold)?,
        category: space.categories()[best].clone(),
        class_index: best,
        score: classes[best],
        background_prob,
        is_background: background_prob > classes[best],
    })
}

fn check_dims(masks: &[ScoredMask]) -> Result<()> {
    if let Some(first) = masks.first() {
        for m in &masks[1..] {
            first.mask.check_same_dims(&m.mask)?;
        }
    }
    Ok(())
}

/// Descending score, then larger area, then lower input index.
fn placement_order(masks: &[&ScoredMask]) -> Vec<usize> {
    let areas: Vec<u64> = masks.iter().map(|m| m.mask.area()).collect();
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| {
        masks[b]
            .score
            .partial_cmp(&masks[a].score)
            .unwrap_or(Ordering::Equal)
            .then(areas[b].cmp(&areas[a]))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy mask NMS. A mask is dropped when its IoU with any already kept mask
/// exceeds `iou_threshold`. Categories are not consulted. Output is in
/// placement order.
pub fn mask_nms(masks: &[ScoredMask], iou_threshold: f64) -> Result<Vec<ScoredMask>> {
    check_dims(masks)?;
    let refs: Vec<&ScoredMask> = masks.iter().collect();
    let mut kept: Vec<&ScoredMask> = Vec::new();
    for i in placement_order(&refs) {
        let candidate = refs[i];
        let mut suppressed = false;
        for k in &kept {
            if mask_iou(&k.mask, &candidate.mask)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(candidate);
        }
    }
    Ok(kept.into_iter().cloned().collect())
}

struct Placed {
    category: SegCategory,
    area: u64,
}

struct Canvas {
    height: u32,
    width: u32,
    /// 0 = free, otherwise index into `placed` plus one.
    owner: Vec<u32>,
    placed: Vec<Placed>,
}

impl Canvas {
    fn new(height: u32, width: u32) -> Self {
        Canvas { height, width, owner: vec![0; height as usize * width as usize], placed: Vec::new() }
    }

    fn open_segment(&mut self, category: &SegCategory) -> u32 {
        self.placed.push(Placed { category: category.clone(), area: 0 });
        self.placed.len() as u32
    }

    /// Paint free pixels if enough of the mask is still visible.
    fn place_visible(&mut self, bits: &[bool], area: u64, m: &ScoredMask, min_visible: f64) -> bool {
        let visible = bits.iter().zip(&self.owner).filter(|(b, o)| **b && **o == 0).count() as u64;
        if visible == 0 || (visible as f64) / (area as f64) < min_visible {
            return false;
        }
        let seg = self.open_segment(&m.category);
        for (b, o) in bits.iter().zip(self.owner.iter_mut()) {
            if *b && *o == 0 {
                *o = seg;
            }
        }
        self.placed[seg as usize - 1].area = visible;
        true
    }

    /// Overlay a mask that lies inside one placed segment onto that segment.
    fn place_contained(&mut self, bits: &[bool], area: u64, m: &ScoredMask, slack: f64) -> bool {
        let mut overlap: BTreeMap<u32, u64> = BTreeMap::new();
        for (b, o) in bits.iter().zip(&self.owner) {
            if *b && *o != 0 {
                *overlap.entry(*o).or_default() += 1;
            }
        }
        // Host: the placed segment covering most of the mask, lowest id on ties.
        let Some((&host, &inside)) = overlap.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
            return false;
        };
        if !covered_with_slack(inside, area, slack) {
            return false;
        }
        let seg = self.open_segment(&m.category);
        let mut painted = 0u64;
        let mut taken = 0u64;
        for (b, o) in bits.iter().zip(self.owner.iter_mut()) {
            if *b && (*o == 0 || *o == host) {
                if *o == host {
                    taken += 1;
                }
                *o = seg;
                painted += 1;
            }
        }
        self.placed[host as usize - 1].area -= taken;
        self.placed[seg as usize - 1].area = painted;
        true
    }

    /// Drop emptied segments, merge stuff segments of one category, and
    /// renumber densely from 1 in placement order.
    fn finish(self) -> Result<PanopticMap> {
        let mut remap = vec![0u32; self.placed.len() + 1];
        let mut segments: Vec<SegmentInfo> = Vec::new();
        let mut stuff_ids: HashMap<u32, u32> = HashMap::new();
        for (i, p) in self.placed.iter().enumerate() {
            if p.area == 0 {
                continue;
            }
            let cat = &p.category;
            let existing = if cat.is_thing { None } else { stuff_ids.get(&cat.id).copied() };
            let id = match existing {
                Some(id) => {
                    segments[id as usize - 1].area += p.area;
                    id
                }
                None => {
                    let id = segments.len() as u32 + 1;
                    segments.push(SegmentInfo { id, category_id: cat.id, area: p.area, is_thing: cat.is_thing });
                    if !cat.is_thing {
                        stuff_ids.insert(cat.id, id);
                    }
                    id
                }
            };
            remap[i + 1] = id;
        }
        let ids = self.owner.iter().map(|&o| remap[o as usize]).collect();
        PanopticMap::new(self.height, self.width, ids, segments)
    }
}

fn canvas_for(masks: &[ScoredMask]) -> Result<Canvas> {
    masks
        .first()
        .map(|m| Canvas::new(m.mask.height(), m.mask.width()))
        .ok_or_else(|| Error::Degenerate("fusion needs at least one mask to size the canvas".into()))
}

/// Greedy placement of the base model: background and low-confidence masks are
/// dropped, then masks are painted in descending score onto free pixels when
/// at least `min_visible_ratio` of each remains visible.
pub fn original_fusion(masks: &[ScoredMask], cfg: &FusionConfig) -> Result<PanopticMap> {
    cfg.validate()?;
    check_dims(masks)?;
    let mut canvas = canvas_for(masks)?;
    let kept: Vec<&ScoredMask> = masks.iter().filter(|m| !m.is_background && m.score >= cfg.score_threshold).collect();
    for i in placement_order(&kept) {
        let m = kept[i];
        let area = m.mask.area();
        if area == 0 {
            continue;
        }
        let bits = m.mask.to_row_major();
        canvas.place_visible(&bits, area, m, cfg.min_visible_ratio);
    }
    canvas.finish()
}

/// Overlap-aware placement: background-agnostic confidence filter, mask NMS,
/// then placement by the visible-area rule or, failing that, by selective
/// overlap onto a single host segment.
pub fn esf_omi_fusion(masks: &[ScoredMask], cfg: &FusionConfig) -> Result<PanopticMap> {
    cfg.validate()?;
    check_dims(masks)?;
    let mut canvas = canvas_for(masks)?;
    let filtered: Vec<ScoredMask> = masks.iter().filter(|m| m.score >= cfg.score_threshold).cloned().collect();
    // Already in placement order.
    let survivors = mask_nms(&filtered, cfg.nms_iou_threshold)?;
    for m in &survivors {
        let area = m.mask.area();
        if area == 0 {
            continue;
        }
        let bits = m.mask.to_row_major();
        if !canvas.place_visible(&bits, area, m, cfg.min_visible_ratio) {
            canvas.place_contained(&bits, area, m, cfg.containment_slack);
        }
    }
    canvas.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionAlgorithm {
    Original,
    EsfOmi,
}

pub fn fuse(algorithm: FusionAlgorithm, masks: &[ScoredMask], cfg: &FusionConfig) -> Result<PanopticMap> {
    match algorithm {
        FusionAlgorithm::Original => original_fusion(masks, cfg),
        FusionAlgorithm::EsfOmi => esf_omi_fusion(masks, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{LabelSpaceId, SoftMask};
    use crate::semantics::EmbeddingVector;

    fn cat(id: u32, thing: bool) -> SegCategory {
        SegCategory::new(id, format!("c{id}"), thing, LabelSpaceId::Test)
    }

    fn rect(h: u32, w: u32, r0: u32, r1: u32, c0: u32, c1: u32) -> BinaryMask {
        let mut bits = vec![false; (h * w) as usize];
        for r in r0..r1 {
            for c in c0..c1 {
                bits[(r * w + c) as usize] = true;
            }
        }
        BinaryMask::from_row_major(h, w, &bits).unwrap()
    }

    fn scored(mask: BinaryMask, c: SegCategory, score: f64) -> ScoredMask {
        ScoredMask {
            mask,
            class_index: c.id as usize - 1,
            category: c,
            score,
            background_prob: 1.0 - score,
            is_background: 1.0 - score > score,
        }
    }

    #[test]
    fn score_and_label_examples() {
        let space = LabelSpace::from_names(LabelSpaceId::Test, &[("a", true), ("b", true)]).unwrap();
        let mut pred = Prediction {
            soft_mask: SoftMask::new(1, 2, vec![0.9, 0.2]).unwrap(),
            image_embedding: EmbeddingVector::new(vec![1.0]),
            source: LabelSpaceId::Train(1),
            class_probs: Some(vec![0.1, 0.9, 0.0]),
            score: None,
        };
        let s = score_and_label(&pred, &space, 0.5).unwrap();
        assert_eq!(s.category.name, "b");
        assert_eq!(s.score, 0.9);
        assert!(!s.is_background);
        assert_eq!(s.mask.area(), 1);

        pred.class_probs = Some(vec![0.2, 0.1, 0.7]);
        let s = score_and_label(&pred, &space, 0.5).unwrap();
        assert!(s.is_background);
        assert_eq!(s.category.name, "a");
        assert_eq!(s.score, 0.2);

        pred.class_probs = Some(vec![0.4, 0.4, 0.2]);
        assert_eq!(score_and_label(&pred, &space, 0.5).unwrap().class_index, 0);

        pred.class_probs = None;
        assert!(score_and_label(&pred, &space, 0.5).is_err());
    }

    #[test]
    fn single_mask_becomes_single_segment() {
        let m = rect(4, 4, 1, 3, 1, 3);
        let out = original_fusion(&[scored(m.clone(), cat(1, true), 0.95)], &FusionConfig::original()).unwrap();
        assert_eq!(out.segments().len(), 1);
        assert_eq!(out.segment_mask(1), m);
    }

    #[test]
    fn mostly_covered_mask_is_dropped() {
        // 20 pixels placed first; the second mask has 20 pixels of which 19 are
        // already taken -> 5% visible < 80%.
        let big = rect(4, 10, 0, 2, 0, 10);
        let mut bits = big.to_row_major();
        bits[20] = true;
        bits[0] = false;
        let second = BinaryMask::from_row_major(4, 10, &bits).unwrap();
        let cfg = FusionConfig::original();
        let out = original_fusion(&[scored(big, cat(1, true), 0.99), scored(second, cat(2, true), 0.9)], &cfg).unwrap();
        assert_eq!(out.segments().len(), 1);
    }

    #[test]
    fn contained_mask_survives_only_with_selective_overlap() {
        let person = rect(8, 8, 0, 8, 1, 7);
        let glasses = rect(8, 8, 2, 3, 2, 6);
        let masks = [scored(person.clone(), cat(1, true), 0.95), scored(glasses.clone(), cat(2, true), 0.9)];
        let orig = original_fusion(&masks, &FusionConfig::original()).unwrap();
        assert_eq!(orig.segments().len(), 1);

        let esf = esf_omi_fusion(&masks, &FusionConfig::esf_omi()).unwrap();
        assert_eq!(esf.segments().len(), 2);
        assert_eq!(esf.segment_mask(2), glasses);
        assert_eq!(esf.segment(1).unwrap().area, person.area() - glasses.area());
    }

    #[test]
    fn esf_keeps_background_dominated_mask() {
        let m = rect(4, 4, 0, 2, 0, 2);
        let mut s = scored(m, cat(1, true), 0.3);
        s.background_prob = 0.7;
        s.is_background = true;
        let cfg = FusionConfig { score_threshold: 0.25, ..FusionConfig::esf_omi() };
        assert_eq!(esf_omi_fusion(&[s.clone()], &cfg).unwrap().segments().len(), 1);
        assert!(original_fusion(&[s], &cfg).unwrap().segments().is_empty());
    }

    #[test]
    fn nms_examples() {
        let a = rect(1, 10, 0, 1, 0, 10);
        let mut bits = a.to_row_major();
        bits[9] = false;
        // IoU 9 / 10 = 0.9.
        let b = BinaryMask::from_row_major(1, 10, &bits).unwrap();
        let masks = [scored(b.clone(), cat(1, true), 0.7), scored(a.clone(), cat(1, true), 0.9)];
        let kept = mask_nms(&masks, 0.8).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(mask_nms(&masks, 0.95).unwrap().len(), 2);

        let same = [scored(a.clone(), cat(1, true), 0.6), scored(a.clone(), cat(2, true), 0.8)];
        let kept = mask_nms(&same, 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.8);

        let left = rect(1, 10, 0, 1, 0, 5);
        let right = rect(1, 10, 0, 1, 5, 10);
        let disjoint = [scored(left, cat(1, true), 0.6), scored(right, cat(1, true), 0.8)];
        assert_eq!(mask_nms(&disjoint, 0.1).unwrap().len(), 2);
    }

    #[test]
    fn stuff_masks_merge() {
        let sky_a = rect(4, 4, 0, 1, 0, 4);
        let sky_b = rect(4, 4, 3, 4, 0, 4);
        let masks = [scored(sky_a, cat(1, false), 0.9), scored(sky_b, cat(1, false), 0.85)];
        let out = original_fusion(&masks, &FusionConfig::original()).unwrap();
        assert_eq!(out.segments().len(), 1);
        assert_eq!(out.segments()[0].area, 8);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let masks =
            [scored(rect(2, 2, 0, 1, 0, 1), cat(1, true), 0.9), scored(rect(3, 3, 0, 1, 0, 1), cat(1, true), 0.9)];
        assert!(original_fusion(&masks, &FusionConfig::original()).is_err());
        assert!(esf_omi_fusion(&masks, &FusionConfig::esf_omi()).is_err());
        assert!(mask_nms(&masks, 0.5).is_err());
    }

    #[test]
    fn panoptic_map_validation() {
        let ok =
            PanopticMap::new(1, 2, vec![1, 0], vec![SegmentInfo { id: 1, category_id: 3, area: 1, is_thing: true }]);
        assert!(ok.is_ok());
        let bad_area =
            PanopticMap::new(1, 2, vec![1, 1], vec![SegmentInfo { id: 1, category_id: 3, area: 1, is_thing: true }]);
        assert!(bad_area.is_err());
        assert!(PanopticMap::new(1, 2, vec![2, 0], vec![]).is_err());
    }
}
