use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::LabelSpace;
use crate::postproc::PanopticMap;

/// Label value marking ignored pixels in a [`ClassMap`].
pub const VOID_LABEL: u32 = u32::MAX;

/// Per-pixel class positions (row-major). Values index the label space;
/// [`VOID_LABEL`] marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: u32,
    pub width: u32,
    pub labels: Vec<u32>,
}

impl ClassMap {
    pub fn new(height: u32, width: u32, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height as usize * width as usize {
            return Err(Error::Dimension(format!("class map {height}x{width} with {} labels", labels.len())));
        }
        Ok(ClassMap { height, width, labels })
    }

    /// Class position of each pixel's segment; void stays void.
    pub fn from_panoptic(map: &PanopticMap, space: &LabelSpace) -> Result<Self> {
        let mut lookup = std::collections::HashMap::new();
        for s in map.segments() {
            let (pos, _) = space
                .by_id(s.category_id)
                .ok_or_else(|| Error::LabelSpace(format!("segment category {} not in label space", s.category_id)))?;
            lookup.insert(s.id, pos as u32);
        }
        let labels = map.ids().iter().map(|id| if *id == 0 { VOID_LABEL } else { lookup[id] }).collect();
        ClassMap::new(map.height(), map.width(), labels)
    }
}

/// `(C + 1) x (C + 1)` pixel counts, rows = ground truth, columns = prediction.
/// The last row and column hold void. Ground-truth void pixels are never
/// counted; a void prediction on a labelled pixel counts against that class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticConfusion {
    num_classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemanticMetrics {
    pub miou: f64,
    pub fwiou: f64,
    pub macc: f64,
    pub pacc: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

impl SemanticConfusion {
    pub fn new(num_classes: usize) -> Self {
        let n = num_classes + 1;
        SemanticConfusion { num_classes, counts: vec![0; n * n] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * (self.num_classes + 1) + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn slot(&self, label: u32) -> Result<usize> {
        if label == VOID_LABEL {
            Ok(self.num_classes)
        } else if (label as usize) < self.num_classes {
            Ok(label as usize)
        } else {
            Err(Error::LabelSpace(format!("class {label} outside a space of {} classes", self.num_classes)))
        }
    }

    pub fn accumulate(&mut self, pred: &ClassMap, gt: &ClassMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::Dimension(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let n = self.num_classes + 1;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (gs, ps) = (self.slot(g)?, self.slot(p)?);
            if gs == self.num_classes {
                continue;
            }
            self.counts[gs * n + ps] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SemanticConfusion) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Dimension("confusion matrices of different size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Result<SemanticMetrics> {
        let c = self.num_classes;
        let mut per_class_iou = Vec::with_capacity(c);
        let (mut iou_sum, mut iou_n) = (0.0, 0usize);
        let (mut acc_sum, mut acc_n) = (0.0, 0usize);
        let (mut fw_sum, mut tp_total, mut gt_total) = (0.0, 0u64, 0u64);
        for k in 0..c {
            let tp = self.count(k, k);
            let gt: u64 = (0..=c).map(|j| self.count(k, j)).sum();
            let pred: u64 = (0..c).map(|i| self.count(i, k)).sum();
            let union = gt + pred - tp;
            if union == 0 {
                per_class_iou.push(None);
                continue;
            }
            let iou = tp as f64 / union as f64;
            per_class_iou.push(Some(iou));
            iou_sum += iou;
            iou_n += 1;
            if gt > 0 {
                acc_sum += tp as f64 / gt as f64;
                acc_n += 1;
                fw_sum += gt as f64 * iou;
            }
            tp_total += tp;
            gt_total += gt;
        }
        if gt_total == 0 {
            return Err(Error::Degenerate("no labelled pixels to evaluate".into()));
        }
        Ok(SemanticMetrics {
            miou: iou_sum / iou_n as f64,
            fwiou: fw_sum / gt_total as f64,
            macc: acc_sum / acc_n as f64,
            pacc: tp_total as f64 / gt_total as f64,
            per_class_iou,
        })
    }
}

/// mIoU, frequency-weighted IoU, mean class accuracy and pixel accuracy for a
/// single pair of maps.
pub fn semantic_metrics(pred: &ClassMap, gt: &ClassMap, space: &LabelSpace) -> Result<SemanticMetrics> {
    let mut conf = SemanticConfusion::new(space.len());
    conf.accumulate(pred, gt)?;
    conf.metrics()
}
