//! Evaluation metrics: semantic, panoptic, instance and the combined
//! thing/stuff score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod instance;
pub mod panoptic;
pub mod piq;
pub mod semantic;

pub use instance::{default_iou_thresholds, instance_ap, ApReport, DetectionRecord, InstanceAnnotation};
pub use panoptic::{
    panoptic_quality, pq_dataset_stats, pq_image_stats, PqOptions, PqResult, PqStats, PQ_MATCH_THRESHOLD,
};
pub use piq::{piq_from_scores, piq_score, PiqAggregation, PiqImage, PiqReport};
pub use semantic::{semantic_metrics, ClassMap, SemanticConfusion, SemanticMetrics, VOID_LABEL};

const SMALL_MAX: u64 = 32 * 32;
const MEDIUM_MAX: u64 = 96 * 96;

/// Object size band by pixel area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaBand {
    #[default]
    All,
    /// Below 32².
    Small,
    /// From 32² up to but excluding 96².
    Medium,
    /// 96² and above.
    Large,
}

impl AreaBand {
    pub fn contains(self, area: u64) -> bool {
        match self {
            AreaBand::All => true,
            AreaBand::Small => area < SMALL_MAX,
            AreaBand::Medium => (SMALL_MAX..MEDIUM_MAX).contains(&area),
            AreaBand::Large => area >= MEDIUM_MAX,
        }
    }
}

/// Unweighted mean of a metric over the sub-datasets of a benchmark.
pub fn benchmark_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Degenerate("benchmark average over no sub-datasets".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
