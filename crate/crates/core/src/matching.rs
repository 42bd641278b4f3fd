//! Bipartite matching between predictions and ground truth, and the set loss
//! built on it: class cross-entropy for every prediction plus mask binary
//! cross-entropy for the matched ones.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::semantics::Prediction;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthSegment {
    /// Position of the category in the label space, i.e. its slot in the
    /// `C + 1` probability vector.
    pub class: usize,
    pub mask: BinaryMask,
}

impl GroundTruthSegment {
    pub fn new(class: usize, mask: BinaryMask) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Degenerate("ground-truth mask is empty".into()));
        }
        Ok(GroundTruthSegment { class, mask })
    }
}

/// Ground truth `i` is matched to prediction `pairs[i]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub pairs: Vec<usize>,
    pub unmatched_predictions: Vec<usize>,
    /// Sum of `cost[i][pairs[i]]`, accumulated in ground-truth order.
    pub total_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification_part: f64,
    pub mask_part: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn class_term(probs: &[f64], slot: usize) -> f64 {
    -clamp_prob(probs[slot]).ln()
}

fn mask_term(pred: &Prediction, gt: &BinaryMask) -> Result<f64> {
    let soft = &pred.soft_mask;
    if soft.height() != gt.height() || soft.width() != gt.width() {
        return Err(Error::Dimension(format!(
            "soft mask {}x{} vs ground truth {}x{}",
            soft.height(),
            soft.width(),
            gt.height(),
            gt.width()
        )));
    }
    let target = gt.to_row_major();
    let sum: f64 = soft
        .values()
        .iter()
        .zip(&target)
        .map(|(&m, &y)| {
            let m = clamp_prob(m);
            if y {
                -m.ln()
            } else {
                -(1.0 - m).ln()
            }
        })
        .sum();
    Ok(sum / target.len() as f64)
}

fn probs_of(pred: &Prediction, index: usize) -> Result<&[f64]> {
    pred.class_probs.as_deref().ok_or(Error::MissingClassProbs(index))
}

/// Class cross-entropy plus mean per-pixel binary cross-entropy.
pub fn pair_cost(pred: &Prediction, gt: &GroundTruthSegment) -> Result<f64> {
    let probs = probs_of(pred, 0)?;
    if gt.class + 1 >= probs.len() {
        return Err(Error::LabelSpace(format!(
            "ground-truth class slot {} outside a {}-way distribution",
            gt.class,
            probs.len()
        )));
    }
    Ok(class_term(probs, gt.class) + mask_term(pred, &gt.mask)?)
}

/// Minimum-cost injective assignment of rows (ground truth) to columns
/// (predictions). Requires `cols >= rows`.
///
/// Shortest augmenting path with potentials, O(rows^2 * cols). Columns are
/// scanned in ascending order with strict comparisons, so among equal-cost
/// alternatives the lower prediction index is taken first.
pub fn hungarian_assign(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map(|r| r.len()).unwrap_or(0);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Dimension("cost matrix rows have unequal length".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Config("cost matrix contains non-finite values".into()));
    }
    if n == 0 {
        return Ok(Assignment { pairs: Vec::new(), unmatched_predictions: Vec::new(), total_cost: 0.0 });
    }
    if m < n {
        return Err(Error::Infeasible { rows: n, cols: m });
    }

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // row_of[j]: 1-based row matched to column j (0 = free); column 0 is the
    // virtual source of each augmenting search.
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = vec![0usize; n];
    let mut unmatched = Vec::with_capacity(m - n);
    for j in 1..=m {
        if row_of[j] > 0 {
            pairs[row_of[j] - 1] = j - 1;
        } else {
            unmatched.push(j - 1);
        }
    }
    let total_cost = pairs.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment { pairs, unmatched_predictions: unmatched, total_cost })
}

/// Set loss with its optimal assignment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetLoss {
    pub loss: LossBreakdown,
    pub assignment: Assignment,
}

/// Every prediction pays class cross-entropy against its target, which is the
/// no-object slot when unmatched; only matched predictions pay mask loss.
///
/// The solver sees `pair_cost - no_object_cost` per entry, so the assignment
/// it returns minimizes the full loss rather than the matched part alone.
pub fn set_loss_with_assignment(preds: &[Prediction], gts: &[GroundTruthSegment]) -> Result<SetLoss> {
    if preds.len() < gts.len() {
        return Err(Error::Infeasible { rows: gts.len(), cols: preds.len() });
    }
    let probs: Vec<&[f64]> = preds.iter().enumerate().map(|(i, p)| probs_of(p, i)).collect::<Result<_>>()?;
    let width = probs.first().map(|p| p.len()).unwrap_or(0);
    if probs.iter().any(|p| p.len() != width || p.len() < 2) {
        return Err(Error::Dimension(
            "all predictions need class distributions of the same length (at least 2)".into(),
        ));
    }
    let null_slot = width.saturating_sub(1);
    if let Some(g) = gts.iter().find(|g| g.class >= null_slot) {
        return Err(Error::LabelSpace(format!("ground-truth class slot {} outside {null_slot} classes", g.class)));
    }
    let no_object: Vec<f64> = probs.iter().map(|p| class_term(p, null_slot)).collect();

    // Row i, column j: (class term, mask term).
    let terms: Vec<Vec<(f64, f64)>> = gts
        .par_iter()
        .map(|g| {
            preds
                .iter()
                .zip(&probs)
                .map(|(p, pr)| Ok((class_term(pr, g.class), mask_term(p, &g.mask)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let relative: Vec<Vec<f64>> =
        terms.iter().map(|row| row.iter().zip(&no_object).map(|((c, m), z)| c + m - z).collect()).collect();
    let assignment = hungarian_assign(&relative)?;

    let mut partner: Vec<Option<usize>> = vec![None; preds.len()];
    for (i, &j) in assignment.pairs.iter().enumerate() {
        partner[j] = Some(i);
    }
    let mut classification = 0.0;
    let mut mask = 0.0;
    for (j, p) in partner.iter().enumerate() {
        match p {
            Some(i) => {
                let (c, m) = terms[*i][j];
                classification += c;
                mask += m;
            }
            None => classification += no_object[j],
        }
    }
    Ok(SetLoss {
        loss: LossBreakdown { total: classification + mask, classification_part: classification, mask_part: mask },
        assignment,
    })
}

pub fn set_loss(preds: &[Prediction], gts: &[GroundTruthSegment]) -> Result<LossBreakdown> {
    Ok(set_loss_with_assignment(preds, gts)?.loss)
}
