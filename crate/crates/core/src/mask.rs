//! Binary-mask primitives and the category / label-space types shared by every
//! other module.
//!
//! Masks are stored run-length encoded in column-major scan order. The run list
//! alternates background and foreground counts and always starts with the
//! background count, so a mask whose first pixel is set begins with a `0` run.
//! This is the layout used by the common panoptic/COCO annotation tooling, which
//! lets externally produced masks round-trip bit-exactly.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Default threshold for turning soft decoder activations into binary masks.
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// Dense row-major bit grid. Dimensions are always positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(height: u32, width: u32, bits: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        let n = height as usize * width as usize;
        if bits.len() != n {
            return Err(Error::Dimension(format!("grid of {height}x{width} needs {n} bits, got {}", bits.len())));
        }
        Ok(BitGrid { height, width, bits })
    }

    pub fn zeros(height: u32, width: u32) -> Result<Self> {
        check_dims(height, width)?;
        Ok(BitGrid { height, width, bits: vec![false; height as usize * width as usize] })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }

    /// Row-major view of the bits.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

fn check_dims(height: u32, width: u32) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!("mask dimensions must be positive, got {height}x{width}")));
    }
    Ok(())
}

/// A binary region over an `height x width` canvas, run-length encoded.
///
/// The run list is kept canonical: only the leading background run may have
/// length zero, so two masks are equal iff their pixels are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    runs: Vec<u32>,
}

impl BinaryMask {
    /// Build a mask from a run list, validating the pixel total.
    ///
    /// Interior zero-length runs are folded into their neighbours so that the
    /// stored form is canonical.
    pub fn from_runs(height: u32, width: u32, runs: &[u32]) -> Result<Self> {
        check_dims(height, width)?;
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(Error::Corrupt(format!(
                "run lengths sum to {total}, expected {expected} for {height}x{width}"
            )));
        }
        let mut canon: Vec<u32> = Vec::with_capacity(runs.len());
        // Even positions are background runs, odd positions foreground.
        for (i, &r) in runs.iter().enumerate() {
            let value = i % 2 == 1;
            if r == 0 {
                continue;
            }
            let last_value = canon.len().is_multiple_of(2);
            if !canon.is_empty() && last_value == value {
                *canon.last_mut().unwrap() += r;
            } else if canon.is_empty() && value {
                canon.push(0);
                canon.push(r);
            } else {
                canon.push(r);
            }
        }
        if canon.is_empty() {
            canon.push(0);
        }
        Ok(BinaryMask { height, width, runs: canon })
    }

    /// An all-background mask.
    pub fn empty(height: u32, width: u32) -> Result<Self> {
        check_dims(height, width)?;
        Ok(BinaryMask { height, width, runs: vec![height * width] })
    }

    /// Encode from row-major bits.
    pub fn from_row_major(height: u32, width: u32, bits: &[bool]) -> Result<Self> {
        let grid = BitGrid::new(height, width, bits.to_vec())?;
        Ok(encode_rle(&grid))
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn pixel_count(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!("mask {}x{} vs {}x{}", self.height, self.width, other.height, other.width)))
        }
    }

    /// Half-open column-major index ranges covered by the foreground.
    pub fn foreground_intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += r as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    /// Number of pixels set in both masks. Panics on dimension mismatch only
    /// in debug builds; callers go through [`mask_iou`] and friends.
    pub fn intersection_area(&self, other: &BinaryMask) -> u64 {
        debug_assert!(self.same_dims(other));
        let a: Vec<(u64, u64)> = self.foreground_intervals().collect();
        let b: Vec<(u64, u64)> = other.foreground_intervals().collect();
        let (mut i, mut j, mut total) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if hi > lo {
                total += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same_dims(other)?;
        let mut intervals: Vec<(u64, u64)> = self.foreground_intervals().chain(other.foreground_intervals()).collect();
        intervals.sort_unstable();
        let mut merged: Vec<(u64, u64)> = Vec::with_capacity(intervals.len());
        for (s, e) in intervals {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        Ok(self.with_intervals(&merged))
    }

    fn with_intervals(&self, intervals: &[(u64, u64)]) -> BinaryMask {
        let mut runs = Vec::with_capacity(intervals.len() * 2 + 1);
        let mut pos = 0u64;
        for &(s, e) in intervals {
            runs.push((s - pos) as u32);
            runs.push((e - s) as u32);
            pos = e;
        }
        runs.push((self.pixel_count() - pos) as u32);
        BinaryMask::from_runs(self.height, self.width, &runs).expect("intervals stay in bounds")
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        let idx = col as u64 * self.height as u64 + row as u64;
        self.foreground_intervals().any(|(s, e)| (s..e).contains(&idx))
    }

    /// Decode into row-major bits.
    pub fn to_row_major(&self) -> Vec<bool> {
        let h = self.height as u64;
        let w = self.width as usize;
        let mut bits = vec![false; self.pixel_count() as usize];
        for (s, e) in self.foreground_intervals() {
            for idx in s..e {
                let row = (idx % h) as usize;
                let col = (idx / h) as usize;
                bits[row * w + col] = true;
            }
        }
        bits
    }

    pub fn to_grid(&self) -> BitGrid {
        BitGrid { height: self.height, width: self.width, bits: self.to_row_major() }
    }
}

/// Run-length encode a dense grid, scanning columns top to bottom.
pub fn encode_rle(grid: &BitGrid) -> BinaryMask {
    let (h, w) = (grid.height, grid.width);
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for col in 0..w {
        for row in 0..h {
            let v = grid.get(row, col);
            if v != current {
                runs.push(count);
                count = 0;
                current = v;
            }
            count += 1;
        }
    }
    runs.push(count);
    BinaryMask { height: h, width: w, runs }
}

/// Decode a run list back into a dense grid.
pub fn decode_rle(height: u32, width: u32, runs: &[u32]) -> Result<BitGrid> {
    Ok(BinaryMask::from_runs(height, width, runs)?.to_grid())
}

/// Intersection over union. Two empty masks have IoU 0.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_same_dims(b)?;
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// True iff at least `1 - slack` of `small`'s pixels lie inside `big`.
pub fn contains_with_slack(big: &BinaryMask, small: &BinaryMask, slack: f64) -> Result<bool> {
    big.check_same_dims(small)?;
    if !(0.0..1.0).contains(&slack) {
        return Err(Error::Config(format!("slack must be in [0,1), got {slack}")));
    }
    let area = small.area();
    if area == 0 {
        return Err(Error::Degenerate("containment test against an empty mask".into()));
    }
    Ok(covered_with_slack(big.intersection_area(small), area, slack))
}

/// `inside / area >= 1 - slack`, exact when `slack == 0`.
pub(crate) fn covered_with_slack(inside: u64, area: u64, slack: f64) -> bool {
    if slack == 0.0 {
        return inside == area;
    }
    inside as f64 / area as f64 >= 1.0 - slack
}

impl fmt::Display for BinaryMask {
    /// Textual form: `height width run0 run1 ...`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.height, self.width)?;
        for r in &self.runs {
            write!(f, " {r}")?;
        }
        Ok(())
    }
}

impl FromStr for BinaryMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut nums =
            s.split_whitespace().map(|t| t.parse::<u32>().map_err(|_| Error::Format(format!("bad RLE token '{t}'"))));
        let height = nums.next().ok_or_else(|| Error::Format("RLE text missing height".into()))??;
        let width = nums.next().ok_or_else(|| Error::Format("RLE text missing width".into()))??;
        let runs = nums.collect::<Result<Vec<u32>>>()?;
        if runs.is_empty() {
            return Err(Error::Format("RLE text has no runs".into()));
        }
        BinaryMask::from_runs(height, width, &runs)
    }
}

impl Serialize for BinaryMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Raw decoder activations in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    height: u32,
    width: u32,
    values: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: u32, width: u32, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        let n = height as usize * width as usize;
        if values.len() != n {
            return Err(Error::Dimension(format!(
                "soft mask of {height}x{width} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("soft mask value {v} outside [0,1]")));
        }
        Ok(SoftMask { height, width, values })
    }

    /// A hard 0/1 soft mask matching a binary mask.
    pub fn from_binary(mask: &BinaryMask) -> Self {
        SoftMask {
            height: mask.height(),
            width: mask.width(),
            values: mask.to_row_major().into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn binarize(&self, threshold: f64) -> Result<BinaryMask> {
        binarize_soft_mask(self, threshold)
    }
}

/// A pixel is set iff its activation is strictly above `threshold`.
pub fn binarize_soft_mask(mask: &SoftMask, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("binarize threshold must be in (0,1), got {threshold}")));
    }
    let bits: Vec<bool> = mask.values.iter().map(|&v| v > threshold).collect();
    BinaryMask::from_row_major(mask.height, mask.width, &bits)
}

/// Which label space a category or prediction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSpaceId {
    /// Training label space `k`, counted from 1.
    Train(u32),
    /// The label space supplied at inference time.
    Test,
}

impl fmt::Display for LabelSpaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSpaceId::Train(k) => write!(f, "{k}"),
            LabelSpaceId::Test => f.write_str("test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegCategory {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
    pub source: LabelSpaceId,
}

impl SegCategory {
    pub fn new(id: u32, name: impl Into<String>, is_thing: bool, source: LabelSpaceId) -> Self {
        SegCategory { id, name: name.into(), is_thing, source }
    }
}

/// Lowercase and collapse whitespace, the comparison key for category names.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// An ordered, non-empty set of categories with unique ids and names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    id: LabelSpaceId,
    categories: Vec<SegCategory>,
}

impl LabelSpace {
    pub fn new(id: LabelSpaceId, categories: Vec<SegCategory>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::LabelSpace(format!("label space {id} is empty")));
        }
        let mut names = HashSet::new();
        let mut ids = HashSet::new();
        for c in &categories {
            let key = normalize_name(&c.name);
            if key.is_empty() {
                return Err(Error::LabelSpace(format!("category {} in label space {id} has an empty name", c.id)));
            }
            if !names.insert(key) {
                return Err(Error::LabelSpace(format!("duplicate category name '{}' in label space {id}", c.name)));
            }
            if !ids.insert(c.id) {
                return Err(Error::LabelSpace(format!("duplicate category id {} in label space {id}", c.id)));
            }
        }
        Ok(LabelSpace { id, categories })
    }

    /// Convenience constructor: ids `1..=C` in order, tagged with `id`.
    pub fn from_names(id: LabelSpaceId, names: &[(&str, bool)]) -> Result<Self> {
        let cats =
            names.iter().enumerate().map(|(i, &(n, thing))| SegCategory::new(i as u32 + 1, n, thing, id)).collect();
        LabelSpace::new(id, cats)
    }

    pub fn id(&self) -> LabelSpaceId {
        self.id
    }

    pub fn categories(&self) -> &[SegCategory] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&SegCategory> {
        self.categories.get(index)
    }

    /// Position and category for a category id.
    pub fn by_id(&self, id: u32) -> Option<(usize, &SegCategory)> {
        self.categories.iter().enumerate().find(|(_, c)| c.id == id)
    }

    pub fn position_by_name(&self, name: &str) -> Option<usize> {
        let key = normalize_name(name);
        self.categories.iter().position(|c| normalize_name(&c.name) == key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: u32, w: u32, rows: &[&[u8]]) -> BitGrid {
        let bits = rows.iter().flat_map(|r| r.iter().map(|&b| b == 1)).collect();
        BitGrid::new(h, w, bits).unwrap()
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_rle(&grid(2, 2, &[&[0, 0], &[0, 0]])).runs(), &[4]);
        assert_eq!(encode_rle(&grid(2, 2, &[&[1, 1], &[1, 1]])).runs(), &[0, 4]);
        // Column-major scan: (0,0) (1,0) (0,1) (1,1) -> 0 0 1 0.
        assert_eq!(encode_rle(&grid(2, 2, &[&[0, 1], &[0, 0]])).runs(), &[2, 1, 1]);
    }

    #[test]
    fn decode_examples() {
        let g = decode_rle(2, 2, &[4]).unwrap();
        assert!(g.bits().iter().all(|b| !b));
        let g = decode_rle(2, 2, &[2, 1, 1]).unwrap();
        assert_eq!(g.bits(), &[false, true, false, false]);
        assert!(g.get(0, 1));
    }

    #[test]
    fn decode_rejects_bad_sum() {
        assert!(matches!(decode_rle(2, 2, &[2, 1]), Err(Error::Corrupt(_))));
        assert!(matches!(decode_rle(2, 2, &[3, 3]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn empty_grid_is_dimension_error() {
        assert!(matches!(BitGrid::new(0, 3, vec![]), Err(Error::Dimension(_))));
        assert!(matches!(BinaryMask::from_row_major(2, 0, &[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn from_runs_canonicalizes_interior_zero_runs() {
        let m = BinaryMask::from_runs(1, 4, &[2, 0, 2]).unwrap();
        assert_eq!(m.runs(), &[4]);
        let m = BinaryMask::from_runs(1, 4, &[0, 1, 0, 3]).unwrap();
        assert_eq!(m.runs(), &[0, 4]);
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_row_major(1, 4, &[true, true, false, false]).unwrap();
        let b = BinaryMask::from_row_major(1, 4, &[false, true, true, true]).unwrap();
        let c = BinaryMask::from_row_major(1, 4, &[false, false, true, true]).unwrap();
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        // |a| = 2, |b| = 3, overlap 1 -> 1 / 4.
        assert_eq!(mask_iou(&a, &b).unwrap(), 0.25);
        let e = BinaryMask::empty(1, 4).unwrap();
        assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
        let other = BinaryMask::empty(2, 2).unwrap();
        assert!(matches!(mask_iou(&a, &other), Err(Error::Dimension(_))));
    }

    #[test]
    fn binarize_examples() {
        let full = SoftMask::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(full.binarize(0.5).unwrap().area(), 4);
        let none = SoftMask::new(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(none.binarize(0.5).unwrap().area(), 0);
        let mixed = SoftMask::new(1, 2, vec![0.4, 0.6]).unwrap();
        let m = mixed.binarize(0.5).unwrap();
        assert!(!m.get(0, 0) && m.get(0, 1));
        // Strict inequality: a value equal to the threshold stays off.
        let edge = SoftMask::new(1, 1, vec![0.5]).unwrap();
        assert!(edge.binarize(0.5).unwrap().is_empty());
        assert!(matches!(full.binarize(0.0), Err(Error::Config(_))));
        assert!(matches!(full.binarize(1.0), Err(Error::Config(_))));
    }

    #[test]
    fn slack_examples() {
        let big = BinaryMask::from_row_major(1, 20, &[true; 20]).unwrap();
        let mut bits = vec![false; 20];
        bits[..5].iter_mut().for_each(|b| *b = true);
        let small = BinaryMask::from_row_major(1, 20, &bits).unwrap();
        assert!(contains_with_slack(&big, &small, 0.0).unwrap());

        let left = BinaryMask::from_row_major(1, 20, &bits).unwrap();
        let mut rbits = vec![false; 20];
        rbits[10..].iter_mut().for_each(|b| *b = true);
        let right = BinaryMask::from_row_major(1, 20, &rbits).unwrap();
        assert!(!contains_with_slack(&right, &left, 0.9).unwrap());

        // |small| = 10, 9 of them inside big.
        let big_bits: Vec<bool> = (0..20).map(|i| i < 9).collect();
        let small_bits: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let big = BinaryMask::from_row_major(1, 20, &big_bits).unwrap();
        let small = BinaryMask::from_row_major(1, 20, &small_bits).unwrap();
        assert!(contains_with_slack(&big, &small, 0.1).unwrap());
        assert!(!contains_with_slack(&big, &small, 0.05).unwrap());

        let empty = BinaryMask::empty(1, 20).unwrap();
        assert!(matches!(contains_with_slack(&big, &empty, 0.1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn text_form() {
        let m: BinaryMask = "2 2 2 1 1".parse().unwrap();
        assert_eq!(m.to_string(), "2 2 2 1 1");
        assert!("2 2 2 1".parse::<BinaryMask>().is_err());
        assert!("2".parse::<BinaryMask>().is_err());
    }

    #[test]
    fn label_space_validation() {
        let id = LabelSpaceId::Train(1);
        assert!(LabelSpace::new(id, vec![]).is_err());
        assert!(LabelSpace::from_names(id, &[("Face", true), ("face ", true)]).is_err());
        let s = LabelSpace::from_names(id, &[("upper  clothes", true), ("person", true)]).unwrap();
        assert_eq!(s.position_by_name("Upper Clothes"), Some(0));
        assert_eq!(s.by_id(2).unwrap().1.name, "person");
    }

    fn arb_grid() -> impl Strategy<Value = BitGrid> {
        (1u32..=64, 1u32..=64).prop_flat_map(|(h, w)| {
            proptest::collection::vec(any::<bool>(), (h * w) as usize)
                .prop_map(move |bits| BitGrid::new(h, w, bits).unwrap())
        })
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1u32..=12, 1u32..=12).prop_flat_map(|(h, w)| {
            let n = (h * w) as usize;
            (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(any::<bool>(), n)).prop_map(
                move |(a, b)| {
                    (BinaryMask::from_row_major(h, w, &a).unwrap(), BinaryMask::from_row_major(h, w, &b).unwrap())
                },
            )
        })
    }

    proptest! {
        #[test]
        fn rle_round_trip(g in arb_grid()) {
            let m = encode_rle(&g);
            let total: u64 = m.runs().iter().map(|&r| r as u64).sum();
            prop_assert_eq!(total, g.height() as u64 * g.width() as u64);
            prop_assert!(m.runs().iter().skip(1).all(|&r| r > 0));
            prop_assert_eq!(decode_rle(g.height(), g.width(), m.runs()).unwrap(), g);
            let reparsed: BinaryMask = m.to_string().parse().unwrap();
            prop_assert_eq!(reparsed, m);
        }

        #[test]
        fn iou_properties((a, b) in arb_pair()) {
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
            let ra = a.to_row_major();
            let rb = b.to_row_major();
            let inter = ra.iter().zip(&rb).filter(|(x, y)| **x && **y).count() as u64;
            prop_assert_eq!(a.intersection_area(&b), inter);
            let uni = a.union(&b).unwrap();
            let expect: Vec<bool> = ra.iter().zip(&rb).map(|(x, y)| *x || *y).collect();
            prop_assert_eq!(uni.to_row_major(), expect);
        }

        #[test]
        fn exact_containment_is_subset((big, small) in arb_pair()) {
            prop_assume!(!small.is_empty());
            let subset = small
                .to_row_major()
                .iter()
                .zip(big.to_row_major())
                .all(|(s, b)| !*s || b);
            prop_assert_eq!(contains_with_slack(&big, &small, 0.0).unwrap(), subset);
        }

        #[test]
        fn binarize_monotone(
            values in proptest::collection::vec(0.0f64..=1.0, 1..64),
            t1 in 0.01f64..0.99,
            t2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let m = SoftMask::new(1, values.len() as u32, values).unwrap();
            let a = m.binarize(lo).unwrap();
            let b = m.binarize(hi).unwrap();
            prop_assert_eq!(a.intersection_area(&b), b.area());
        }
    }
}
