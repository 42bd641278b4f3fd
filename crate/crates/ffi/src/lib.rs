//! C interface to the mixseg toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new` style
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`MixsegStatus`]; on failure the message is available from
//! [`mixseg_last_error`] on the same thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use mixseg::benchgen::equal_frequency_sampler;
use mixseg::mask::{contains_with_slack, mask_iou, BinaryMask, LabelSpace, LabelSpaceId, SegCategory};
use mixseg::matching::hungarian_assign;
use mixseg::metrics::panoptic_quality;
use mixseg::postproc::{fuse, FusionAlgorithm, FusionConfig, PanopticMap, ScoredMask, SegmentInfo};
use mixseg::semantics::{class_probabilities, ClassEmbeddingTable, EmbeddingVector};
use mixseg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Dimension = 4,
    Corrupt = 5,
    Config = 6,
    Degenerate = 7,
    LabelSpace = 8,
    Infeasible = 9,
    Format = 10,
    Other = 11,
    Panic = 12,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixsegAlgorithm {
    Original = 0,
    EsfOmi = 1,
}

impl From<MixsegAlgorithm> for FusionAlgorithm {
    fn from(a: MixsegAlgorithm) -> Self {
        match a {
            MixsegAlgorithm::Original => FusionAlgorithm::Original,
            MixsegAlgorithm::EsfOmi => FusionAlgorithm::EsfOmi,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixsegFusionConfig {
    pub score_threshold: f64,
    pub nms_iou_threshold: f64,
    pub containment_slack: f64,
    pub min_visible_ratio: f64,
    pub binarize_threshold: f64,
}

impl From<MixsegFusionConfig> for FusionConfig {
    fn from(c: MixsegFusionConfig) -> Self {
        FusionConfig {
            score_threshold: c.score_threshold,
            nms_iou_threshold: c.nms_iou_threshold,
            containment_slack: c.containment_slack,
            min_visible_ratio: c.min_visible_ratio,
            binarize_threshold: c.binarize_threshold,
        }
    }
}

impl From<FusionConfig> for MixsegFusionConfig {
    fn from(c: FusionConfig) -> Self {
        MixsegFusionConfig {
            score_threshold: c.score_threshold,
            nms_iou_threshold: c.nms_iou_threshold,
            containment_slack: c.containment_slack,
            min_visible_ratio: c.min_visible_ratio,
            binarize_threshold: c.binarize_threshold,
        }
    }
}

/// Entry of a panoptic map's segment table.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixsegSegment {
    pub id: u32,
    pub category_id: u32,
    pub area: u64,
    pub is_thing: bool,
}

/// Category of a label space used for evaluation.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixsegCategory {
    pub id: u32,
    pub is_thing: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixsegPq {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

/// Binary mask handle.
pub struct MixsegMask {
    inner: BinaryMask,
}

/// Scored masks awaiting fusion, all of one image size.
pub struct MixsegFusionInput {
    height: u32,
    width: u32,
    masks: Vec<ScoredMask>,
}

/// Panoptic map handle.
pub struct MixsegPanopticMap {
    inner: PanopticMap,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MixsegStatus {
    match e {
        Error::Dimension(_) => MixsegStatus::Dimension,
        Error::Corrupt(_) => MixsegStatus::Corrupt,
        Error::Config(_) => MixsegStatus::Config,
        Error::Degenerate(_) => MixsegStatus::Degenerate,
        Error::LabelSpace(_) => MixsegStatus::LabelSpace,
        Error::Infeasible { .. } => MixsegStatus::Infeasible,
        Error::Format(_) => MixsegStatus::Format,
        _ => MixsegStatus::Other,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Small(usize),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MixsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MixsegStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MixsegStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            MixsegStatus::InvalidArgument
        }
        Ok(Err(Failure::Small(need))) => {
            set_error(format!("buffer too small, {need} elements needed"));
            MixsegStatus::BufferTooSmall
        }
        Ok(Err(Failure::Lib(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            MixsegStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn as_slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn pixels(height: u32, width: u32) -> usize {
    height as usize * width as usize
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn mixseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mixseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Mask from `height * width` row-major bytes (nonzero = foreground).
#[no_mangle]
pub unsafe extern "C" fn mixseg_mask_from_bits(
    height: u32,
    width: u32,
    bits: *const u8,
    out: *mut *mut MixsegMask,
) -> MixsegStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let bits = as_slice(bits, pixels(height, width), "bits")?;
        let b: Vec<bool> = bits.iter().map(|&v| v != 0).collect();
        let inner = BinaryMask::from_row_major(height, width, &b)?;
        *out = Box::into_raw(Box::new(MixsegMask { inner }));
        Ok(())
    })
}

/// Mask from column-major runs starting with a zero run.
#[no_mangle]
pub unsafe extern "C" fn mixseg_mask_from_rle(
    height: u32,
    width: u32,
    runs: *const u32,
    num_runs: usize,
    out: *mut *mut MixsegMask,
) -> MixsegStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let runs = as_slice(runs, num_runs, "runs")?;
        let inner = BinaryMask::from_runs(height, width, runs)?;
        *out = Box::into_raw(Box::new(MixsegMask { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_mask_free(mask: *mut MixsegMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_mask_area(mask: *const MixsegMask, out: *mut u64) -> MixsegStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(mask, "mask")?.inner.area();
        Ok(())
    })
}

/// Copy the canonical runs into `buf`. `*len` receives the run count; when
/// `capacity` is too small nothing is copied and BUFFER_TOO_SMALL is returned.
#[no_mangle]
pub unsafe extern "C" fn mixseg_mask_runs(
    mask: *const MixsegMask,
    buf: *mut u32,
    capacity: usize,
    len: *mut usize,
) -> MixsegStatus {
    guard(|| {
        let runs = as_ref(mask, "mask")?.inner.runs();
        *as_mut(len, "len")? = runs.len();
        if capacity < runs.len() {
            return Err(Failure::Small(runs.len()));
        }
        as_slice_mut(buf, runs.len(), "buf")?.copy_from_slice(runs);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_mask_iou(a: *const MixsegMask, b: *const MixsegMask, out: *mut f64) -> MixsegStatus {
    guard(|| {
        *as_mut(out, "out")? = mask_iou(&as_ref(a, "a")?.inner, &as_ref(b, "b")?.inner)?;
        Ok(())
    })
}

/// Whether at least `1 - slack` of `small` lies inside `big`.
#[no_mangle]
pub unsafe extern "C" fn mixseg_mask_contains(
    big: *const MixsegMask,
    small: *const MixsegMask,
    slack: f64,
    out: *mut bool,
) -> MixsegStatus {
    guard(|| {
        *as_mut(out, "out")? = contains_with_slack(&as_ref(big, "big")?.inner, &as_ref(small, "small")?.inner, slack)?;
        Ok(())
    })
}

/// Softmax over `dot(embedding, class) / tau` for `num_classes` row-major class
/// vectors plus the all-zero no-object entry. Writes `num_classes + 1` values.
#[no_mangle]
pub unsafe extern "C" fn mixseg_class_probabilities(
    embedding: *const f64,
    dim: usize,
    classes: *const f64,
    num_classes: usize,
    tau: f64,
    out: *mut f64,
) -> MixsegStatus {
    guard(|| {
        if dim == 0 || num_classes == 0 {
            return Err(Failure::Invalid("dim and num_classes must be positive".into()));
        }
        let emb = EmbeddingVector::new(as_slice(embedding, dim, "embedding")?.to_vec());
        let flat = as_slice(classes, dim * num_classes, "classes")?;
        let names: Vec<String> = (1..=num_classes).map(|i| format!("class {i}")).collect();
        let pairs: Vec<(&str, bool)> = names.iter().map(|n| (n.as_str(), true)).collect();
        let space = LabelSpace::from_names(LabelSpaceId::Test, &pairs)?;
        let vectors = flat.chunks(dim).map(|c| EmbeddingVector::new(c.to_vec())).collect();
        let table = ClassEmbeddingTable::new(space, vectors)?;
        let probs = class_probabilities(&emb, &table, tau)?;
        as_slice_mut(out, probs.len(), "out")?.copy_from_slice(&probs);
        Ok(())
    })
}

/// Minimum-cost assignment of `rows <= cols` rows of a row-major cost matrix.
/// Writes the chosen column of every row and the total cost.
#[no_mangle]
pub unsafe extern "C" fn mixseg_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    assignment: *mut usize,
    total: *mut f64,
) -> MixsegStatus {
    guard(|| {
        let flat = as_slice(cost, rows * cols, "cost")?;
        let matrix: Vec<Vec<f64>> =
            if cols == 0 { vec![Vec::new(); rows] } else { flat.chunks(cols).map(<[f64]>::to_vec).collect() };
        let a = hungarian_assign(&matrix)?;
        as_slice_mut(assignment, rows, "assignment")?.copy_from_slice(&a.pairs);
        *as_mut(total, "total")? = a.total_cost;
        Ok(())
    })
}

/// Built-in defaults of an algorithm.
#[no_mangle]
pub unsafe extern "C" fn mixseg_fusion_config_default(
    algorithm: MixsegAlgorithm,
    out: *mut MixsegFusionConfig,
) -> MixsegStatus {
    guard(|| {
        let cfg = match algorithm {
            MixsegAlgorithm::Original => FusionConfig::original(),
            MixsegAlgorithm::EsfOmi => FusionConfig::esf_omi(),
        };
        *as_mut(out, "out")? = cfg.into();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_fusion_input_new(
    height: u32,
    width: u32,
    out: *mut *mut MixsegFusionInput,
) -> MixsegStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        if height == 0 || width == 0 {
            return Err(Failure::Invalid("image size must be positive".into()));
        }
        *out = Box::into_raw(Box::new(MixsegFusionInput { height, width, masks: Vec::new() }));
        Ok(())
    })
}

/// Add a mask whose most likely class is `category_id` with probability
/// `score`; `background_prob` is the no-object probability.
#[no_mangle]
pub unsafe extern "C" fn mixseg_fusion_input_add(
    input: *mut MixsegFusionInput,
    mask: *const MixsegMask,
    category_id: u32,
    is_thing: bool,
    score: f64,
    background_prob: f64,
) -> MixsegStatus {
    guard(|| {
        let input = as_mut(input, "input")?;
        let mask = &as_ref(mask, "mask")?.inner;
        if mask.height() != input.height || mask.width() != input.width {
            return Err(Error::Dimension("mask size differs from the fusion input".into()).into());
        }
        if !(0.0..=1.0).contains(&score) || !(0.0..=1.0).contains(&background_prob) {
            return Err(Failure::Invalid("probabilities must lie in [0,1]".into()));
        }
        input.masks.push(ScoredMask {
            mask: mask.clone(),
            category: SegCategory::new(category_id, format!("category {category_id}"), is_thing, LabelSpaceId::Test),
            class_index: 0,
            score,
            background_prob,
            is_background: background_prob > score,
        });
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_fusion_input_free(input: *mut MixsegFusionInput) {
    if !input.is_null() {
        drop(Box::from_raw(input));
    }
}

/// Fuse the collected masks. `config` may be NULL for the algorithm defaults.
/// An input without masks yields an all-void map.
#[no_mangle]
pub unsafe extern "C" fn mixseg_fuse(
    input: *const MixsegFusionInput,
    algorithm: MixsegAlgorithm,
    config: *const MixsegFusionConfig,
    out: *mut *mut MixsegPanopticMap,
) -> MixsegStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let input = as_ref(input, "input")?;
        let cfg: FusionConfig = match config.as_ref() {
            Some(c) => (*c).into(),
            None => match algorithm {
                MixsegAlgorithm::Original => FusionConfig::original(),
                MixsegAlgorithm::EsfOmi => FusionConfig::esf_omi(),
            },
        };
        cfg.validate()?;
        let inner = if input.masks.is_empty() {
            PanopticMap::new(input.height, input.width, vec![0; pixels(input.height, input.width)], vec![])?
        } else {
            fuse(algorithm.into(), &input.masks, &cfg)?
        };
        *out = Box::into_raw(Box::new(MixsegPanopticMap { inner }));
        Ok(())
    })
}

/// Map from row-major segment ids (0 = void) and its segment table.
#[no_mangle]
pub unsafe extern "C" fn mixseg_panoptic_map_new(
    height: u32,
    width: u32,
    ids: *const u32,
    segments: *const MixsegSegment,
    num_segments: usize,
    out: *mut *mut MixsegPanopticMap,
) -> MixsegStatus {
    guard(|| {
        let out = as_mut(out, "out")?;
        let ids = as_slice(ids, pixels(height, width), "ids")?.to_vec();
        let segs = as_slice(segments, num_segments, "segments")?
            .iter()
            .map(|s| SegmentInfo { id: s.id, category_id: s.category_id, area: s.area, is_thing: s.is_thing })
            .collect();
        *out = Box::into_raw(Box::new(MixsegPanopticMap { inner: PanopticMap::new(height, width, ids, segs)? }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_panoptic_map_free(map: *mut MixsegPanopticMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_panoptic_map_size(
    map: *const MixsegPanopticMap,
    height: *mut u32,
    width: *mut u32,
) -> MixsegStatus {
    guard(|| {
        let m = &as_ref(map, "map")?.inner;
        *as_mut(height, "height")? = m.height();
        *as_mut(width, "width")? = m.width();
        Ok(())
    })
}

/// Copy `height * width` segment ids into `buf`.
#[no_mangle]
pub unsafe extern "C" fn mixseg_panoptic_map_ids(
    map: *const MixsegPanopticMap,
    buf: *mut u32,
    capacity: usize,
) -> MixsegStatus {
    guard(|| {
        let ids = as_ref(map, "map")?.inner.ids();
        if capacity < ids.len() {
            return Err(Failure::Small(ids.len()));
        }
        as_slice_mut(buf, ids.len(), "buf")?.copy_from_slice(ids);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_panoptic_map_num_segments(
    map: *const MixsegPanopticMap,
    out: *mut usize,
) -> MixsegStatus {
    guard(|| {
        *as_mut(out, "out")? = as_ref(map, "map")?.inner.segments().len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mixseg_panoptic_map_segment(
    map: *const MixsegPanopticMap,
    index: usize,
    out: *mut MixsegSegment,
) -> MixsegStatus {
    guard(|| {
        let segs = as_ref(map, "map")?.inner.segments();
        let s = segs
            .get(index)
            .ok_or_else(|| Failure::Invalid(format!("segment index {index} out of range ({} segments)", segs.len())))?;
        *as_mut(out, "out")? =
            MixsegSegment { id: s.id, category_id: s.category_id, area: s.area, is_thing: s.is_thing };
        Ok(())
    })
}

/// PQ, SQ and RQ averaged over the categories present in either map.
#[no_mangle]
pub unsafe extern "C" fn mixseg_panoptic_quality(
    pred: *const MixsegPanopticMap,
    gt: *const MixsegPanopticMap,
    categories: *const MixsegCategory,
    num_categories: usize,
    out: *mut MixsegPq,
) -> MixsegStatus {
    guard(|| {
        let cats = as_slice(categories, num_categories, "categories")?;
        let space = LabelSpace::new(
            LabelSpaceId::Test,
            cats.iter()
                .map(|c| SegCategory::new(c.id, format!("category {}", c.id), c.is_thing, LabelSpaceId::Test))
                .collect(),
        )?;
        let r = panoptic_quality(&as_ref(pred, "pred")?.inner, &as_ref(gt, "gt")?.inner, &space)?;
        *as_mut(out, "out")? = MixsegPq { pq: r.pq, sq: r.sq, rq: r.rq };
        Ok(())
    })
}

/// `draws` dataset indices drawn with equal frequency over `num_datasets`.
#[no_mangle]
pub unsafe extern "C" fn mixseg_equal_frequency_sample(
    sizes: *const usize,
    num_datasets: usize,
    draws: usize,
    seed: u64,
    out: *mut usize,
) -> MixsegStatus {
    guard(|| {
        let sizes = as_slice(sizes, num_datasets, "sizes")?;
        let seq = equal_frequency_sampler(sizes, draws, seed)?;
        as_slice_mut(out, seq.len(), "out")?.copy_from_slice(&seq);
        Ok(())
    })
}
