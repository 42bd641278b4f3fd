//! File formats: panoptic annotations (JSON plus id-encoded PNG), prediction
//! and detection files, embedding tables, instance annotations, part
//! annotations and loss fixtures.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};

use crate::benchgen::PartWholeInstance;
use crate::error::{Error, Result};
use crate::mask::{normalize_name, BinaryMask, LabelSpace, LabelSpaceId, SegCategory, SoftMask};
use crate::matching::GroundTruthSegment;
use crate::metrics::{DetectionRecord, InstanceAnnotation};
use crate::postproc::{PanopticMap, SegmentInfo};
use crate::semantics::{class_probabilities, ClassEmbeddingTable, EmbeddingVector, Prediction};

/// Tolerance on the sum of a stored probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-4;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text =
        serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn bool_or_int<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        B(bool),
        I(u8),
    }
    match Flag::deserialize(d)? {
        Flag::B(b) => Ok(b),
        Flag::I(0) => Ok(false),
        Flag::I(1) => Ok(true),
        Flag::I(n) => Err(serde::de::Error::custom(format!("isthing must be 0 or 1, got {n}"))),
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: u32,
    pub name: String,
    #[serde(deserialize_with = "bool_or_int")]
    pub isthing: bool,
}

pub fn label_space_from_entries(id: LabelSpaceId, entries: &[CategoryEntry]) -> Result<LabelSpace> {
    LabelSpace::new(id, entries.iter().map(|c| SegCategory::new(c.id, c.name.clone(), c.isthing, id)).collect())
}

pub fn entries_from_label_space(space: &LabelSpace) -> Vec<CategoryEntry> {
    space.categories().iter().map(|c| CategoryEntry { id: c.id, name: c.name.clone(), isthing: c.is_thing }).collect()
}

// ---------------------------------------------------------------------------
// Panoptic annotations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: u64,
    #[serde(default)]
    pub file_name: String,
    pub height: u32,
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub id: u32,
    pub category_id: u32,
    pub area: u64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: u64,
    /// PNG file name, relative to the PNG directory.
    pub file_name: String,
    pub segments_info: Vec<SegmentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanopticAnnotationFile {
    pub categories: Vec<CategoryEntry>,
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticImage {
    pub image_id: u64,
    pub file_name: String,
    pub map: PanopticMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticDataset {
    pub space: LabelSpace,
    pub images: Vec<PanopticImage>,
}

impl PanopticDataset {
    pub fn find(&self, image_id: u64) -> Option<&PanopticImage> {
        self.images.iter().find(|i| i.image_id == image_id)
    }
}

/// `R + 256 G + 65536 B`.
pub fn rgb_to_id(rgb: [u8; 3]) -> u32 {
    rgb[0] as u32 + 256 * rgb[1] as u32 + 65536 * rgb[2] as u32
}

pub fn id_to_rgb(id: u32) -> Result<[u8; 3]> {
    if id >= 1 << 24 {
        return Err(Error::Format(format!("segment id {id} does not fit in 24 bits")));
    }
    Ok([id as u8, (id >> 8) as u8, (id >> 16) as u8])
}

/// 8-bit RGB PNG holding the segment id of every pixel.
pub fn encode_id_png(map: &PanopticMap) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(map.ids().len() * 3);
    for &id in map.ids() {
        data.extend_from_slice(&id_to_rgb(id)?);
    }
    let mut out = Vec::new();
    let png_err = |e: png::EncodingError| Error::Png { path: PathBuf::from("<memory>"), detail: e.to_string() };
    let mut enc = png::Encoder::new(&mut out, map.width(), map.height());
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

/// Height, width and row-major ids of an id PNG. Palette images are expanded;
/// an alpha channel is ignored.
pub fn decode_id_png(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<u32>)> {
    let png_err = |detail: String| Error::Png { path: path.to_path_buf(), detail };
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| png_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("expected 8-bit samples, got {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(format!("expected an RGB image, got {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut ids = Vec::with_capacity(w * h);
    for row in buf[..info.line_size * h].chunks(info.line_size) {
        for px in row[..w * channels].chunks(channels) {
            ids.push(rgb_to_id([px[0], px[1], px[2]]));
        }
    }
    Ok((info.height, info.width, ids))
}

fn check_image(
    image_id: u64,
    entry: &AnnotationEntry,
    dims: Option<(u32, u32)>,
    decoded: (u32, u32, Vec<u32>),
    space: &LabelSpace,
) -> Result<PanopticMap> {
    let integrity = |detail: String| Error::Integrity { image: image_id.to_string(), detail };
    let (h, w, ids) = decoded;
    if let Some((eh, ew)) = dims {
        if (eh, ew) != (h, w) {
            return Err(integrity(format!("PNG is {h}x{w}, image entry says {eh}x{ew}")));
        }
    }
    let mut counts: HashMap<u32, u64> = HashMap::new();
    for &id in ids.iter().filter(|&&id| id != 0) {
        *counts.entry(id).or_default() += 1;
    }
    let listed: HashSet<u32> = entry.segments_info.iter().map(|s| s.id).collect();
    let mut missing: Vec<u32> = counts.keys().copied().filter(|id| !listed.contains(id)).collect();
    missing.sort_unstable();
    if let Some(id) = missing.first() {
        return Err(integrity(format!("segment id {id} is in the PNG but not in the JSON")));
    }
    let mut segments = Vec::with_capacity(entry.segments_info.len());
    for s in &entry.segments_info {
        let px = counts.get(&s.id).copied().unwrap_or(0);
        if px == 0 {
            return Err(integrity(format!("segment id {} is in the JSON but not in the PNG", s.id)));
        }
        if px != s.area {
            return Err(integrity(format!("segment {} has area {} but covers {px} pixels", s.id, s.area)));
        }
        let (_, cat) = space
            .by_id(s.category_id)
            .ok_or_else(|| integrity(format!("segment {} has unknown category {}", s.id, s.category_id)))?;
        segments.push(SegmentInfo { id: s.id, category_id: s.category_id, area: s.area, is_thing: cat.is_thing });
    }
    PanopticMap::new(h, w, ids, segments).map_err(|e| integrity(e.to_string()))
}

/// Load a panoptic JSON and its PNGs, cross-checking ids and areas.
pub fn load_panoptic_dataset(json: &Path, png_dir: &Path) -> Result<PanopticDataset> {
    let file: PanopticAnnotationFile = read_json(json)?;
    let space = label_space_from_entries(LabelSpaceId::Test, &file.categories)?;
    let dims: HashMap<u64, (u32, u32)> = file.images.iter().map(|i| (i.id, (i.height, i.width))).collect();
    let images = file
        .annotations
        .par_iter()
        .map(|a| {
            let path = png_dir.join(&a.file_name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let decoded = decode_id_png(&bytes, &path)?;
            let map = check_image(a.image_id, a, dims.get(&a.image_id).copied(), decoded, &space)?;
            Ok(PanopticImage { image_id: a.image_id, file_name: a.file_name.clone(), map })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PanopticDataset { space, images })
}

pub fn panoptic_file(ds: &PanopticDataset) -> PanopticAnnotationFile {
    PanopticAnnotationFile {
        categories: entries_from_label_space(&ds.space),
        images: ds
            .images
            .iter()
            .map(|i| ImageEntry {
                id: i.image_id,
                file_name: i.file_name.replace(".png", ".jpg"),
                height: i.map.height(),
                width: i.map.width(),
            })
            .collect(),
        annotations: ds
            .images
            .iter()
            .map(|i| AnnotationEntry {
                image_id: i.image_id,
                file_name: i.file_name.clone(),
                segments_info: i
                    .map
                    .segments()
                    .iter()
                    .map(|s| SegmentEntry { id: s.id, category_id: s.category_id, area: s.area, iscrowd: 0 })
                    .collect(),
            })
            .collect(),
    }
}

/// Write the JSON and one PNG per image into `png_dir`.
pub fn write_panoptic_dataset(ds: &PanopticDataset, json: &Path, png_dir: &Path) -> Result<()> {
    fs::create_dir_all(png_dir).map_err(|e| Error::io(png_dir, e))?;
    ds.images.par_iter().try_for_each(|i| {
        let path = png_dir.join(&i.file_name);
        let bytes = encode_id_png(&i.map).map_err(|e| match e {
            Error::Png { detail, .. } => Error::Png { path: path.clone(), detail },
            other => other,
        })?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    })?;
    write_json(json, &panoptic_file(ds))
}

// ---------------------------------------------------------------------------
// Predictions

fn default_source() -> LabelSpaceId {
    LabelSpaceId::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub mask: BinaryMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default = "default_source")]
    pub source: LabelSpaceId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: u64,
    pub height: u32,
    pub width: u32,
    pub predictions: Vec<PredictionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub images: Vec<ImagePredictions>,
}

fn check_probs(probs: &[f64], num_classes: usize) -> Result<()> {
    if probs.len() != num_classes + 1 {
        return Err(Error::Format(format!(
            "probability vector has {} entries, expected {}",
            probs.len(),
            num_classes + 1
        )));
    }
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Format("probability outside [0,1]".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::Format(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

impl PredictionEntry {
    /// Classify against `space`. Stored probabilities are used as given;
    /// otherwise the embedding is scored against `table`.
    pub fn to_prediction(
        &self,
        space: &LabelSpace,
        table: Option<&ClassEmbeddingTable>,
        tau: f64,
    ) -> Result<Prediction> {
        let (probs, emb) = match (&self.class_probs, &self.embedding, table) {
            (Some(p), e, _) => {
                check_probs(p, space.len())?;
                (p.clone(), e.clone().map(EmbeddingVector::new).unwrap_or_else(|| EmbeddingVector::zeros(1)))
            }
            (None, Some(e), Some(t)) => {
                let emb = EmbeddingVector::new(e.clone()).normalized()?;
                (class_probabilities(&emb, t, tau)?, emb)
            }
            (None, Some(_), None) => {
                return Err(Error::Config("prediction carries an embedding but no embedding table was given".into()))
            }
            (None, None, _) => {
                return Err(Error::Format("prediction has neither class probabilities nor an embedding".into()))
            }
        };
        let score = self.score.unwrap_or_else(|| probs[..probs.len() - 1].iter().cloned().fold(0.0, f64::max));
        Ok(Prediction {
            soft_mask: SoftMask::from_binary(&self.mask),
            image_embedding: emb,
            source: self.source,
            class_probs: Some(probs),
            score: Some(score),
        })
    }
}

impl PredictionFile {
    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            for (i, p) in img.predictions.iter().enumerate() {
                if p.mask.height() != img.height || p.mask.width() != img.width {
                    return Err(Error::Integrity {
                        image: img.image_id.to_string(),
                        detail: format!("prediction {i} mask does not match the image size"),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn load_predictions(path: &Path) -> Result<PredictionFile> {
    let f: PredictionFile = read_json(path)?;
    f.validate()?;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub detections: Vec<DetectionRecord>,
}

/// Ground-truth instances, possibly overlapping, with their categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotationFile {
    pub categories: Vec<CategoryEntry>,
    pub annotations: Vec<InstanceAnnotation>,
}

impl InstanceAnnotationFile {
    pub fn label_space(&self) -> Result<LabelSpace> {
        label_space_from_entries(LabelSpaceId::Test, &self.categories)
    }
}

/// Every segment of a panoptic dataset as an instance annotation.
pub fn instances_from_panoptic(ds: &PanopticDataset) -> Vec<InstanceAnnotation> {
    ds.images
        .iter()
        .flat_map(|img| {
            img.map.segments().iter().map(move |s| InstanceAnnotation {
                image_id: img.image_id,
                category_id: s.category_id,
                mask: img.map.segment_mask(s.id),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Embedding tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub name: String,
    #[serde(default = "yes", deserialize_with = "bool_or_int")]
    pub isthing: bool,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTableFile {
    #[serde(default = "default_source")]
    pub labelspace: LabelSpaceId,
    pub dim: usize,
    pub entries: Vec<EmbeddingEntry>,
}

impl EmbeddingTableFile {
    /// Category ids are `1..=C` in entry order.
    pub fn into_table(self) -> Result<ClassEmbeddingTable> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.vector.len() != self.dim {
                return Err(Error::Format(format!(
                    "class '{}' has {} values, table dimension is {}",
                    e.name,
                    e.vector.len(),
                    self.dim
                )));
            }
            if !seen.insert(normalize_name(&e.name)) {
                return Err(Error::Format(format!("duplicate class name '{}'", e.name)));
            }
        }
        let cats = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| SegCategory::new(i as u32 + 1, e.name.clone(), e.isthing, self.labelspace))
            .collect();
        let space = LabelSpace::new(self.labelspace, cats)?;
        let vectors = self.entries.into_iter().map(|e| EmbeddingVector::new(e.vector)).collect();
        ClassEmbeddingTable::new(space, vectors)
    }

    pub fn from_table(table: &ClassEmbeddingTable) -> Self {
        EmbeddingTableFile {
            labelspace: table.labelspace().id(),
            dim: table.dim(),
            entries: table
                .labelspace()
                .categories()
                .iter()
                .zip(table.entries())
                .map(|(c, v)| EmbeddingEntry { name: c.name.clone(), isthing: c.is_thing, vector: v.values().to_vec() })
                .collect(),
        }
    }
}

pub fn load_embedding_table(path: &Path) -> Result<ClassEmbeddingTable> {
    read_json::<EmbeddingTableFile>(path)?.into_table()
}

// ---------------------------------------------------------------------------
// Loss fixtures and part annotations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMaskEntry {
    pub height: u32,
    pub width: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPrediction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_mask: Option<SoftMaskEntry>,
    pub class_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTarget {
    /// Class slot, 0-based.
    pub class: usize,
    pub mask: BinaryMask,
}

/// Predictions and ground truth of one image for the set loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchLossFixture {
    pub predictions: Vec<LossPrediction>,
    pub ground_truth: Vec<LossTarget>,
}

impl MatchLossFixture {
    pub fn resolve(&self) -> Result<(Vec<Prediction>, Vec<GroundTruthSegment>)> {
        let preds = self
            .predictions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let soft = match (&p.mask, &p.soft_mask) {
                    (Some(m), None) => SoftMask::from_binary(m),
                    (None, Some(s)) => SoftMask::new(s.height, s.width, s.values.clone())?,
                    _ => return Err(Error::Format(format!("prediction {i} needs exactly one of mask or soft_mask"))),
                };
                let sum: f64 = p.class_probs.iter().sum();
                if p.class_probs.len() < 2 || (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                    return Err(Error::Format(format!("prediction {i} has an invalid probability vector")));
                }
                Ok(Prediction {
                    soft_mask: soft,
                    image_embedding: EmbeddingVector::zeros(1),
                    source: LabelSpaceId::Test,
                    class_probs: Some(p.class_probs.clone()),
                    score: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gts = self
            .ground_truth
            .iter()
            .map(|g| GroundTruthSegment::new(g.class, g.mask.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok((preds, gts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAnnotationFile {
    pub instances: Vec<PartWholeInstance>,
}

/// Group instance annotations by image id.
pub fn by_image<T: Clone>(items: &[T], image_of: impl Fn(&T) -> u64) -> BTreeMap<u64, Vec<T>> {
    let mut out: BTreeMap<u64, Vec<T>> = BTreeMap::new();
    for it in items {
        out.entry(image_of(it)).or_default().push(it.clone());
    }
    out
}
