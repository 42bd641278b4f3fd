//! Command-line front end. [`run`] parses arguments, dispatches a subcommand
//! and returns the process exit status: 0 on success, 1 on a data error, 2 on
//! a usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::benchgen::{equal_frequency_sampler, BenchmarkFixtures, SuperMaskSource};
use crate::error::Error;
use crate::io::{
    instances_from_panoptic, label_space_from_entries, load_embedding_table, load_panoptic_dataset, load_predictions,
    read_json, write_json, write_panoptic_dataset, CategoryEntry, DetectionFile, EmbeddingTableFile, ImagePredictions,
    InstanceAnnotationFile, MatchLossFixture, PanopticDataset, PanopticImage, PartAnnotationFile, PredictionEntry,
    PredictionFile,
};
use crate::mask::{LabelSpace, LabelSpaceId};
use crate::matching::set_loss_with_assignment;
use crate::metrics::{
    default_iou_thresholds, instance_ap, piq_score, pq_dataset_stats, ClassMap, DetectionRecord, InstanceAnnotation,
    PiqAggregation, PiqImage, PqOptions, SemanticConfusion,
};
use crate::postproc::{fuse, score_and_label, FusionAlgorithm, FusionConfig, PanopticMap};
use crate::semantics::{multi_pass_inference, select_label_spaces, ClassEmbeddingTable, QuerySet, StubDecoder};

const BUILTIN_CONFIG: &str = include_str!("../fixtures/defaults.toml");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] Error),
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionDefaults {
    pub original: FusionConfig,
    #[serde(rename = "esf-omi")]
    pub esf_omi: FusionConfig,
}

/// Settings read from TOML. The built-in file supplies every key; a user file
/// may override any of them.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    pub tau: f64,
    pub seed: u64,
    pub fusion: FusionDefaults,
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ToolConfig {
    pub fn builtin() -> Self {
        Self::from_overrides(None).expect("built-in config parses")
    }

    fn from_overrides(user: Option<&str>) -> crate::Result<Self> {
        let parse = |s: &str| s.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()));
        let mut base = parse(BUILTIN_CONFIG)?;
        if let Some(text) = user {
            merge_tables(&mut base, parse(text)?);
        }
        let cfg: ToolConfig =
            toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.fusion.original.validate()?;
        cfg.fusion.esf_omi.validate()?;
        if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", cfg.tau)));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> crate::Result<Self> {
        match path {
            None => Self::from_overrides(None),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_overrides(Some(&text))
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mixseg", version, about = "Multi-dataset segmentation toolkit")]
pub struct Cli {
    /// TOML file overriding built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Write the machine-readable report here.
    #[arg(long, global = true)]
    pub report_out: Option<PathBuf>,
    /// Increase log verbosity (-v, -vv).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Fuse scored masks into panoptic maps.
    Fuse(FuseArgs),
    /// Print the training label spaces selected for a test label space.
    SelectLabelspaces(SelectArgs),
    /// Multi-pass inference with the deterministic stub decoder.
    InferSim(InferArgs),
    /// Set loss and optimal assignment of a loss fixture.
    MatchLoss(MatchLossArgs),
    /// Emit mixed label-space benchmarks.
    BuildBench(BuildBenchArgs),
    /// Draw dataset indices with equal frequency.
    Sample(SampleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Semantic,
    Panoptic,
    Instance,
    Piq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlgorithmArg {
    Original,
    EsfOmi,
}

impl From<AlgorithmArg> for FusionAlgorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Original => FusionAlgorithm::Original,
            AlgorithmArg::EsfOmi => FusionAlgorithm::EsfOmi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    CategoryMean,
    SplitMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuperSourceArg {
    PartUnion,
    SourceAnnotation,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Predicted panoptic JSON.
    #[arg(long)]
    pub pred_json: Option<PathBuf>,
    /// Predicted PNG directory (default: the JSON path without extension).
    #[arg(long)]
    pub pred_png_dir: Option<PathBuf>,
    #[arg(long)]
    pub gt_json: Option<PathBuf>,
    #[arg(long)]
    pub gt_png_dir: Option<PathBuf>,
    /// Thing detections (instance and piq tasks).
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Ground-truth instance file, used instead of a panoptic ground truth.
    #[arg(long)]
    pub gt_instances: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "category-mean")]
    pub piq_aggregation: AggregationArg,
}

#[derive(Debug, Args)]
pub struct FusionFlags {
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub slack: Option<f64>,
    #[arg(long)]
    pub min_visible_ratio: Option<f64>,
    #[arg(long)]
    pub binarize_threshold: Option<f64>,
}

impl FusionFlags {
    fn apply(&self, mut cfg: FusionConfig) -> crate::Result<FusionConfig> {
        if let Some(v) = self.score_threshold {
            cfg.score_threshold = v;
        }
        if let Some(v) = self.nms_iou {
            cfg.nms_iou_threshold = v;
        }
        if let Some(v) = self.slack {
            cfg.containment_slack = v;
        }
        if let Some(v) = self.min_visible_ratio {
            cfg.min_visible_ratio = v;
        }
        if let Some(v) = self.binarize_threshold {
            cfg.binarize_threshold = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long, value_enum)]
    pub algorithm: AlgorithmArg,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Embedding table of the test label space.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// JSON list of categories (id, name, isthing), when no table is given.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    #[arg(long)]
    pub out_json: PathBuf,
    #[arg(long)]
    pub out_png_dir: Option<PathBuf>,
    /// Also write the raw thing predictions as detections.
    #[arg(long)]
    pub detections_out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    pub fusion: FusionFlags,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub test: PathBuf,
    /// Training tables, in label-space order.
    #[arg(long, required = true, num_args = 1..)]
    pub train: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub train: Vec<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub image: u64,
    #[arg(long, default_value_t = 32)]
    pub height: u32,
    #[arg(long, default_value_t = 32)]
    pub width: u32,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub binarize_threshold: Option<f64>,
    /// Prediction file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchLossArgs {
    #[arg(long)]
    pub fixture: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildBenchArgs {
    /// Benchmark name, or "all".
    #[arg(long, default_value = "all")]
    pub benchmark: String,
    /// Benchmark definitions replacing the built-in ones.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    /// Part annotations; without them only label spaces are emitted.
    #[arg(long)]
    pub parts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "part-union")]
    pub super_source: SuperSourceArg,
    /// Mixed datasets as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory receiving one panoptic JSON and PNG folder per dataset.
    #[arg(long)]
    pub panoptic_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Dataset sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub draws: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sequence file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn format_leaf(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => format!("{:.4}", n.as_f64().unwrap_or(f64::NAN)),
        Value::String(s) => s.clone(),
        Value::Null => "n/a".into(),
        other => other.to_string(),
    }
}

/// One `key: value` line per leaf, nested keys joined with dots. Arrays of
/// scalars stay on one line.
pub fn render_text(value: &Value, prefix: &str, out: &mut String) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                render_text(v, &key, out);
            }
        }
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            let joined: Vec<String> = items.iter().map(format_leaf).collect();
            out.push_str(&format!("{prefix}: {}\n", joined.join(" ")));
        }
        Value::Array(items) => {
            for (i, v) in items.iter().enumerate() {
                render_text(v, &format!("{prefix}.{i}"), out);
            }
        }
        leaf => out.push_str(&format!("{prefix}: {}\n", format_leaf(leaf))),
    }
}

fn png_dir_for(json: &Path, dir: Option<&PathBuf>) -> PathBuf {
    dir.cloned().unwrap_or_else(|| json.with_extension(""))
}

fn load_panoptic(json: Option<&PathBuf>, dir: Option<&PathBuf>, what: &str) -> CliResult<PanopticDataset> {
    let Some(json) = json else {
        return usage(format!("--{what}-json is required for this task"));
    };
    Ok(load_panoptic_dataset(json, &png_dir_for(json, dir))?)
}

fn pair_images<'a>(
    pred: &'a PanopticDataset,
    gt: &'a PanopticDataset,
) -> crate::Result<Vec<(&'a PanopticMap, &'a PanopticMap)>> {
    gt.images
        .iter()
        .map(|g| {
            let p = pred.find(g.image_id).ok_or_else(|| Error::Integrity {
                image: g.image_id.to_string(),
                detail: "no prediction for this ground-truth image".into(),
            })?;
            Ok((&p.map, &g.map))
        })
        .collect()
}

fn check_pred_categories(pred: &PanopticDataset, space: &LabelSpace) -> crate::Result<()> {
    for c in pred.space.categories() {
        if space.by_id(c.id).is_none() {
            return Err(Error::LabelSpace(format!(
                "predicted category {} ('{}') is not in the ground-truth label space",
                c.id, c.name
            )));
        }
    }
    Ok(())
}

fn name_of(space: &LabelSpace, id: u32) -> String {
    space.by_id(id).map(|(_, c)| c.name.clone()).unwrap_or_else(|| id.to_string())
}

fn evaluate(args: &EvaluateArgs) -> CliResult<Value> {
    match args.task {
        Task::Semantic => {
            let gt = load_panoptic(args.gt_json.as_ref(), args.gt_png_dir.as_ref(), "gt")?;
            let pred = load_panoptic(args.pred_json.as_ref(), args.pred_png_dir.as_ref(), "pred")?;
            check_pred_categories(&pred, &gt.space)?;
            let pairs = pair_images(&pred, &gt)?;
            let parts: Vec<SemanticConfusion> = pairs
                .par_iter()
                .map(|(p, g)| {
                    let mut c = SemanticConfusion::new(gt.space.len());
                    c.accumulate(&ClassMap::from_panoptic(p, &gt.space)?, &ClassMap::from_panoptic(g, &gt.space)?)?;
                    Ok(c)
                })
                .collect::<crate::Result<_>>()?;
            let mut total = SemanticConfusion::new(gt.space.len());
            for c in &parts {
                total.merge(c)?;
            }
            let m = total.metrics()?;
            let per_class: serde_json::Map<String, Value> =
                gt.space.categories().iter().zip(&m.per_class_iou).map(|(c, v)| (c.name.clone(), json!(v))).collect();
            Ok(json!({"task": "semantic", "miou": m.miou, "fwiou": m.fwiou, "macc": m.macc, "pacc": m.pacc,
                      "per_class_iou": per_class}))
        }
        Task::Panoptic => {
            let gt = load_panoptic(args.gt_json.as_ref(), args.gt_png_dir.as_ref(), "gt")?;
            let pred = load_panoptic(args.pred_json.as_ref(), args.pred_png_dir.as_ref(), "pred")?;
            check_pred_categories(&pred, &gt.space)?;
            let pairs = pair_images(&pred, &gt)?;
            let r = pq_dataset_stats(&pairs, &gt.space, PqOptions::default())?.result();
            let per_category: serde_json::Map<String, Value> = r
                .per_category
                .iter()
                .map(|(c, v)| (name_of(&gt.space, *c), json!({"pq": v.pq, "sq": v.sq, "rq": v.rq})))
                .collect();
            Ok(json!({"task": "panoptic", "pq": r.pq, "sq": r.sq, "rq": r.rq,
                      "num_categories": r.num_categories, "per_category": per_category}))
        }
        Task::Instance => {
            let (space, mut gts) = ground_truth_instances(args)?;
            // Stuff segments have no instances to detect.
            gts.retain(|g| space.categories().iter().find(|c| c.id == g.category_id).is_none_or(|c| c.is_thing));
            let dets = load_detections(args)?;
            let r = instance_ap(&dets, &gts, &default_iou_thresholds())?;
            let per_category: serde_json::Map<String, Value> =
                r.per_category.iter().map(|(c, v)| (name_of(&space, *c), json!(v))).collect();
            Ok(json!({"task": "instance", "ap": r.ap, "ap50": r.ap50, "ap75": r.ap75,
                      "ap_s": r.ap_s, "ap_m": r.ap_m, "ap_l": r.ap_l, "per_category": per_category}))
        }
        Task::Piq => {
            let (space, gts) = ground_truth_instances(args)?;
            let dets = load_detections(args)?;
            let pred = load_panoptic(args.pred_json.as_ref(), args.pred_png_dir.as_ref(), "pred")?;
            check_pred_categories(&pred, &space)?;
            let mut by_image: BTreeMap<u64, Vec<InstanceAnnotation>> = BTreeMap::new();
            for g in gts {
                by_image.entry(g.image_id).or_default().push(g);
            }
            for img in &pred.images {
                by_image.entry(img.image_id).or_default();
            }
            let images = by_image
                .into_iter()
                .map(|(image_id, ground_truth)| {
                    let p = pred.find(image_id).ok_or_else(|| Error::Integrity {
                        image: image_id.to_string(),
                        detail: "no stuff prediction for this ground-truth image".into(),
                    })?;
                    Ok(PiqImage { image_id, stuff_prediction: p.map.clone(), ground_truth })
                })
                .collect::<crate::Result<Vec<_>>>()?;
            let aggregation = match args.piq_aggregation {
                AggregationArg::CategoryMean => PiqAggregation::CategoryMean,
                AggregationArg::SplitMean => PiqAggregation::SplitMean,
            };
            let r = piq_score(&dets, &images, &space, aggregation)?;
            let per_category: serde_json::Map<String, Value> =
                r.per_category.iter().map(|(c, v)| (name_of(&space, *c), json!(v))).collect();
            Ok(json!({"task": "piq", "piq": r.piq, "piq50": r.piq50, "piq75": r.piq75,
                      "piq_s": r.piq_s, "piq_m": r.piq_m, "piq_l": r.piq_l,
                      "piq_instance_weighted": r.piq_instance_weighted,
                      "aggregation": r.aggregation, "per_category": per_category}))
        }
    }
}

fn ground_truth_instances(args: &EvaluateArgs) -> CliResult<(LabelSpace, Vec<InstanceAnnotation>)> {
    if let Some(path) = &args.gt_instances {
        let f: InstanceAnnotationFile = read_json(path)?;
        return Ok((f.label_space()?, f.annotations));
    }
    let gt = load_panoptic(args.gt_json.as_ref(), args.gt_png_dir.as_ref(), "gt")?;
    let inst = instances_from_panoptic(&gt);
    Ok((gt.space, inst))
}

fn load_detections(args: &EvaluateArgs) -> CliResult<Vec<DetectionRecord>> {
    let Some(path) = &args.detections else {
        return usage("--detections is required for this task");
    };
    Ok(read_json::<DetectionFile>(path)?.detections)
}

fn fuse_command(args: &FuseArgs, cfg: &ToolConfig) -> CliResult<Value> {
    let algorithm: FusionAlgorithm = args.algorithm.into();
    let base = match algorithm {
        FusionAlgorithm::Original => cfg.fusion.original,
        FusionAlgorithm::EsfOmi => cfg.fusion.esf_omi,
    };
    let fusion = args.fusion.apply(base)?;
    let tau = args.tau.unwrap_or(cfg.tau);
    let (space, table) = match (&args.embeddings, &args.categories) {
        (Some(e), None) => {
            let t = load_embedding_table(e)?;
            (t.labelspace().clone(), Some(t))
        }
        (None, Some(c)) => {
            let entries: Vec<CategoryEntry> = read_json(c)?;
            (label_space_from_entries(LabelSpaceId::Test, &entries)?, None)
        }
        _ => return usage("give exactly one of --embeddings or --categories"),
    };
    let preds = load_predictions(&args.predictions)?;
    let fused: Vec<(PanopticImage, Vec<DetectionRecord>)> = preds
        .images
        .par_iter()
        .map(|img| fuse_image(img, &space, table.as_ref(), tau, algorithm, &fusion))
        .collect::<crate::Result<_>>()?;
    let (images, dets): (Vec<_>, Vec<_>) = fused.into_iter().unzip();
    let ds = PanopticDataset { space, images };
    let png_dir = png_dir_for(&args.out_json, args.out_png_dir.as_ref());
    write_panoptic_dataset(&ds, &args.out_json, &png_dir)?;
    let dets: Vec<DetectionRecord> = dets.into_iter().flatten().collect();
    if let Some(p) = &args.detections_out {
        write_json(p, &DetectionFile { detections: dets.clone() })?;
    }
    let segments: usize = ds.images.iter().map(|i| i.map.segments().len()).sum();
    Ok(json!({"command": "fuse", "algorithm": algorithm, "images": ds.images.len(), "segments": segments,
              "detections": dets.len(), "config": fusion, "tau": tau,
              "out_json": args.out_json, "out_png_dir": png_dir}))
}

fn fuse_image(
    img: &ImagePredictions,
    space: &LabelSpace,
    table: Option<&ClassEmbeddingTable>,
    tau: f64,
    algorithm: FusionAlgorithm,
    cfg: &FusionConfig,
) -> crate::Result<(PanopticImage, Vec<DetectionRecord>)> {
    let scored = img
        .predictions
        .iter()
        .map(|e| score_and_label(&e.to_prediction(space, table, tau)?, space, cfg.binarize_threshold))
        .collect::<crate::Result<Vec<_>>>()?;
    let map = if scored.is_empty() {
        PanopticMap::new(img.height, img.width, vec![0; img.height as usize * img.width as usize], vec![])?
    } else {
        fuse(algorithm, &scored, cfg)?
    };
    let dets = scored
        .iter()
        .filter(|s| s.category.is_thing && !s.is_background && !s.mask.is_empty())
        .map(|s| DetectionRecord {
            image_id: img.image_id,
            category_id: s.category.id,
            score: s.score,
            mask: s.mask.clone(),
        })
        .collect();
    Ok((PanopticImage { image_id: img.image_id, file_name: format!("{}.png", img.image_id), map }, dets))
}

fn load_train_tables(paths: &[PathBuf]) -> crate::Result<Vec<ClassEmbeddingTable>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut f: EmbeddingTableFile = read_json(p)?;
            f.labelspace = LabelSpaceId::Train(i as u32 + 1);
            f.into_table()
        })
        .collect()
}

fn select_command(args: &SelectArgs) -> CliResult<Value> {
    let test = load_embedding_table(&args.test)?;
    let trains = load_train_tables(&args.train)?;
    let d = select_label_spaces(&test, &trains)?;
    Ok(json!({"command": "select-labelspaces", "selected": d}))
}

fn infer_command(args: &InferArgs, cfg: &ToolConfig) -> CliResult<Value> {
    let test = load_embedding_table(&args.test)?;
    let trains = load_train_tables(&args.train)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let tau = args.tau.unwrap_or(cfg.tau);
    let binarize = args.binarize_threshold.unwrap_or(cfg.fusion.esf_omi.binarize_threshold);
    if args.queries == 0 || args.height == 0 || args.width == 0 {
        return usage("--queries, --height and --width must be positive");
    }
    let queries = QuerySet::random(args.queries, trains.len(), test.dim(), seed)?;
    let decoder = StubDecoder::new(seed, args.height, args.width).with_bank(test.entries().to_vec());
    let selected = select_label_spaces(&test, &trains)?;
    let preds = multi_pass_inference(&decoder, &queries, &args.image, &test, &trains, tau)?;
    let entries = preds
        .iter()
        .map(|p| {
            Ok(PredictionEntry {
                mask: p.soft_mask.binarize(binarize)?,
                class_probs: p.class_probs.clone(),
                embedding: Some(p.image_embedding.values().to_vec()),
                score: p.score,
                source: p.source,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let mut per_source: BTreeMap<String, usize> = BTreeMap::new();
    for p in &preds {
        *per_source.entry(p.source.to_string()).or_default() += 1;
    }
    if let Some(out) = &args.out {
        let file = PredictionFile {
            images: vec![ImagePredictions {
                image_id: args.image,
                height: args.height,
                width: args.width,
                predictions: entries,
            }],
        };
        write_json(out, &file)?;
    }
    Ok(json!({"command": "infer-sim", "selected": selected, "num_predictions": preds.len(),
              "per_source": per_source, "seed": seed, "tau": tau}))
}

fn match_loss_command(args: &MatchLossArgs) -> CliResult<Value> {
    let fixture: MatchLossFixture = read_json(&args.fixture)?;
    let (preds, gts) = fixture.resolve()?;
    let r = set_loss_with_assignment(&preds, &gts)?;
    Ok(json!({"command": "match-loss", "total": r.loss.total,
              "classification": r.loss.classification_part, "mask": r.loss.mask_part,
              "assignment": r.assignment.pairs, "unmatched": r.assignment.unmatched_predictions}))
}

fn build_bench_command(args: &BuildBenchArgs) -> CliResult<Value> {
    let fixtures = match &args.fixtures {
        Some(p) => BenchmarkFixtures::load(p)?,
        None => BenchmarkFixtures::builtin(),
    };
    let names: Vec<String> = if args.benchmark == "all" {
        fixtures.benchmarks.iter().map(|b| b.name.clone()).collect()
    } else {
        vec![fixtures.benchmark(&args.benchmark)?.name.clone()]
    };
    let mut report = serde_json::Map::new();
    match &args.parts {
        None => {
            if args.out.is_some() || args.panoptic_out.is_some() {
                return usage("--out and --panoptic-out need --parts");
            }
            for n in &names {
                let spaces: Vec<Vec<String>> = fixtures
                    .label_spaces(n)?
                    .iter()
                    .map(|s| s.categories().iter().map(|c| c.name.clone()).collect())
                    .collect();
                report.insert(n.clone(), json!(spaces));
            }
        }
        Some(parts) => {
            let file: PartAnnotationFile = read_json(parts)?;
            let source = match args.super_source {
                SuperSourceArg::PartUnion => SuperMaskSource::PartUnion,
                SuperSourceArg::SourceAnnotation => SuperMaskSource::SourceAnnotation,
            };
            let mut all = Vec::new();
            for n in &names {
                let sets = fixtures.build(n, &file.instances, source)?;
                report.insert(
                    n.clone(),
                    json!(sets
                        .iter()
                        .map(|s| json!({"name": s.name, "images": s.images.len(),
                        "labels": s.label_space.categories().iter().map(|c| c.name.clone()).collect::<Vec<_>>()}))
                        .collect::<Vec<_>>()),
                );
                all.extend(sets);
            }
            if let Some(out) = &args.out {
                write_json(out, &all)?;
            }
            if let Some(dir) = &args.panoptic_out {
                for set in &all {
                    let images = set
                        .images
                        .iter()
                        .map(|img| {
                            Ok(PanopticImage {
                                image_id: img.image_id,
                                file_name: format!("{}.png", img.image_id),
                                map: img.panoptic_map(&set.label_space, &set.super_ids)?,
                            })
                        })
                        .collect::<crate::Result<Vec<_>>>()?;
                    let ds = PanopticDataset { space: set.label_space.clone(), images };
                    write_panoptic_dataset(&ds, &dir.join(format!("{}.json", set.name)), &dir.join(&set.name))?;
                }
            }
        }
    }
    Ok(json!({"command": "build-bench", "benchmarks": report}))
}

fn sample_command(args: &SampleArgs, cfg: &ToolConfig) -> CliResult<Value> {
    let seed = args.seed.unwrap_or(cfg.seed);
    let seq = equal_frequency_sampler(&args.sizes, args.draws, seed)?;
    let mut counts = vec![0usize; args.sizes.len()];
    for &i in &seq {
        counts[i] += 1;
    }
    if let Some(out) = &args.out {
        write_json(out, &json!({"seed": seed, "sizes": args.sizes, "sequence": seq}))?;
    }
    Ok(json!({"command": "sample", "seed": seed, "draws": args.draws, "counts": counts}))
}

fn dispatch(cli: &Cli) -> CliResult<Value> {
    let cfg = ToolConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Evaluate(a) => evaluate(a),
        Command::Fuse(a) => fuse_command(a, &cfg),
        Command::SelectLabelspaces(a) => select_command(a),
        Command::InferSim(a) => infer_command(a, &cfg),
        Command::MatchLoss(a) => match_loss_command(a),
        Command::BuildBench(a) => build_bench_command(a),
        Command::Sample(a) => sample_command(a, &cfg),
    }
}

fn execute(cli: &Cli) -> CliResult<Value> {
    match cli.jobs {
        Some(0) => usage("--jobs must be at least 1"),
        Some(n) => {
            let pool =
                rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| CliError::Usage(e.to_string()))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

/// Run with explicit argv, writing the text report to `out` and diagnostics to
/// `err`. Returns the exit status.
pub fn run_with(
    argv: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let status = e.exit_code();
            let _ = if status == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return if status == 0 { 0 } else { 2 };
        }
    };
    let mut logger = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIXSEG_LOG", "warn"));
    match cli.verbose {
        0 => {}
        1 => {
            logger.filter_level(log::LevelFilter::Info);
        }
        _ => {
            logger.filter_level(log::LevelFilter::Debug);
        }
    }
    let _ = logger.try_init();
    match execute(&cli) {
        Ok(report) => {
            let mut text = String::new();
            render_text(&report, "", &mut text);
            let _ = out.write_all(text.as_bytes());
            if let Some(path) = &cli.report_out {
                if let Err(e) = write_json(path, &report) {
                    let _ = writeln!(err, "error[{}]: {e}", e.kind());
                    return 1;
                }
            }
            0
        }
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "usage error: {msg}");
            2
        }
        Err(CliError::Data(e)) => {
            let _ = writeln!(err, "error[{}]: {e}", e.kind());
            1
        }
    }
}

pub fn run(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
