//! Language-embedding classification and label-space-specific query inference.
//!
//! Class probabilities are a temperature-scaled softmax over dot products
//! between a prediction's image embedding and the text embedding of every
//! class, with an extra all-zero "no object" slot at the end. At inference the
//! test classes are matched against every training label space; each matched
//! space contributes one decoder pass whose queries are the object queries
//! shifted by that space's learned offset.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LabelSpace, LabelSpaceId, SoftMask};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 0.01;

/// Two similarities closer than this are treated as a tie during label-space
/// selection.
pub const SIMILARITY_TIE_TOLERANCE: f64 = 1e-6;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        EmbeddingVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::Format(format!("cannot normalize an embedding with norm {n}")));
        }
        Ok(EmbeddingVector(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!("embedding dimension {} vs {}", self.dim(), other.dim())));
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn add(&self, other: &EmbeddingVector) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!("embedding dimension {} vs {}", self.dim(), other.dim())));
        }
        Ok(EmbeddingVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }
}

/// Text embeddings for every class of one label space, plus the implicit
/// all-zero no-object entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    labelspace: LabelSpace,
    entries: Vec<EmbeddingVector>,
    null_entry: EmbeddingVector,
}

impl ClassEmbeddingTable {
    /// Vectors are aligned with `labelspace.categories()`. Unnormalized vectors
    /// are normalized with a warning; zero vectors are rejected.
    pub fn new(labelspace: LabelSpace, vectors: Vec<EmbeddingVector>) -> Result<Self> {
        if vectors.len() != labelspace.len() {
            return Err(Error::Format(format!(
                "label space {} has {} classes but {} embeddings were given",
                labelspace.id(),
                labelspace.len(),
                vectors.len()
            )));
        }
        let dim = vectors[0].dim();
        if dim == 0 {
            return Err(Error::Format("embedding dimension must be positive".into()));
        }
        let mut entries = Vec::with_capacity(vectors.len());
        for (cat, v) in labelspace.categories().iter().zip(vectors) {
            if v.dim() != dim {
                return Err(Error::Format(format!(
                    "embedding for '{}' has dimension {}, expected {dim}",
                    cat.name,
                    v.dim()
                )));
            }
            if v.is_normalized() {
                entries.push(v);
            } else {
                let n = v.norm();
                let normed =
                    v.normalized().map_err(|_| Error::Format(format!("embedding for '{}' has zero norm", cat.name)))?;
                log::warn!("normalizing embedding for '{}' in label space {} (norm {n:.6})", cat.name, labelspace.id());
                entries.push(normed);
            }
        }
        Ok(ClassEmbeddingTable { labelspace, entries, null_entry: EmbeddingVector::zeros(dim) })
    }

    pub fn labelspace(&self) -> &LabelSpace {
        &self.labelspace
    }

    pub fn entries(&self) -> &[EmbeddingVector] {
        &self.entries
    }

    pub fn null_entry(&self) -> &EmbeddingVector {
        &self.null_entry
    }

    pub fn dim(&self) -> usize {
        self.null_entry.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }
}

/// Softmax over `[<e,t_1>, ..., <e,t_C>, <e,0>] / tau`. The last slot is the
/// no-object class.
pub fn class_probabilities(
    image_embedding: &EmbeddingVector,
    table: &ClassEmbeddingTable,
    tau: f64,
) -> Result<Vec<f64>> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut logits = Vec::with_capacity(table.num_classes() + 1);
    for e in table.entries().iter().chain(std::iter::once(table.null_entry())) {
        logits.push(image_embedding.dot(e)? / tau);
    }
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Object queries plus one learned offset per training label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    object_queries: Vec<EmbeddingVector>,
    labelspace_offsets: Vec<EmbeddingVector>,
}

impl QuerySet {
    pub fn new(object_queries: Vec<EmbeddingVector>, labelspace_offsets: Vec<EmbeddingVector>) -> Result<Self> {
        if object_queries.is_empty() || labelspace_offsets.is_empty() {
            return Err(Error::Config("query set needs at least one object query and one label-space offset".into()));
        }
        let dim = object_queries[0].dim();
        if object_queries.iter().chain(&labelspace_offsets).any(|v| v.dim() != dim) {
            return Err(Error::Dimension("all queries and offsets must share one dimension".into()));
        }
        Ok(QuerySet { object_queries, labelspace_offsets })
    }

    /// Seeded random queries, handy for simulation.
    pub fn random(num_queries: usize, num_labelspaces: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<EmbeddingVector> {
            (0..n).map(|_| EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())).collect()
        };
        let q = draw(num_queries);
        let l = draw(num_labelspaces);
        QuerySet::new(q, l)
    }

    pub fn num_queries(&self) -> usize {
        self.object_queries.len()
    }

    pub fn num_labelspaces(&self) -> usize {
        self.labelspace_offsets.len()
    }

    pub fn object_queries(&self) -> &[EmbeddingVector] {
        &self.object_queries
    }

    /// Offset for label space `k` (counted from 1).
    pub fn offset(&self, k: u32) -> Result<&EmbeddingVector> {
        if k == 0 || k as usize > self.labelspace_offsets.len() {
            return Err(Error::LabelSpace(format!(
                "label-space index {k} outside 1..={}",
                self.labelspace_offsets.len()
            )));
        }
        Ok(&self.labelspace_offsets[k as usize - 1])
    }
}

/// Decoder inputs for label space `k`: every object query plus that space's offset.
pub fn compose_queries(queries: &QuerySet, k: u32) -> Result<Vec<EmbeddingVector>> {
    let offset = queries.offset(k)?;
    queries.object_queries().iter().map(|q| q.add(offset)).collect()
}

/// For every test class find the most similar training class; the label spaces
/// holding those matches form the selected set. Ties within
/// [`SIMILARITY_TIE_TOLERANCE`] keep every tied space.
pub fn select_label_spaces(
    test_table: &ClassEmbeddingTable,
    train_tables: &[ClassEmbeddingTable],
) -> Result<BTreeSet<u32>> {
    if test_table.num_classes() == 0 {
        return Err(Error::LabelSpace("test label space is empty".into()));
    }
    if train_tables.is_empty() {
        return Err(Error::LabelSpace("no training label spaces given".into()));
    }
    let mut train_ids = Vec::with_capacity(train_tables.len());
    for t in train_tables {
        match t.labelspace().id() {
            LabelSpaceId::Train(k) => train_ids.push(k),
            LabelSpaceId::Test => {
                return Err(Error::LabelSpace("a training table is tagged as the test label space".into()))
            }
        }
        if t.dim() != test_table.dim() {
            return Err(Error::Dimension(format!(
                "training table {} has dimension {}, test table {}",
                t.labelspace().id(),
                t.dim(),
                test_table.dim()
            )));
        }
    }

    let mut selected = BTreeSet::new();
    for test_vec in test_table.entries() {
        // Best similarity within each training table.
        let mut per_table = Vec::with_capacity(train_tables.len());
        for t in train_tables {
            let mut best = f64::NEG_INFINITY;
            for e in t.entries() {
                best = best.max(test_vec.dot(e)?);
            }
            per_table.push(best);
        }
        let global = per_table.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (k, sim) in train_ids.iter().zip(&per_table) {
            if global - sim < SIMILARITY_TIE_TOLERANCE {
                selected.insert(*k);
            }
        }
    }
    Ok(selected)
}

/// One decoder output, optionally classified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub soft_mask: SoftMask,
    pub image_embedding: EmbeddingVector,
    pub source: LabelSpaceId,
    /// `C + 1` probabilities, the last being no-object.
    pub class_probs: Option<Vec<f64>>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub soft_mask: SoftMask,
    pub image_embedding: EmbeddingVector,
}

/// The mask decoder, seen from outside: composed queries in, one output per
/// query back.
pub trait Decoder: Sync {
    type Image: Sync + ?Sized;

    fn decode(&self, queries: &[EmbeddingVector], image: &Self::Image) -> Result<Vec<DecoderOutput>>;
}

/// Runs the decoder once per selected label space and classifies every output
/// against the test table. Output is grouped by ascending label-space index.
pub fn multi_pass_inference<D: Decoder>(
    decoder: &D,
    queries: &QuerySet,
    image: &D::Image,
    test_table: &ClassEmbeddingTable,
    train_tables: &[ClassEmbeddingTable],
    tau: f64,
) -> Result<Vec<Prediction>> {
    let selected: Vec<u32> = select_label_spaces(test_table, train_tables)?.into_iter().collect();
    let n = queries.num_queries();
    let passes: Vec<Vec<Prediction>> = selected
        .par_iter()
        .map(|&k| {
            let composed = compose_queries(queries, k)?;
            let outputs = decoder.decode(&composed, image)?;
            if outputs.len() != n {
                return Err(Error::DecoderContract { expected: n, got: outputs.len() });
            }
            outputs
                .into_iter()
                .map(|out| {
                    let emb = if out.image_embedding.is_normalized() {
                        out.image_embedding
                    } else {
                        out.image_embedding.normalized()?
                    };
                    let probs = class_probabilities(&emb, test_table, tau)?;
                    let score = probs[..probs.len() - 1].iter().cloned().fold(0.0, f64::max);
                    Ok(Prediction {
                        soft_mask: out.soft_mask,
                        image_embedding: emb,
                        source: LabelSpaceId::Train(k),
                        class_probs: Some(probs),
                        score: Some(score),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(passes.into_iter().flatten().collect())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic stand-in for the neural decoder.
///
/// Each output is derived from a hash of the seed, the image id, the query's
/// bits and its position, so different label-space offsets yield different but
/// reproducible outputs. Masks are soft rectangles; embeddings are jittered
/// copies of a bank vector (or random directions when the bank is empty).
#[derive(Debug, Clone)]
pub struct StubDecoder {
    pub seed: u64,
    pub height: u32,
    pub width: u32,
    pub embedding_bank: Vec<EmbeddingVector>,
    pub jitter: f64,
}

impl StubDecoder {
    pub fn new(seed: u64, height: u32, width: u32) -> Self {
        StubDecoder { seed, height, width, embedding_bank: Vec::new(), jitter: 0.05 }
    }

    pub fn with_bank(mut self, bank: Vec<EmbeddingVector>) -> Self {
        self.embedding_bank = bank;
        self
    }

    fn query_hash(&self, query: &EmbeddingVector, index: usize, image: u64) -> u64 {
        let mut h = splitmix64(self.seed ^ splitmix64(image));
        h = splitmix64(h ^ index as u64);
        for v in query.values() {
            h = splitmix64(h ^ v.to_bits());
        }
        h
    }

    fn output_for(&self, hash: u64, dim: usize) -> Result<DecoderOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash);
        let (h, w) = (self.height, self.width);
        let r0 = rng.random_range(0..h);
        let r1 = rng.random_range(r0..h) + 1;
        let c0 = rng.random_range(0..w);
        let c1 = rng.random_range(c0..w) + 1;
        let inside: f64 = rng.random_range(0.6..1.0);
        let outside: f64 = rng.random_range(0.0..0.4);
        let mut values = Vec::with_capacity(h as usize * w as usize);
        for r in 0..h {
            for c in 0..w {
                let hit = (r0..r1).contains(&r) && (c0..c1).contains(&c);
                values.push(if hit { inside } else { outside });
            }
        }
        let soft_mask = SoftMask::new(h, w, values)?;

        let base = if self.embedding_bank.is_empty() {
            EmbeddingVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        } else {
            let pick = rng.random_range(0..self.embedding_bank.len());
            let b = &self.embedding_bank[pick];
            EmbeddingVector::new(b.values().iter().map(|v| v + self.jitter * rng.random_range(-1.0..1.0)).collect())
        };
        let image_embedding = match base.normalized() {
            Ok(e) => e,
            Err(_) => EmbeddingVector::new(
                std::iter::once(1.0).chain(std::iter::repeat(0.0)).take(base.dim().max(1)).collect(),
            ),
        };
        Ok(DecoderOutput { soft_mask, image_embedding })
    }
}

impl Decoder for StubDecoder {
    type Image = u64;

    fn decode(&self, queries: &[EmbeddingVector], image: &u64) -> Result<Vec<DecoderOutput>> {
        let dim = self
            .embedding_bank
            .first()
            .map(|e| e.dim())
            .unwrap_or_else(|| queries.first().map(|q| q.dim()).unwrap_or(1));
        queries.iter().enumerate().map(|(i, q)| self.output_for(self.query_hash(q, i, *image), dim)).collect()
    }
}
