//! Mixed label-space benchmarks built from part annotations, and the
//! equal-frequency dataset sampler used for multi-dataset training.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{normalize_name, BinaryMask, LabelSpace, LabelSpaceId};
use crate::metrics::InstanceAnnotation;
use crate::postproc::PanopticMap;

const BUILTIN_FIXTURES: &str = include_str!("../fixtures/benchmarks.json");

/// A super-category and its complete part list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartHierarchy {
    #[serde(rename = "super")]
    pub super_name: String,
    pub parts: Vec<String>,
}

/// One super-category with the parts of it exposed by a derived dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetGroup(pub String, pub Vec<String>);

/// The groups of one derived dataset. Labels are ordered group by group, each
/// group's parts followed by its super-category.
pub type PartSubset = Vec<SubsetGroup>;

pub fn subset_labels(subset: &[SubsetGroup]) -> Vec<String> {
    subset.iter().flat_map(|SubsetGroup(sup, parts)| parts.iter().cloned().chain([sup.clone()])).collect()
}

/// Annotation of one whole object through its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartWholeInstance {
    pub image_id: u64,
    pub instance_id: u32,
    #[serde(rename = "super")]
    pub super_name: String,
    pub part_masks: BTreeMap<String, BinaryMask>,
    /// Whole-object mask from a source that annotates the super-category directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_mask: Option<BinaryMask>,
}

/// Where super-category masks of a derived dataset come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuperMaskSource {
    #[default]
    PartUnion,
    SourceAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedAnnotation {
    pub category_id: u32,
    pub instance_id: u32,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedImage {
    pub image_id: u64,
    pub height: u32,
    pub width: u32,
    pub annotations: Vec<MixedAnnotation>,
}

impl MixedImage {
    /// Annotations as (possibly overlapping) instances.
    pub fn instances(&self) -> Vec<InstanceAnnotation> {
        self.annotations
            .iter()
            .map(|a| InstanceAnnotation { image_id: self.image_id, category_id: a.category_id, mask: a.mask.clone() })
            .collect()
    }

    /// Flatten into a panoptic map. Super-categories are painted first and
    /// parts on top, so every part stays visible.
    pub fn panoptic_map(&self, space: &LabelSpace, supers: &BTreeSet<u32>) -> Result<PanopticMap> {
        let mut order: Vec<(usize, &MixedAnnotation)> = self.annotations.iter().enumerate().collect();
        order.sort_by_key(|(i, a)| (!supers.contains(&a.category_id), *i));
        let mut items = Vec::with_capacity(order.len());
        for (i, a) in order {
            let (_, cat) = space
                .by_id(a.category_id)
                .ok_or_else(|| Error::LabelSpace(format!("category {} not in label space", a.category_id)))?;
            items.push((i as u32 + 1, a.category_id, cat.is_thing, &a.mask));
        }
        PanopticMap::from_masks(self.height, self.width, &items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedDataset {
    pub name: String,
    pub label_space: LabelSpace,
    /// Category ids of the super-categories in `label_space`.
    pub super_ids: BTreeSet<u32>,
    pub images: Vec<MixedImage>,
    /// Whole-object space first, part space second.
    pub provenance: (LabelSpace, LabelSpace),
    pub super_mask_source: SuperMaskSource,
}

/// True when `c` holds at least one category exclusive to `a` and one
/// exclusive to `b`. Names compare case- and whitespace-insensitively.
pub fn validate_mixed_labelspace(c: &LabelSpace, a: &LabelSpace, b: &LabelSpace) -> Result<bool> {
    let names =
        |s: &LabelSpace| -> BTreeSet<String> { s.categories().iter().map(|c| normalize_name(&c.name)).collect() };
    let (na, nb) = (names(a), names(b));
    let (mut only_a, mut only_b) = (false, false);
    for cat in c.categories() {
        let key = normalize_name(&cat.name);
        match (na.contains(&key), nb.contains(&key)) {
            (false, false) => {
                return Err(Error::Provenance(format!("category '{}' is in neither source label space", cat.name)))
            }
            (true, false) => only_a = true,
            (false, true) => only_b = true,
            (true, true) => {}
        }
    }
    Ok(only_a && only_b)
}

/// Union of every part mask of the instance.
pub fn synthesize_super_mask(instance: &PartWholeInstance) -> Result<BinaryMask> {
    let mut masks = instance.part_masks.values();
    let first = masks
        .next()
        .ok_or_else(|| Error::Degenerate(format!("instance {} has no part masks", instance.instance_id)))?;
    masks.try_fold(first.clone(), |acc, m| acc.union(m))
}

fn find_hierarchy<'a>(hierarchies: &'a [PartHierarchy], super_name: &str) -> Option<&'a PartHierarchy> {
    let key = normalize_name(super_name);
    hierarchies.iter().find(|h| normalize_name(&h.super_name) == key)
}

/// Label space of one derived dataset after checking the subset against the
/// hierarchies. Every category is a thing.
pub fn subset_label_space(hierarchies: &[PartHierarchy], subset: &[SubsetGroup]) -> Result<LabelSpace> {
    if subset.is_empty() {
        return Err(Error::Subset("empty part subset".into()));
    }
    for SubsetGroup(sup, parts) in subset {
        let h =
            find_hierarchy(hierarchies, sup).ok_or_else(|| Error::Subset(format!("unknown super-category '{sup}'")))?;
        if parts.is_empty() {
            return Err(Error::Subset(format!("no parts selected for '{sup}'")));
        }
        let full: BTreeSet<String> = h.parts.iter().map(|p| normalize_name(p)).collect();
        let chosen: BTreeSet<String> = parts.iter().map(|p| normalize_name(p)).collect();
        if chosen.len() != parts.len() {
            return Err(Error::Subset(format!("repeated part in subset for '{sup}'")));
        }
        if let Some(p) = chosen.iter().find(|p| !full.contains(*p)) {
            return Err(Error::Subset(format!("'{p}' is not a part of '{sup}'")));
        }
        if chosen == full {
            return Err(Error::Subset(format!(
                "subset uses every part of '{sup}', which would cover the whole object"
            )));
        }
    }
    let labels = subset_labels(subset);
    let pairs: Vec<(&str, bool)> = labels.iter().map(|l| (l.as_str(), true)).collect();
    LabelSpace::from_names(LabelSpaceId::Test, &pairs)
}

/// One dataset per subset. Each super annotation takes the instance id of its
/// part group; instances without any nonempty part contribute nothing.
pub fn build_mixed_datasets(
    hierarchies: &[PartHierarchy],
    instances: &[PartWholeInstance],
    subsets: &[(String, PartSubset)],
    provenance: (&LabelSpace, &LabelSpace),
    source: SuperMaskSource,
) -> Result<Vec<MixedDataset>> {
    for inst in instances {
        let h = find_hierarchy(hierarchies, &inst.super_name).ok_or_else(|| {
            Error::Format(format!("instance {} has unknown super-category '{}'", inst.instance_id, inst.super_name))
        })?;
        for p in inst.part_masks.keys() {
            if !h.parts.iter().any(|hp| normalize_name(hp) == normalize_name(p)) {
                return Err(Error::Format(format!(
                    "instance {} annotates '{p}', not a part of '{}'",
                    inst.instance_id, h.super_name
                )));
            }
        }
    }
    let mut by_image: BTreeMap<u64, Vec<&PartWholeInstance>> = BTreeMap::new();
    for inst in instances {
        by_image.entry(inst.image_id).or_default().push(inst);
    }

    subsets
        .par_iter()
        .map(|(name, subset)| {
            let space = subset_label_space(hierarchies, subset)?;
            if !validate_mixed_labelspace(&space, provenance.0, provenance.1)? {
                return Err(Error::Provenance(format!(
                    "dataset '{name}' lacks exclusive categories from both source spaces"
                )));
            }
            let id_of = |n: &str| space.categories()[space.position_by_name(n).expect("label from subset")].id;
            let super_ids: BTreeSet<u32> = subset.iter().map(|g| id_of(&g.0)).collect();
            let mut images = Vec::new();
            for (&image_id, insts) in &by_image {
                let mut dims: Option<(u32, u32)> = None;
                let mut annotations = Vec::new();
                for inst in insts {
                    let Some(group) = subset.iter().find(|g| normalize_name(&g.0) == normalize_name(&inst.super_name))
                    else {
                        continue;
                    };
                    for m in inst.part_masks.values().chain(inst.source_mask.as_ref()) {
                        let d = (m.height(), m.width());
                        if *dims.get_or_insert(d) != d {
                            return Err(Error::Dimension(format!("image {image_id} mixes mask sizes")));
                        }
                    }
                    let super_mask = match source {
                        SuperMaskSource::PartUnion => synthesize_super_mask(inst)?,
                        SuperMaskSource::SourceAnnotation => inst.source_mask.clone().ok_or_else(|| {
                            Error::Format(format!("instance {} has no source mask", inst.instance_id))
                        })?,
                    };
                    let union = synthesize_super_mask(inst)?;
                    if union.is_empty() {
                        continue;
                    }
                    for part in &group.1 {
                        let key = normalize_name(part);
                        let mask = inst.part_masks.iter().find(|(k, _)| normalize_name(k) == key).map(|(_, m)| m);
                        if let Some(m) = mask.filter(|m| !m.is_empty()) {
                            annotations.push(MixedAnnotation {
                                category_id: id_of(part),
                                instance_id: inst.instance_id,
                                mask: m.clone(),
                            });
                        }
                    }
                    annotations.push(MixedAnnotation {
                        category_id: id_of(&group.0),
                        instance_id: inst.instance_id,
                        mask: super_mask,
                    });
                }
                if let (Some((height, width)), false) = (dims, annotations.is_empty()) {
                    images.push(MixedImage { image_id, height, width, annotations });
                }
            }
            Ok(MixedDataset {
                name: name.clone(),
                label_space: space,
                super_ids,
                images,
                provenance: (provenance.0.clone(), provenance.1.clone()),
                super_mask_source: source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDef {
    /// Key into the whole-object spaces.
    pub whole: String,
    pub hierarchies: Vec<PartHierarchy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDef {
    pub name: String,
    pub source: String,
    pub subsets: Vec<PartSubset>,
}

/// Benchmark definitions: part hierarchies per part-annotated source, the
/// whole-object spaces they pair with, and the derived subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkFixtures {
    pub sources: BTreeMap<String, SourceDef>,
    pub whole_spaces: BTreeMap<String, Vec<String>>,
    pub benchmarks: Vec<BenchmarkDef>,
}

impl BenchmarkFixtures {
    pub fn builtin() -> Self {
        Self::from_json_str(BUILTIN_FIXTURES).expect("built-in fixtures parse")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: BenchmarkFixtures =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("benchmark fixtures: {e}")))?;
        for b in &f.benchmarks {
            let src = f.source(&b.source)?;
            if !f.whole_spaces.contains_key(&src.whole) {
                return Err(Error::Format(format!("unknown whole-object space '{}'", src.whole)));
            }
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn source(&self, name: &str) -> Result<&SourceDef> {
        self.sources.get(name).ok_or_else(|| Error::Format(format!("unknown part source '{name}'")))
    }

    pub fn benchmark(&self, name: &str) -> Result<&BenchmarkDef> {
        self.benchmarks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Format(format!("unknown benchmark '{name}'")))
    }

    /// Whole-object space (training space 1) and part space (training space 2)
    /// of a part source.
    pub fn provenance(&self, source: &str) -> Result<(LabelSpace, LabelSpace)> {
        let src = self.source(source)?;
        let whole: Vec<(&str, bool)> = self.whole_spaces[&src.whole].iter().map(|n| (n.as_str(), true)).collect();
        let mut seen = BTreeSet::new();
        let parts: Vec<(&str, bool)> = src
            .hierarchies
            .iter()
            .flat_map(|h| h.parts.iter())
            .filter(|p| seen.insert(normalize_name(p)))
            .map(|p| (p.as_str(), true))
            .collect();
        Ok((
            LabelSpace::from_names(LabelSpaceId::Train(1), &whole)?,
            LabelSpace::from_names(LabelSpaceId::Train(2), &parts)?,
        ))
    }

    /// Label spaces of every sub-dataset of a benchmark, each checked against
    /// the hierarchies and the partition condition.
    pub fn label_spaces(&self, benchmark: &str) -> Result<Vec<LabelSpace>> {
        let b = self.benchmark(benchmark)?;
        let src = self.source(&b.source)?;
        let (a, p) = self.provenance(&b.source)?;
        b.subsets
            .iter()
            .map(|s| {
                let space = subset_label_space(&src.hierarchies, s)?;
                if !validate_mixed_labelspace(&space, &a, &p)? {
                    return Err(Error::Provenance(format!("a subset of '{benchmark}' fails the partition condition")));
                }
                Ok(space)
            })
            .collect()
    }

    /// Build every sub-dataset of a benchmark from part annotations.
    pub fn build(
        &self,
        benchmark: &str,
        instances: &[PartWholeInstance],
        source: SuperMaskSource,
    ) -> Result<Vec<MixedDataset>> {
        let b = self.benchmark(benchmark)?;
        let src = self.source(&b.source)?;
        let (a, p) = self.provenance(&b.source)?;
        let subsets: Vec<(String, PartSubset)> =
            b.subsets.iter().enumerate().map(|(i, s)| (format!("{}_{}", b.name, i + 1), s.clone())).collect();
        build_mixed_datasets(&src.hierarchies, instances, &subsets, (&a, &p), source)
    }
}

/// Draws dataset indices uniformly, whatever the dataset sizes, and an image
/// uniformly within the chosen dataset.
#[derive(Debug, Clone)]
pub struct EqualFrequencySampler {
    sizes: Vec<usize>,
    rng: ChaCha8Rng,
}

impl EqualFrequencySampler {
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("sampler needs at least one dataset".into()));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("dataset {i} is empty")));
        }
        Ok(EqualFrequencySampler { sizes: sizes.to_vec(), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_dataset(&mut self) -> usize {
        self.rng.random_range(0..self.sizes.len())
    }

    /// Dataset index and image index within it.
    pub fn next_image(&mut self) -> (usize, usize) {
        let d = self.next_dataset();
        (d, self.rng.random_range(0..self.sizes[d]))
    }
}

/// `draws` dataset indices from a seeded generator.
pub fn equal_frequency_sampler(dataset_sizes: &[usize], draws: usize, seed: u64) -> Result<Vec<usize>> {
    if draws == 0 {
        return Err(Error::Config("sampler needs at least one draw".into()));
    }
    let mut s = EqualFrequencySampler::new(dataset_sizes, seed)?;
    Ok((0..draws).map(|_| s.next_dataset()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: u32, w: u32, r0: u32, r1: u32, c0: u32, c1: u32) -> BinaryMask {
        let bits: Vec<bool> = (0..h * w).map(|i| (r0..r1).contains(&(i / w)) && (c0..c1).contains(&(i % w))).collect();
        BinaryMask::from_row_major(h, w, &bits).unwrap()
    }

    fn person(image_id: u64, instance_id: u32) -> PartWholeInstance {
        let mut part_masks = BTreeMap::new();
        part_masks.insert("face".to_string(), rect(10, 10, 0, 2, 3, 6));
        part_masks.insert("hair".to_string(), rect(10, 10, 0, 1, 2, 7));
        part_masks.insert("leg".to_string(), rect(10, 10, 6, 10, 3, 6));
        PartWholeInstance { image_id, instance_id, super_name: "person".into(), part_masks, source_mask: None }
    }

    #[test]
    fn super_mask_areas() {
        let mut inst = person(1, 1);
        inst.part_masks.clear();
        inst.part_masks.insert("a".into(), rect(4, 4, 0, 1, 0, 4)); // 4 px
        inst.part_masks.insert("b".into(), rect(4, 4, 2, 4, 0, 4)); // 8 px
        assert_eq!(synthesize_super_mask(&inst).unwrap().area(), 12);

        let inst = person(1, 1);
        let sup = synthesize_super_mask(&inst).unwrap();
        let sum: u64 = inst.part_masks.values().map(|m| m.area()).sum();
        let max = inst.part_masks.values().map(|m| m.area()).max().unwrap();
        assert!(sup.area() <= sum && sup.area() >= max);
        for m in inst.part_masks.values() {
            assert_eq!(m.intersection_area(&sup), m.area());
        }
    }

    #[test]
    fn super_mask_errors() {
        let mut inst = person(1, 1);
        inst.part_masks.insert("arm".into(), rect(5, 5, 0, 1, 0, 1));
        assert!(synthesize_super_mask(&inst).is_err());
        inst.part_masks.clear();
        assert!(synthesize_super_mask(&inst).is_err());
    }

    #[test]
    fn partition_condition() {
        let a = LabelSpace::from_names(LabelSpaceId::Train(1), &[("person", true), ("car", true)]).unwrap();
        let b = LabelSpace::from_names(LabelSpaceId::Train(2), &[("Face", true), ("hair", true)]).unwrap();
        let c = LabelSpace::from_names(LabelSpaceId::Test, &[("face", true), ("Person", true)]).unwrap();
        assert!(validate_mixed_labelspace(&c, &a, &b).unwrap());
        let c = LabelSpace::from_names(LabelSpaceId::Test, &[("car", true), ("person", true)]).unwrap();
        assert!(!validate_mixed_labelspace(&c, &a, &b).unwrap());
        let c = LabelSpace::from_names(LabelSpaceId::Test, &[("face", true), ("dog", true)]).unwrap();
        assert!(matches!(validate_mixed_labelspace(&c, &a, &b), Err(Error::Provenance(_))));
    }

    #[test]
    fn builtin_subset_examples() {
        let f = BenchmarkFixtures::builtin();
        let names = |s: &LabelSpace| s.categories().iter().map(|c| c.name.clone()).collect::<Vec<_>>();
        let pairs = f.label_spaces("cihp_pair").unwrap();
        assert_eq!(names(&pairs[3]), ["face", "person"]);
        let multi = f.label_spaces("cihp_multi").unwrap();
        assert_eq!(names(&multi[0]), ["leg", "shoe", "person"]);
    }

    #[test]
    fn full_subset_is_rejected() {
        let f = BenchmarkFixtures::builtin();
        let h = &f.source("csp").unwrap().hierarchies;
        let all = SubsetGroup("person".into(), h[0].parts.clone());
        assert!(matches!(subset_label_space(h, &[all]), Err(Error::Subset(_))));
        let bad = SubsetGroup("person".into(), vec!["wheel".into()]);
        assert!(subset_label_space(h, &[bad]).is_err());
    }

    #[test]
    fn builds_pair_dataset() {
        let f = BenchmarkFixtures::builtin();
        let insts = vec![person(1, 1), person(1, 2), person(2, 1)];
        let sets = f.build("cihp_pair", &insts, SuperMaskSource::PartUnion).unwrap();
        assert_eq!(sets.len(), 15);
        let face = &sets[3];
        assert_eq!(face.images.len(), 2);
        let img = &face.images[0];
        assert_eq!(img.annotations.len(), 4);
        // Instance identity carries over to the super annotation.
        assert_eq!(img.annotations[0].instance_id, img.annotations[1].instance_id);
        // Super mask covers every part, including unexposed ones.
        let sup = &img.annotations[1].mask;
        assert_eq!(sup.area(), synthesize_super_mask(&insts[0]).unwrap().area());
        let map = img.panoptic_map(&face.label_space, &face.super_ids).unwrap();
        // Later person instance paints over earlier, parts stay visible on top.
        assert!(map.segments().iter().any(|s| s.category_id == 1));

        // Coat is never annotated: the person still appears.
        let coat = &sets[1];
        assert!(coat.images[0].annotations.iter().all(|a| coat.super_ids.contains(&a.category_id)));
        assert!(matches!(f.build("cihp_pair", &insts, SuperMaskSource::SourceAnnotation), Err(Error::Format(_))));
    }

    #[test]
    fn sampler_basics() {
        assert!(equal_frequency_sampler(&[5], 100, 1).unwrap().iter().all(|&i| i == 0));
        assert!(equal_frequency_sampler(&[], 10, 1).is_err());
        let a = equal_frequency_sampler(&[10, 1_000_000], 10_000, 7).unwrap();
        let b = equal_frequency_sampler(&[10, 1_000_000], 10_000, 7).unwrap();
        assert_eq!(a, b);
        let zeros = a.iter().filter(|&&i| i == 0).count();
        assert!((4700..=5300).contains(&zeros));
        let c = equal_frequency_sampler(&[10, 1_000_000], 64, 8).unwrap();
        assert_ne!(&a[..64], &c[..]);
        let mut s = EqualFrequencySampler::new(&[3, 1], 0).unwrap();
        for _ in 0..100 {
            let (d, i) = s.next_image();
            assert!(i < [3, 1][d]);
        }
    }
}
