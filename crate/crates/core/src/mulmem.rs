//! Multi-layer prototype memory.
//!
//! Each tapped layer gets a [`SubBranch`] of `K` prototypes. Prototypes are
//! seeded by a similarity-gated scan of training features and then refined
//! by momentum averaging over nearest-prototype assignments. A pixel's score
//! at one layer is one minus its best cosine match; layers combine by product.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::micronet::TapMap;
use crate::tensorgrid::{bilinear_resize, cosine, mean_std, FeatureMap, FeatureVector, LayerId, ScoreMap};

pub const DEFAULT_THRESHOLD: f64 = 0.85;
pub const DEFAULT_CAPACITY: usize = 50;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
/// Floor applied to class standard deviations during standardization.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SubBranch {
    pub layer: LayerId,
    prototypes: Vec<FeatureVector>,
    capacity: usize,
    threshold: f64,
    momentum: f64,
}

/// How similarity-gated initialization walks the candidate features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionOrder {
    /// Use the features in the order given.
    Sequential,
    /// Visit every (image, location) pair once, in a permutation drawn from the seed.
    Seeded(u64),
}

fn check_hyper(capacity: usize, threshold: f64, momentum: f64) -> Result<()> {
    if capacity == 0 {
        return Err(Error::contract("sub-branch capacity K must be >= 1"));
    }
    if !(threshold > -1.0 && threshold <= 1.0) {
        return Err(Error::contract(format!("threshold {threshold} outside (-1, 1]")));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::contract(format!("momentum {momentum} outside [0, 1]")));
    }
    Ok(())
}

impl SubBranch {
    /// Rebuilds a branch from stored prototypes (e.g. a bank file).
    pub fn from_prototypes(
        layer: LayerId,
        prototypes: Vec<FeatureVector>,
        threshold: f64,
        momentum: f64,
    ) -> Result<Self> {
        check_hyper(prototypes.len(), threshold, momentum)?;
        let dim = prototypes[0].dim();
        if prototypes.iter().any(|p| p.dim() != dim || p.norm() == 0.0) {
            return Err(Error::contract("prototypes must share a dimension and be nonzero"));
        }
        Ok(SubBranch {
            layer,
            capacity: prototypes.len(),
            prototypes,
            threshold,
            momentum,
        })
    }

    /// Similarity-gated initialization: a candidate is accepted when its best
    /// cosine similarity against the already accepted prototypes is strictly
    /// below `threshold`. Zero vectors are never accepted.
    pub fn init_from_stream<'a, I>(
        layer: LayerId,
        stream: I,
        threshold: f64,
        capacity: usize,
        momentum: f64,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        check_hyper(capacity, threshold, momentum)?;
        let mut prototypes: Vec<FeatureVector> = Vec::with_capacity(capacity);
        let mut dim = None;
        for f in stream {
            if prototypes.len() == capacity {
                break;
            }
            match dim {
                None => dim = Some(f.len()),
                Some(d) if d != f.len() => {
                    return Err(Error::contract(format!(
                        "feature stream mixes dims {d} and {}",
                        f.len()
                    )))
                }
                _ => {}
            }
            if f.iter().all(|&v| v == 0.0) {
                continue;
            }
            let best = prototypes
                .iter()
                .map(|p| cosine(p.as_slice(), f))
                .fold(f64::NEG_INFINITY, f64::max);
            if best < threshold {
                prototypes.push(FeatureVector::new(f.to_vec())?);
            }
        }
        if prototypes.len() < capacity {
            return Err(Error::InitStarvation {
                placed: prototypes.len(),
                required: capacity,
            });
        }
        Ok(SubBranch {
            layer,
            prototypes,
            capacity,
            threshold,
            momentum,
        })
    }

    /// Initializes from the pixels of a set of feature maps.
    pub fn init_from_maps(
        layer: LayerId,
        maps: &[&FeatureMap],
        threshold: f64,
        capacity: usize,
        momentum: f64,
        order: SelectionOrder,
    ) -> Result<Self> {
        let mut index: Vec<(usize, usize)> = maps
            .iter()
            .enumerate()
            .flat_map(|(m, fm)| (0..fm.height * fm.width).map(move |p| (m, p)))
            .collect();
        if let SelectionOrder::Seeded(seed) = order {
            index.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let stream = index.into_iter().map(|(m, p)| {
            let fm = maps[m];
            &fm.data[p * fm.channels..(p + 1) * fm.channels]
        });
        SubBranch::init_from_stream(layer, stream, threshold, capacity, momentum)
    }

    pub fn prototypes(&self) -> &[FeatureVector] {
        &self.prototypes
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].dim()
    }

    /// Index and similarity of the most similar prototype; ties go to the
    /// lowest index.
    pub fn nearest(&self, f: &[f64]) -> (usize, f64) {
        let mut best = (0, cosine(self.prototypes[0].as_slice(), f));
        for (k, p) in self.prototypes.iter().enumerate().skip(1) {
            let s = cosine(p.as_slice(), f);
            if s > best.1 {
                best = (k, s);
            }
        }
        best
    }

    /// Nearest-prototype assignment of every nonzero feature in the batch.
    pub fn assign<'a, I>(&self, batch: I) -> Vec<Option<usize>>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        batch
            .into_iter()
            .map(|f| (!f.iter().all(|&v| v == 0.0)).then(|| self.nearest(f).0))
            .collect()
    }

    /// One momentum learning step over a batch of features:
    /// `p <- m p + (1 - m) mean(assigned)` for each prototype with a non-empty
    /// assignment. Updates that would zero a prototype are skipped.
    pub fn update<'a, I>(&mut self, batch: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let dim = self.dim();
        let mut sums = vec![vec![0.0; dim]; self.prototypes.len()];
        let mut counts = vec![0usize; self.prototypes.len()];
        for f in batch {
            if f.len() != dim {
                return Err(Error::contract(format!(
                    "feature dim {} does not match prototype dim {dim}",
                    f.len()
                )));
            }
            if f.iter().all(|&v| v == 0.0) {
                continue;
            }
            let (k, _) = self.nearest(f);
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(f) {
                *s += v;
            }
        }
        let m = self.momentum;
        for ((p, sum), &n) in self.prototypes.iter_mut().zip(&sums).zip(&counts) {
            if n == 0 {
                continue;
            }
            let inv = 1.0 / n as f64;
            let next: Vec<f64> = p
                .as_slice()
                .iter()
                .zip(sum)
                .map(|(&pv, &s)| m * pv + (1.0 - m) * (s * inv))
                .collect();
            if next.iter().all(|&v| v == 0.0) || next.iter().any(|v| !v.is_finite()) {
                continue;
            }
            p.values_mut().copy_from_slice(&next);
        }
        Ok(())
    }

    /// Updates from every pixel of the given maps, taken as a single batch.
    pub fn update_from_maps(&mut self, maps: &[&FeatureMap]) -> Result<()> {
        for fm in maps {
            self.check_map(fm)?;
        }
        self.update(maps.iter().flat_map(|fm| fm.pixels()))
    }

    fn check_map(&self, fmap: &FeatureMap) -> Result<()> {
        if fmap.layer != self.layer {
            return Err(Error::contract(format!(
                "feature map from {} scored against the {} sub-branch",
                fmap.layer, self.layer
            )));
        }
        if fmap.channels != self.dim() {
            return Err(Error::contract(format!(
                "feature map has {} channels, prototypes have {}",
                fmap.channels,
                self.dim()
            )));
        }
        Ok(())
    }

    /// Per-pixel `1 - max_p cos(p, f)`, at the feature map's resolution.
    pub fn score(&self, fmap: &FeatureMap) -> Result<ScoreMap> {
        self.check_map(fmap)?;
        let data = fmap.pixels().map(|f| 1.0 - self.nearest(f).1).collect();
        ScoreMap::new(fmap.height, fmap.width, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    branches: BTreeMap<LayerId, SubBranch>,
}

impl MemoryBank {
    pub fn new(branches: Vec<SubBranch>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::contract("memory bank needs at least one sub-branch"));
        }
        let mut map = BTreeMap::new();
        for b in branches {
            let layer = b.layer;
            if map.insert(layer, b).is_some() {
                return Err(Error::contract(format!("two sub-branches for layer {layer}")));
            }
        }
        Ok(MemoryBank { branches: map })
    }

    pub fn layers(&self) -> Vec<LayerId> {
        self.branches.keys().copied().collect()
    }

    pub fn branch(&self, layer: LayerId) -> Option<&SubBranch> {
        self.branches.get(&layer)
    }

    pub fn branches(&self) -> impl Iterator<Item = &SubBranch> {
        self.branches.values()
    }

    pub fn branches_mut(&mut self) -> impl Iterator<Item = &mut SubBranch> {
        self.branches.values_mut()
    }

    /// Product over bank layers of the per-layer scores, each resized to
    /// `out_h x out_w` first.
    pub fn score(&self, taps: &TapMap, out_h: usize, out_w: usize) -> Result<ScoreMap> {
        let mut combined = ScoreMap::filled(out_h, out_w, 1.0);
        for (layer, branch) in &self.branches {
            let fmap = taps
                .get(layer)
                .ok_or_else(|| Error::config(format!("no {layer} features supplied for the memory bank")))?;
            let gamma = bilinear_resize(&branch.score(fmap)?, out_h, out_w)?;
            combined = combined.product(&gamma)?;
        }
        Ok(combined)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(BANK_MAGIC);
        w.u32(FORMAT_VERSION);
        w.len_u32(self.branches.len(), "branch count")?;
        for b in self.branches.values() {
            w.str8(b.layer.name())?;
            w.len_u32(b.prototypes.len(), "K")?;
            w.len_u32(b.dim(), "dim")?;
            w.f64(b.threshold);
            w.f64(b.momentum);
            for p in &b.prototypes {
                for &v in p.as_slice() {
                    w.f64(v);
                }
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(BANK_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let n = r.u32("branch count")? as usize;
        let mut branches = Vec::new();
        for i in 0..n {
            let ctx = format!("branch {i}");
            let at = r.offset();
            let name = r.str8(&ctx)?;
            let layer: LayerId = name
                .parse()
                .map_err(|_| r.invalid(at, &ctx, format!("unknown layer name {name:?}")))?;
            let k = r.u32(&ctx)? as usize;
            let dim = r.u32(&ctx)? as usize;
            let threshold = r.f64(&ctx)?;
            let momentum = r.f64(&ctx)?;
            let body_at = r.offset();
            let values = r.f64_array(
                k.checked_mul(dim).ok_or_else(|| crate::ParseError::ShapeOverflow {
                    offset: body_at,
                    context: ctx.clone(),
                })?,
                &format!("{layer} prototypes"),
            )?;
            let prototypes = values
                .chunks_exact(dim.max(1))
                .map(|c| FeatureVector::new(c.to_vec()))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| r.invalid(body_at, &ctx, e.to_string()))?;
            let branch = SubBranch::from_prototypes(layer, prototypes, threshold, momentum)
                .map_err(|e| r.invalid(at, &ctx, e.to_string()))?;
            branches.push(branch);
        }
        r.finish("memory bank")?;
        MemoryBank::new(branches)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        MemoryBank::from_bytes(&read_file(path)?)
    }
}

const BANK_MAGIC: &[u8; 4] = b"CSMB";
const STATS_MAGIC: &[u8; 4] = b"CSMS";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeMode {
    #[default]
    PerClass,
    GlobalOnly,
}

/// Training-set statistics of the combined memory score, per predicted class
/// and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub per_class: BTreeMap<u16, (f64, f64)>,
    pub global: (f64, f64),
}

impl StandardizationStats {
    /// Accumulates raw combined scores by predicted class. Each item is one
    /// training image: its score map and the predicted class per pixel.
    pub fn fit<I>(run: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ScoreMap, Option<Vec<u16>>)>,
    {
        let mut by_class: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
        let mut all = Vec::new();
        for (scores, classes) in run {
            if let Some(classes) = &classes {
                if classes.len() != scores.data.len() {
                    return Err(Error::contract(format!(
                        "predicted-class map has {} pixels, score map has {}",
                        classes.len(),
                        scores.data.len()
                    )));
                }
                for (&c, &s) in classes.iter().zip(&scores.data) {
                    by_class.entry(c).or_default().push(s);
                }
            }
            all.extend_from_slice(&scores.data);
        }
        if all.is_empty() {
            return Err(Error::contract("standardization needs at least one training image"));
        }
        let per_class = by_class
            .into_iter()
            .map(|(c, v)| mean_std(&v).map(|ms| (c, ms)))
            .collect::<Result<_>>()?;
        Ok(StandardizationStats {
            per_class,
            global: mean_std(&all)?,
        })
    }

    /// `(score - mean_c) / max(std_c, 1e-6)` using each pixel's predicted class,
    /// falling back to the global statistics for classes never seen in fitting
    /// (or for every pixel in global-only mode / without a class map).
    pub fn standardize(
        &self,
        scores: &ScoreMap,
        classes: Option<&[u16]>,
        mode: StandardizeMode,
    ) -> Result<ScoreMap> {
        if let Some(c) = classes {
            if c.len() != scores.data.len() {
                return Err(Error::contract("class map and score map differ in size"));
            }
        }
        let data = scores
            .data
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let (mean, std) = match (mode, classes) {
                    (StandardizeMode::PerClass, Some(c)) => {
                        *self.per_class.get(&c[i]).unwrap_or(&self.global)
                    }
                    _ => self.global,
                };
                (s - mean) / std.max(STD_FLOOR)
            })
            .collect();
        ScoreMap::new(scores.height, scores.width, data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(STATS_MAGIC);
        w.u32(FORMAT_VERSION);
        w.f64(self.global.0);
        w.f64(self.global.1);
        w.len_u32(self.per_class.len(), "class count")?;
        for (&c, &(m, s)) in &self.per_class {
            w.u32(c as u32);
            w.f64(m);
            w.f64(s);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(STATS_MAGIC)?;
        r.version(FORMAT_VERSION)?;
        let global = (r.f64("global mean")?, r.f64("global std")?);
        let n = r.u32("class count")? as usize;
        let mut per_class = BTreeMap::new();
        for i in 0..n {
            let ctx = format!("class entry {i}");
            let at = r.offset();
            let c = r.u32(&ctx)?;
            let c = u16::try_from(c).map_err(|_| r.invalid(at, &ctx, format!("class id {c} exceeds 16 bits")))?;
            per_class.insert(c, (r.f64(&ctx)?, r.f64(&ctx)?));
        }
        r.finish("standardization stats")?;
        Ok(StandardizationStats { per_class, global })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        StandardizationStats::from_bytes(&read_file(path)?)
    }
}
