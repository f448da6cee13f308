//! Region-proposal preprocessing: rank detected classes by frequency, merge
//! same-class boxes with the target region into candidate views, sample views
//! for training, and pick the maximum-discrepancy view at inference.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frozen::{FrozenVisionEncoder, SceneInput};
use crate::tensor::{Rng, Tape};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from([x0, y0, x1, y1]: [f64; 4]) -> Result<Self> {
        BBox::new(x0, y0, x1, y1)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let reason = if !(x0 < x1) {
            Some("x0 must be < x1")
        } else if !(y0 < y1) {
            Some("y0 must be < y1")
        } else if [x0, y0, x1, y1].iter().any(|v| !(0.0..=1.0).contains(v)) {
            Some("coordinates must lie in [0, 1]")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBBox { x0, y0, x1, y1, reason }),
            None => Ok(Self { x0, y0, x1, y1 }),
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }
}

impl FromStr for BBox {
    type Err = Error;

    /// "x0,y0,x1,y1"
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::Config(format!("expected x0,y0,x1,y1, got `{s}`")));
        }
        let mut c = [0.0; 4];
        for (slot, part) in c.iter_mut().zip(&parts) {
            *slot = part
                .parse()
                .map_err(|e| Error::Config(format!("bad coordinate `{part}` in `{s}`: {e}")))?;
        }
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "class")]
    pub class_name: String,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if self.class_name.is_empty() {
            return Err(Error::Config("detection with empty class name".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Config(format!("detection score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub bbox: BBox,
    pub source_class: String,
    pub is_target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscrepancyMode {
    FeatureCosine,
    OneMinusIou,
}

impl FromStr for DiscrepancyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature-cosine" => Ok(Self::FeatureCosine),
            "one-minus-iou" => Ok(Self::OneMinusIou),
            _ => Err(Error::Config(format!(
                "unknown discrepancy mode `{s}` (feature-cosine | one-minus-iou)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GodConfig {
    /// Top classes considered.
    pub k: usize,
    /// Total views including the target; j >= 2.
    pub j: usize,
    pub discrepancy_mode: DiscrepancyMode,
}

impl GodConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.j < 2 {
            return Err(Error::Config("j must be >= 2".into()));
        }
        Ok(())
    }
}

/// Class names by descending detection count, ties broken by ascending
/// lexicographic name, truncated to k.
pub fn rank_classes(detections: &[Detection], k: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for d in detections {
        *counts.entry(&d.class_name).or_default() += 1;
    }
    // BTreeMap iterates name-ascending; a stable sort by count keeps that
    // order inside each count bucket.
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.into_iter().take(k).map(|(name, _)| name.to_string()).collect()
}

/// Union envelope of the target and all class boxes.
pub fn merge_view(target: &BBox, class_boxes: &[BBox]) -> Result<BBox> {
    if class_boxes.is_empty() {
        return Err(Error::Precondition("merge_view needs at least one class box".into()));
    }
    let mut out = *target;
    for b in class_boxes {
        out.x0 = out.x0.min(b.x0);
        out.y0 = out.y0.min(b.y0);
        out.x1 = out.x1.max(b.x1);
        out.y1 = out.y1.max(b.y1);
    }
    Ok(out)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Uniformly drawn non-empty subset of 0..n.
fn non_empty_subset(n: usize, rng: &mut Rng) -> Vec<usize> {
    debug_assert!(n >= 1);
    if n == 1 {
        return vec![0];
    }
    if n <= 63 {
        let mask = rng.below((1usize << n) - 1) + 1;
        (0..n).filter(|i| mask & (1 << i) != 0).collect()
    } else {
        loop {
            let picked: Vec<usize> = (0..n).filter(|_| rng.bernoulli(0.5)).collect();
            if !picked.is_empty() {
                return picked;
            }
        }
    }
}

/// Builds the view list for one example: `[target] + (j-1)` sampled candidate
/// envelopes, one envelope per random non-empty subset of each top class's
/// boxes.
pub fn build_candidates(
    target: &BBox,
    detections: &[Detection],
    config: &GodConfig,
    rng: &mut Rng,
) -> Result<Vec<CandidateView>> {
    config.validate()?;
    let target_view =
        CandidateView { bbox: *target, source_class: "target".into(), is_target: true };

    let ranked = rank_classes(detections, config.k);
    let mut pool: Vec<CandidateView> = Vec::new();
    for class in &ranked {
        let boxes: Vec<BBox> = detections
            .iter()
            .filter(|d| &d.class_name == class)
            .map(|d| d.bbox)
            .collect();
        for _ in 0..config.j - 1 {
            let subset: Vec<BBox> =
                non_empty_subset(boxes.len(), rng).into_iter().map(|i| boxes[i]).collect();
            pool.push(CandidateView {
                bbox: merge_view(target, &subset)?,
                source_class: class.clone(),
                is_target: false,
            });
        }
    }

    let mut views = vec![target_view.clone()];
    if pool.is_empty() {
        log::warn!("no detections: falling back to {} copies of the target view", config.j);
        for _ in 0..config.j - 1 {
            views.push(CandidateView { is_target: false, ..target_view.clone() });
        }
        return Ok(views);
    }

    if pool.len() >= config.j - 1 {
        for i in rng.sample_indices(pool.len(), config.j - 1) {
            views.push(pool[i].clone());
        }
    } else {
        for _ in 0..config.j - 1 {
            views.push(pool[rng.below(pool.len())].clone());
        }
    }
    Ok(views)
}

/// Patch-grid crop: maps the box to whole patches (floor/ceil of the
/// normalized coordinates) and re-rasterizes to a G×G grid by nearest-patch
/// replication. Returns G² row indices into the flattened scene.
fn patch_span(lo: f64, hi: f64, g: usize) -> (usize, usize) {
    let a = ((lo * g as f64).floor() as usize).min(g - 1);
    let b = ((hi * g as f64).ceil() as usize).clamp(a + 1, g);
    (a, b - a)
}

/// The patch-aligned normalized region `crop_indices` actually resamples;
/// always contains `bbox`.
pub fn crop_region(bbox: &BBox, g: usize) -> BBox {
    let (py0, h) = patch_span(bbox.y0, bbox.y1, g);
    let (px0, w) = patch_span(bbox.x0, bbox.x1, g);
    let gf = g as f64;
    BBox {
        x0: px0 as f64 / gf,
        y0: py0 as f64 / gf,
        x1: (px0 + w) as f64 / gf,
        y1: (py0 + h) as f64 / gf,
    }
}

pub fn crop_indices(bbox: &BBox, g: usize) -> Vec<usize> {
    let span = |lo: f64, hi: f64| patch_span(lo, hi, g);
    let (py0, h) = span(bbox.y0, bbox.y1);
    let (px0, w) = span(bbox.x0, bbox.x1);

    let nearest = |gi: usize, start: usize, len: usize| -> usize {
        let src = ((gi as f64 + 0.5) * len as f64 / g as f64).floor() as usize;
        start + src.min(len - 1)
    };
    let mut indices = Vec::with_capacity(g * g);
    for gy in 0..g {
        let sy = nearest(gy, py0, h);
        for gx in 0..g {
            indices.push(sy * g + nearest(gx, px0, w));
        }
    }
    indices
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn pooled_crop_feature(
    scene: &SceneInput,
    bbox: &BBox,
    encoder: &FrozenVisionEncoder,
) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let patches = t.constant(&scene.patches());
    let cropped = t.gather_rows(patches, &crop_indices(bbox, scene.grid()))?;
    let features = encoder.encode(&mut t, cropped)?;
    let pooled = t.mean_rows(features)?;
    Ok(t.value(pooled).to_vec())
}

/// Picks the candidate with the greatest discrepancy from the target; ties
/// break to the first occurrence in list order.
pub fn select_inference_view(
    candidates: &[CandidateView],
    target: &BBox,
    scene: &SceneInput,
    encoder: &FrozenVisionEncoder,
    mode: DiscrepancyMode,
) -> Result<CandidateView> {
    if candidates.is_empty() {
        return Err(Error::Precondition("select_inference_view needs candidates".into()));
    }
    let target_pool = match mode {
        DiscrepancyMode::FeatureCosine => Some(pooled_crop_feature(scene, target, encoder)?),
        DiscrepancyMode::OneMinusIou => None,
    };
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, cand) in candidates.iter().enumerate() {
        let score = match mode {
            DiscrepancyMode::FeatureCosine => {
                let pool = pooled_crop_feature(scene, &cand.bbox, encoder)?;
                1.0 - cosine(&pool, target_pool.as_ref().unwrap())
            }
            DiscrepancyMode::OneMinusIou => 1.0 - iou(&cand.bbox, target),
        };
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(candidates[best].clone())
}
