//! Test-time inference and the point-matching evaluation protocol.

mod matching;
mod metrics;

pub use matching::{match_points, MatchResult};
pub use metrics::{category_weights, metrics, weighted_mean, CategoryMetrics, MetricsReport, Prf};

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Minimum objectness for an NMS candidate.
    pub nms_threshold: f64,
    /// Suppression radius in pixels.
    pub nms_radius: f64,
    /// Matching radius in pixels for evaluation.
    pub match_radius: f64,
    /// Images per forward pass.
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nms_threshold: 0.5,
            nms_radius: 6.0,
            match_radius: 6.0,
            batch_size: 16,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::Config("nms_threshold must lie in [0, 1]".into()));
        }
        if self.nms_radius < 1.0 || self.match_radius < 1.0 {
            return Err(Error::Config("nms_radius and match_radius must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("infer batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A detected nucleus. `category` is 0 until assigned, and stays 0 when the
/// background class wins the combined argmax.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectedPoint {
    pub row: usize,
    pub col: usize,
    pub objectness: f64,
    pub category: u8,
    /// Combined class probabilities `p_obj * p_cond_k`, background first.
    pub class_probs: Vec<f64>,
}

fn plane_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    match s.len() {
        2.. if s[..s.len() - 2].iter().all(|&d| d == 1) => Ok((s[s.len() - 2], s[s.len() - 1])),
        _ => Err(Error::dim(op, format!("expected a single [H,W] map, got {s:?}"))),
    }
}

/// Greedy non-maximum suppression: candidates with `p >= threshold` are
/// visited by descending score (ties in row-major order) and kept unless a
/// kept point lies within `radius`.
pub fn nms(p_obj: &Tensor, threshold: f64, radius: f64) -> Result<Vec<DetectedPoint>> {
    let (_, w) = plane_dims(p_obj, "nms")?;
    let d = p_obj.data();
    let mut cand: Vec<usize> = (0..d.len()).filter(|&i| d[i] >= threshold).collect();
    // Stable sort keeps row-major order among equal scores.
    cand.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let r2 = radius * radius;
    let mut kept: Vec<DetectedPoint> = Vec::new();
    for i in cand {
        let (row, col) = (i / w, i % w);
        let near = kept.iter().any(|k| {
            let (dr, dc) = (k.row as f64 - row as f64, k.col as f64 - col as f64);
            dr * dr + dc * dc <= r2
        });
        if !near {
            kept.push(DetectedPoint {
                row,
                col,
                objectness: d[i],
                category: 0,
                class_probs: Vec::new(),
            });
        }
    }
    Ok(kept)
}

/// Assigns each point the argmax of `p_obj * p_cond` over all classes
/// (ties to the lower index). `p_cond` is `[C,H,W]` or `[1,C,H,W]`.
pub fn assign_categories(points: &mut [DetectedPoint], p_obj: &Tensor, p_cond: &Tensor) -> Result<()> {
    let (h, w) = plane_dims(p_obj, "assign_categories")?;
    let s = p_cond.shape();
    let c = match s {
        [c, hh, ww] | [1, c, hh, ww] if *hh == h && *ww == w => *c,
        _ => return Err(Error::dim("assign_categories", format!("conditional {s:?} for a {h}x{w} map"))),
    };
    let plane = h * w;
    for p in points {
        let i = p.row * w + p.col;
        let po = p_obj.data()[i];
        p.class_probs = (0..c).map(|k| po * p_cond.data()[k * plane + i]).collect();
        let mut best = 0;
        for k in 1..c {
            if p.class_probs[k] > p.class_probs[best] {
                best = k;
            }
        }
        p.category = best as u8;
    }
    Ok(())
}

/// Objectness map `[H,W]` from a `[1,2,H,W]` detection output.
pub fn objectness_map(det_probs: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = det_probs.dims4("objectness_map")?;
    if b != 1 || c != 2 {
        return Err(Error::dim("objectness_map", format!("{:?}", det_probs.shape())));
    }
    Tensor::new(&[h, w], det_probs.data()[h * w..].to_vec())
}

/// Full inference on one image `[3,H,W]`: forward pass, NMS, category assignment.
pub fn detect(model: &Model, image: &Tensor, cfg: &InferConfig) -> Result<Vec<DetectedPoint>> {
    let out = model.predict(image)?;
    points_from_maps(&out.det_probs, &out.cls_cond_probs, cfg)
}

/// NMS and assignment on `[1,2,H,W]` / `[1,K+1,H,W]` probability maps.
pub fn points_from_maps(det_probs: &Tensor, cls_cond: &Tensor, cfg: &InferConfig) -> Result<Vec<DetectedPoint>> {
    let p_obj = objectness_map(det_probs)?;
    let mut pts = nms(&p_obj, cfg.nms_threshold, cfg.nms_radius)?;
    assign_categories(&mut pts, &p_obj, cls_cond)?;
    Ok(pts)
}

/// Per-image evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEvaluation {
    pub id: String,
    pub points: Vec<DetectedPoint>,
    pub matches: MatchResult,
}

/// Runs inference over `images` and matches against their annotations.
pub fn evaluate_images(model: &Model, images: &[&AnnotatedImage], cfg: &InferConfig) -> Result<Vec<ImageEvaluation>> {
    let k = model.config.num_categories;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(cfg.batch_size) {
        let parts = chunk.iter().map(|im| im.pixels.clone().into_batch()).collect::<Result<Vec<_>>>()?;
        let batch = Tensor::stack(&parts)?;
        let maps = model.forward(&batch, crate::model::Mode::Eval)?;
        for (i, im) in chunk.iter().enumerate() {
            let pts = points_from_maps(&maps.det_probs.sample(i)?, &maps.cls_cond_probs.sample(i)?, cfg)?;
            let matches = match_points(&pts, &im.nuclei, cfg.match_radius, k);
            out.push(ImageEvaluation {
                id: im.id.clone(),
                points: pts,
                matches,
            });
        }
    }
    Ok(out)
}

/// Evaluates `model` on `images` with weights from their annotations.
pub fn evaluate(model: &Model, images: &[&AnnotatedImage], cfg: &InferConfig) -> Result<(MetricsReport, Vec<ImageEvaluation>)> {
    let per_image = evaluate_images(model, images, cfg)?;
    let weights = category_weights(images.iter().flat_map(|im| &im.nuclei), model.config.num_categories);
    let matches: Vec<&MatchResult> = per_image.iter().map(|e| &e.matches).collect();
    Ok((metrics(&matches, &weights, model.config.num_categories), per_image))
}
