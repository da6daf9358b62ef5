//! Training objective: objectness-prior combination, weighted detection
//! loss, gated classification loss, and the joint loss with weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::is_decayed;
use crate::tensor::Tensor;

/// Lower and upper clamp for automatically derived class weights.
pub const WEIGHT_CLAMP: (f64, f64) = (0.1, 100.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Fixed,
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Objectness threshold of the classification gate.
    pub t_p: f64,
    /// Weight of the classification term.
    pub lambda: f64,
    /// Weight-decay coefficient.
    pub beta: f64,
    pub alpha_mode: WeightMode,
    /// Positive-pixel weight when `alpha_mode = "fixed"`.
    pub alpha: Option<f64>,
    pub gamma_mode: WeightMode,
    /// Per-class weights (background first) when `gamma_mode = "fixed"`.
    pub gamma: Option<Vec<f64>>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            t_p: 0.8,
            lambda: 1.0,
            beta: 1e-4,
            alpha_mode: WeightMode::Auto,
            alpha: None,
            gamma_mode: WeightMode::Auto,
            gamma: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.t_p > 0.0 && self.t_p < 1.0) {
            return Err(Error::Config(format!("t_p must lie in (0, 1), got {}", self.t_p)));
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("lambda and beta must be non-negative".into()));
        }
        if self.alpha_mode == WeightMode::Fixed {
            match self.alpha {
                Some(a) if a > 0.0 => {}
                _ => return Err(Error::Config("fixed alpha mode needs a positive `alpha`".into())),
            }
        }
        if self.gamma_mode == WeightMode::Fixed {
            match &self.gamma {
                Some(g) if g.len() == num_classes && g.iter().all(|&v| v > 0.0) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "fixed gamma mode needs {num_classes} positive `gamma` entries"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Resolves alpha, falling back to the automatic value.
    pub fn resolve_alpha(&self, det_masks: &[u8]) -> f64 {
        match (self.alpha_mode, self.alpha) {
            (WeightMode::Fixed, Some(a)) => a,
            _ => auto_alpha(det_masks),
        }
    }

    pub fn resolve_gamma(&self, cls_masks: &[u8], num_classes: usize) -> Vec<f64> {
        match (self.gamma_mode, &self.gamma) {
            (WeightMode::Fixed, Some(g)) => g.clone(),
            _ => auto_gamma(cls_masks, num_classes),
        }
    }
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossReport {
    pub loss_det: f64,
    /// Mean classification loss over gated pixels (before `lambda`).
    pub loss_cls: f64,
    pub loss_decay: f64,
    pub loss_total: f64,
    /// Pixels in the detection mean.
    pub n: usize,
    /// Pixels admitted by the classification gate.
    pub n_cls: usize,
}

impl LossReport {
    /// True when the classification term was requested but the gate was closed.
    pub fn gate_closed(&self) -> bool {
        self.n_cls == 0
    }
}

/// Graph-side terms of the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub det: Option<Var>,
    pub cls: Option<Var>,
    pub decay: Option<Var>,
    pub total: Var,
}

/// `p_cls_k = p_obj * p_cond_k` for `det_probs [B,2,H,W]` and
/// `cond_probs [B,K+1,H,W]`.
pub fn combine_opi(g: &mut Graph, det_probs: Var, cond_probs: Var) -> Result<Var> {
    let p_obj = g.select_channel(det_probs, 1)?;
    g.scale_by_map(p_obj, cond_probs)
}

/// Value-level objectness combination for `p_obj [H,W]` (or `[1,H,W]`) and
/// `p_cond [C,H,W]`.
pub fn combine_opi_maps(p_obj: &Tensor, p_cond: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match p_cond.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::dim("combine_opi", format!("conditional map {s:?}"))),
    };
    if p_obj.len() != h * w || !matches!(p_obj.shape(), [a, b] | [1, a, b] if *a == h && *b == w) {
        return Err(Error::dim(
            "combine_opi",
            format!("objectness {:?} for conditional {:?}", p_obj.shape(), p_cond.shape()),
        ));
    }
    let plane = h * w;
    let mut out = p_cond.data().to_vec();
    for k in 0..c {
        for (o, &p) in out[k * plane..(k + 1) * plane].iter_mut().zip(p_obj.data()) {
            *o *= p;
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Weighted binary cross-entropy averaged over every pixel of the batch.
/// `det_mask` holds one 0/1 label per pixel in `[B,H,W]` order.
pub fn detection_loss(g: &mut Graph, det_probs: Var, det_mask: &[u8], alpha: f64) -> Result<Var> {
    let labels: Vec<usize> = det_mask.iter().map(|&v| usize::from(v != 0)).collect();
    let include = vec![true; labels.len()];
    g.weighted_nll(det_probs, &labels, &include, &[1.0, alpha], labels.len() as f64)
}

/// Pixels admitted by the objectness gate `p_obj > t_p`.
pub fn objectness_gate(det_probs: &Tensor, t_p: f64) -> Result<Vec<bool>> {
    let [b, c, h, w] = det_probs.dims4("objectness_gate")?;
    if c != 2 {
        return Err(Error::dim("objectness_gate", format!("{c} detection channels")));
    }
    let plane = h * w;
    let d = det_probs.data();
    Ok((0..b * plane)
        .map(|i| d[((i / plane) * 2 + 1) * plane + i % plane] > t_p)
        .collect())
}

/// Class-weighted NLL over the pixels in `gate`, divided by their count.
/// Returns the loss and the count; an empty gate gives a zero loss.
pub fn gated_class_loss(
    g: &mut Graph,
    probs: Var,
    cls_mask: &[u8],
    gate: &[bool],
    gamma: &[f64],
) -> Result<(Var, usize)> {
    let labels: Vec<usize> = cls_mask.iter().map(|&v| v as usize).collect();
    let n_cls = gate.iter().filter(|&&x| x).count();
    let loss = g.weighted_nll(probs, &labels, gate, gamma, n_cls as f64)?;
    Ok((loss, n_cls))
}

/// Gated classification loss on the combined map `p_cls`. The gate is
/// computed from `det_probs` values and acts as a constant in backward.
pub fn classification_loss(
    g: &mut Graph,
    p_cls: Var,
    det_probs: Var,
    cls_mask: &[u8],
    t_p: f64,
    gamma: &[f64],
) -> Result<(Var, usize)> {
    let gate = objectness_gate(g.value(det_probs), t_p)?;
    gated_class_loss(g, p_cls, cls_mask, &gate, gamma)
}

/// `beta * sum ||W||^2` over the decayed parameters in `bindings`.
pub fn decay_term(g: &mut Graph, bindings: &[(String, Var)], beta: f64) -> Option<Var> {
    let vars: Vec<Var> = bindings.iter().filter(|(n, _)| is_decayed(n)).map(|&(_, v)| v).collect();
    if vars.is_empty() || beta == 0.0 {
        return None;
    }
    let s = g.sum_squares(&vars);
    Some(g.scale(s, beta))
}

/// Sums the available terms into `det + lambda * cls + decay` and reports
/// each component.
pub fn joint_loss(
    g: &mut Graph,
    det: Option<Var>,
    cls: Option<(Var, usize)>,
    decay: Option<Var>,
    lambda: f64,
    n: usize,
) -> Result<(LossTerms, LossReport)> {
    let cls_var = cls.map(|c| c.0);
    let mut parts = Vec::new();
    parts.extend(det);
    if let Some(c) = cls_var {
        if lambda != 0.0 {
            parts.push(g.scale(c, lambda));
        }
    }
    parts.extend(decay);
    let total = match parts.split_first() {
        None => g.input(Tensor::scalar(0.0)),
        Some((&first, rest)) => {
            let mut acc = first;
            for &p in rest {
                acc = g.add(acc, p)?;
            }
            acc
        }
    };
    let item = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let report = LossReport {
        loss_det: item(g, det),
        loss_cls: item(g, cls_var),
        loss_decay: item(g, decay),
        loss_total: g.value(total).item(),
        n,
        n_cls: cls.map_or(0, |c| c.1),
    };
    Ok((
        LossTerms {
            det,
            cls: cls_var,
            decay,
            total,
        },
        report,
    ))
}

fn clamp_weight(v: f64) -> f64 {
    v.clamp(WEIGHT_CLAMP.0, WEIGHT_CLAMP.1)
}

/// Ratio of negative to positive pixels, clamped.
pub fn auto_alpha(det_masks: &[u8]) -> f64 {
    let pos = det_masks.iter().filter(|&&v| v != 0).count();
    let neg = det_masks.len() - pos;
    clamp_weight(neg as f64 / pos.max(1) as f64)
}

/// Inverse-frequency class weights normalized so uniform counts give ones.
pub fn auto_gamma(cls_masks: &[u8], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    for &v in cls_masks {
        if let Some(c) = counts.get_mut(v as usize) {
            *c += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| clamp_weight(total as f64 / (num_classes * c.max(1)) as f64))
        .collect()
}
