use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MaskPair;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability that each of the five transforms is selected.
    pub probability: f64,
    pub zoom: [f64; 2],
    /// Rotation jitter around the right-angle draw, in degrees.
    pub rotation_jitter_deg: f64,
    pub shear: f64,
    pub channel_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            zoom: [0.9, 1.1],
            rotation_jitter_deg: 10.0,
            shear: 0.1,
            channel_shift: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Zoom(f64),
    /// `quarters` right-angle turns (-1, 0, or 1) plus `jitter_deg`.
    Rotate { quarters: i8, jitter_deg: f64 },
    Shear(f64),
    Flip { horizontal: bool, vertical: bool },
    ChannelShift([f64; 3]),
}

/// Draws a random subset of the transforms with random parameters.
pub fn draw_transforms<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Vec<Transform> {
    let mut t = Vec::new();
    if rng.gen_bool(cfg.probability) {
        t.push(Transform::Zoom(rng.gen_range(cfg.zoom[0]..=cfg.zoom[1])));
    }
    if rng.gen_bool(cfg.probability) {
        t.push(Transform::Rotate {
            quarters: rng.gen_range(-1..=1),
            jitter_deg: rng.gen_range(-cfg.rotation_jitter_deg..=cfg.rotation_jitter_deg),
        });
    }
    if rng.gen_bool(cfg.probability) {
        t.push(Transform::Shear(rng.gen_range(-cfg.shear..=cfg.shear)));
    }
    if rng.gen_bool(cfg.probability) {
        let (horizontal, vertical) = [(true, false), (false, true), (true, true)][rng.gen_range(0..3)];
        t.push(Transform::Flip { horizontal, vertical });
    }
    if rng.gen_bool(cfg.probability) {
        let s = cfg.channel_shift;
        t.push(Transform::ChannelShift([
            rng.gen_range(-s..=s),
            rng.gen_range(-s..=s),
            rng.gen_range(-s..=s),
        ]));
    }
    t
}

/// Output-to-source matrix acting on `(dy, dx)` offsets from the image center.
fn inverse_affine(ts: &[Transform]) -> Option<[[f64; 2]; 2]> {
    let mut m = [[1.0, 0.0], [0.0, 1.0]];
    let mut any = false;
    let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
        [
            [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
            [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
        ]
    };
    for t in ts {
        let inv = match *t {
            Transform::Zoom(s) => [[1.0 / s, 0.0], [0.0, 1.0 / s]],
            Transform::Rotate { quarters, jitter_deg } => {
                let a = -(f64::from(quarters) * 90.0 + jitter_deg).to_radians();
                let (s, c) = a.sin_cos();
                [[c, -s], [s, c]]
            }
            Transform::Shear(k) => [[1.0, 0.0], [-k, 1.0]],
            _ => continue,
        };
        any = true;
        // Transforms apply in order, so their inverses compose in reverse.
        m = mul(m, inv);
    }
    any.then_some(m)
}

fn warp(image: &Tensor, masks: &MaskPair, m: [[f64; 2]; 2]) -> (Tensor, MaskPair) {
    let (c, h, w) = (image.shape()[0], masks.height, masks.width);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let plane = h * w;
    let src = image.data();
    let mut px = vec![0.0; c * plane];
    let mut out = MaskPair::empty(h, w);
    for r in 0..h {
        for col in 0..w {
            let (dy, dx) = (r as f64 - cy, col as f64 - cx);
            let sy = m[0][0] * dy + m[0][1] * dx + cy;
            let sx = m[1][0] * dy + m[1][1] * dx + cx;
            let i = r * w + col;

            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                let j = ny as usize * w + nx as usize;
                out.det[i] = masks.det[j];
                out.cls[i] = masks.cls[j];
            }

            let yc = sy.clamp(0.0, h as f64 - 1.0);
            let xc = sx.clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (yc - y0 as f64, xc - x0 as f64);
            for ch in 0..c {
                let p = &src[ch * plane..(ch + 1) * plane];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                px[ch * plane + i] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    (Tensor::new(image.shape(), px).expect("same shape"), out)
}

fn flip(image: &mut Tensor, masks: &mut MaskPair, horizontal: bool, vertical: bool) {
    let (h, w) = (masks.height, masks.width);
    let src_index = |r: usize, c: usize| {
        let sr = if vertical { h - 1 - r } else { r };
        let sc = if horizontal { w - 1 - c } else { c };
        sr * w + sc
    };
    let plane = h * w;
    let old = image.data().to_vec();
    let (od, oc) = (masks.det.clone(), masks.cls.clone());
    let data = image.data_mut();
    for r in 0..h {
        for c in 0..w {
            let (i, j) = (r * w + c, src_index(r, c));
            masks.det[i] = od[j];
            masks.cls[i] = oc[j];
            for ch in 0..old.len() / plane {
                data[ch * plane + i] = old[ch * plane + j];
            }
        }
    }
}

/// Applies `transforms` to an image `[C,H,W]` and its masks. Geometric
/// transforms share one resampling pass (bilinear with clamp-to-edge for
/// the image, nearest with zero fill for masks); flips are exact
/// permutations; channel shifts touch only the image and are clipped to
/// `[0,1]`.
pub fn apply_transforms(transforms: &[Transform], image: &Tensor, masks: &MaskPair) -> (Tensor, MaskPair) {
    let (mut img, mut m) = match inverse_affine(transforms) {
        Some(mat) => warp(image, masks, mat),
        None => (image.clone(), masks.clone()),
    };
    for t in transforms {
        match *t {
            Transform::Flip { horizontal, vertical } => flip(&mut img, &mut m, horizontal, vertical),
            Transform::ChannelShift(shift) => {
                let plane = m.height * m.width;
                for (ch, s) in shift.iter().enumerate().take(img.shape()[0]) {
                    for v in &mut img.data_mut()[ch * plane..(ch + 1) * plane] {
                        *v = (*v + s).clamp(0.0, 1.0);
                    }
                }
            }
            _ => {}
        }
    }
    (img, m)
}

pub fn augment<R: Rng + ?Sized>(cfg: &AugmentConfig, image: &Tensor, masks: &MaskPair, rng: &mut R) -> (Tensor, MaskPair) {
    apply_transforms(&draw_transforms(cfg, rng), image, masks)
}
