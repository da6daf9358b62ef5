use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Nucleus, CATEGORY_NAMES};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Placement attempts per nucleus before the whole layout is redrawn.
const ATTEMPTS: usize = 400;
/// Layout redraws before packing is declared infeasible.
const RESTARTS: usize = 50;

/// Appearance of one nucleus category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryStyle {
    pub name: String,
    /// Base RGB color in `[0,1]`.
    pub color: [f64; 3],
    /// Range of the geometric-mean radius in pixels.
    pub radius: [f64; 2],
    /// Range of the major/minor axis ratio.
    pub elongation: [f64; 2],
    /// Half-width of the uniform per-pixel intensity texture.
    pub texture: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub nuclei_min: usize,
    pub nuclei_max: usize,
    /// Minimum centroid-to-centroid distance in pixels.
    pub min_separation: f64,
    /// Minimum centroid distance from the image edge in pixels.
    pub border: usize,
    pub background: [f64; 3],
    /// Half-width of the uniform per-channel background noise.
    pub background_noise: f64,
    /// Category probabilities in label order; must sum to 1.
    pub mixture: Vec<f64>,
    pub categories: Vec<CategoryStyle>,
}

fn style(name: &str, color: [f64; 3], radius: [f64; 2], elongation: [f64; 2]) -> CategoryStyle {
    CategoryStyle {
        name: name.to_string(),
        color,
        radius,
        elongation,
        texture: 0.04,
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            nuclei_min: 3,
            nuclei_max: 6,
            min_separation: 9.0,
            border: 3,
            background: [0.90, 0.78, 0.85],
            background_noise: 0.04,
            mixture: vec![0.343, 0.255, 0.311, 0.091],
            categories: vec![
                style(CATEGORY_NAMES[0], [0.30, 0.12, 0.50], [2.6, 3.4], [1.2, 1.6]),
                style(CATEGORY_NAMES[1], [0.62, 0.28, 0.30], [2.0, 2.6], [1.8, 2.4]),
                style(CATEGORY_NAMES[2], [0.12, 0.30, 0.28], [1.8, 2.4], [1.0, 1.15]),
                style(CATEGORY_NAMES[3], [0.50, 0.50, 0.12], [2.4, 3.2], [1.0, 1.5]),
            ],
        }
    }
}

fn linf(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl SynthConfig {
    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Worst-case per-channel gap between a nucleus center and background,
    /// after texture and noise.
    pub fn background_margin(&self) -> f64 {
        self.categories
            .iter()
            .map(|c| linf(&c.color, &self.background) - c.texture - self.background_noise)
            .fold(f64::INFINITY, f64::min)
    }

    /// Worst-case per-channel gap between the centers of two categories.
    pub fn category_margin(&self) -> f64 {
        let mut m = f64::INFINITY;
        for (i, a) in self.categories.iter().enumerate() {
            for b in &self.categories[i + 1..] {
                m = m.min(linf(&a.color, &b.color) - a.texture - b.texture);
            }
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if self.nuclei_min > self.nuclei_max {
            return bad("nuclei_min exceeds nuclei_max");
        }
        if self.categories.is_empty() || self.categories.len() > u8::MAX as usize {
            return bad("need between 1 and 255 categories");
        }
        if self.mixture.len() != self.categories.len() {
            return bad("mixture length differs from category count");
        }
        if self.mixture.iter().any(|&w| w < 0.0) || (self.mixture.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mixture weights must be non-negative and sum to 1");
        }
        if self.min_separation < 4.0 {
            return bad("min_separation must be at least 4 pixels");
        }
        if 2 * self.border >= self.height.min(self.width) {
            return bad("border leaves no room for centroids");
        }
        for c in &self.categories {
            if !(c.radius[0] > 0.0 && c.radius[0] <= c.radius[1]) || !(c.elongation[0] >= 1.0 && c.elongation[0] <= c.elongation[1]) {
                return bad(&format!("invalid shape ranges for `{}`", c.name));
            }
        }
        if self.background_margin() <= 0.0 {
            return bad("a category is not separable from background");
        }
        if self.categories.len() > 1 && self.category_margin() <= 0.0 {
            return bad("two categories are not separable by color");
        }
        Ok(())
    }
}

fn place(config: &SynthConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, usize)>> {
    let (lo_r, hi_r) = (config.border, config.height - 1 - config.border);
    let (lo_c, hi_c) = (config.border, config.width - 1 - config.border);
    let sep2 = config.min_separation * config.min_separation;
    'restart: for _ in 0..RESTARTS {
        let mut pts: Vec<(usize, usize)> = Vec::with_capacity(count);
        for _ in 0..count {
            let found = (0..ATTEMPTS).find_map(|_| {
                let p = (rng.gen_range(lo_r..=hi_r), rng.gen_range(lo_c..=hi_c));
                let ok = pts.iter().all(|q| {
                    let (dr, dc) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
                    dr * dr + dc * dc >= sep2
                });
                ok.then_some(p)
            });
            match found {
                Some(p) => pts.push(p),
                None => continue 'restart,
            }
        }
        return Ok(pts);
    }
    Err(Error::InfeasiblePacking {
        requested: count,
        separation: config.min_separation,
        height: config.height,
        width: config.width,
    })
}

/// Renders one image from its own seeded stream.
pub fn generate_one(config: &SynthConfig, rng: &mut ChaCha8Rng, id: String) -> Result<AnnotatedImage> {
    let (h, w) = (config.height, config.width);
    let count = rng.gen_range(config.nuclei_min..=config.nuclei_max);
    let centers = place(config, count, rng)?;
    let picker = WeightedIndex::new(&config.mixture).map_err(|e| Error::Config(format!("synth mixture: {e}")))?;

    let plane = h * w;
    let mut px = vec![0.0; 3 * plane];
    for ch in 0..3 {
        for v in &mut px[ch * plane..(ch + 1) * plane] {
            *v = config.background[ch] + rng.gen_range(-1.0..=1.0) * config.background_noise;
        }
    }

    let mut nuclei = Vec::with_capacity(count);
    for (row, col) in centers {
        let k = picker.sample(rng);
        let st = &config.categories[k];
        let r = rng.gen_range(st.radius[0]..=st.radius[1]);
        let e = rng.gen_range(st.elongation[0]..=st.elongation[1]);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let (a, b) = (r * e.sqrt(), r / e.sqrt());
        let (sin, cos) = theta.sin_cos();
        let reach = a.ceil() as isize + 1;
        for dr in -reach..=reach {
            for dc in -reach..=reach {
                let (y, x) = (row as isize + dr, col as isize + dc);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let (fy, fx) = (dr as f64, dc as f64);
                let u = (fx * cos + fy * sin) / a;
                let v = (-fx * sin + fy * cos) / b;
                let d = (u * u + v * v).sqrt();
                // Linear edge ramp about one pixel wide.
                let alpha = ((1.0 - d) * b + 0.5).clamp(0.0, 1.0);
                let tex = rng.gen_range(-1.0..=1.0) * st.texture;
                if alpha == 0.0 {
                    continue;
                }
                let i = y as usize * w + x as usize;
                for ch in 0..3 {
                    let p = &mut px[ch * plane + i];
                    *p = *p * (1.0 - alpha) + (st.color[ch] + tex) * alpha;
                }
            }
        }
        nuclei.push(Nucleus {
            row,
            col,
            category: (k + 1) as u8,
        });
    }
    // Quantize to 8 bits so in-memory and PNG round-tripped images agree.
    for v in &mut px {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok(AnnotatedImage {
        id,
        pixels: Tensor::new(&[3, h, w], px)?,
        nuclei,
    })
}

/// Generates `n` images; image `i` uses its own stream derived from `seed`
/// and is named `img_<seed>_<i>`.
pub fn generate(config: &SynthConfig, seed: u64, n: usize) -> Result<Vec<AnnotatedImage>> {
    config.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, "synth", i as u64);
            generate_one(config, &mut rng, format!("img_{seed}_{i}"))
        })
        .collect()
}
