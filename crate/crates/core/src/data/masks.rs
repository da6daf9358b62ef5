use super::Nucleus;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel ground truth in row-major order: `det` is 0/1 and `cls` holds
/// the category (0 = background) wherever `det` is 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    pub height: usize,
    pub width: usize,
    pub det: Vec<u8>,
    pub cls: Vec<u8>,
}

impl MaskPair {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            det: vec![0; height * width],
            cls: vec![0; height * width],
        }
    }

    /// `cls > 0` exactly where `det == 1`.
    pub fn is_consistent(&self) -> bool {
        self.det.iter().zip(&self.cls).all(|(&d, &c)| (d == 1) == (c > 0) && d <= 1)
    }

    pub fn positives(&self) -> usize {
        self.det.iter().filter(|&&d| d == 1).count()
    }
}

/// Disks of `radius` around each centroid. A pixel covered by several disks
/// takes the nearest centroid; distance ties go to the lower category, then
/// the earlier annotation.
pub fn make_masks(nuclei: &[Nucleus], height: usize, width: usize, radius: usize) -> MaskPair {
    let mut m = MaskPair::empty(height, width);
    let mut best = vec![(usize::MAX, u8::MAX); height * width];
    let r = radius as isize;
    let r2 = radius * radius;
    for n in nuclei {
        for dr in -r..=r {
            for dc in -r..=r {
                let d2 = (dr * dr + dc * dc) as usize;
                let (y, x) = (n.row as isize + dr, n.col as isize + dc);
                if d2 > r2 || y < 0 || x < 0 || y >= height as isize || x >= width as isize {
                    continue;
                }
                let i = y as usize * width + x as usize;
                if (d2, n.category) < best[i] {
                    best[i] = (d2, n.category);
                    m.det[i] = 1;
                    m.cls[i] = n.category;
                }
            }
        }
    }
    m
}

/// An aligned image/mask crop and its top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub image: Tensor,
    pub masks: MaskPair,
}

fn origins(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=extent - size).step_by(stride).collect();
    if *v.last().expect("nonempty") != extent - size {
        v.push(extent - size);
    }
    v
}

/// Tiles `image` `[C,H,W]` with `size x size` windows every `stride` pixels;
/// a final window is anchored at the far edge when the stride does not land
/// there, so every pixel is covered.
pub fn crop_patches(image: &Tensor, masks: &MaskPair, size: usize, stride: usize) -> Result<Vec<Patch>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::dim("crop_patches", format!("image {s:?}"))),
    };
    if masks.height != h || masks.width != w {
        return Err(Error::dim("crop_patches", format!("masks {}x{} for image {h}x{w}", masks.height, masks.width)));
    }
    if size == 0 || stride == 0 || size > h || size > w {
        return Err(Error::Config(format!("patch size {size} / stride {stride} for a {h}x{w} image")));
    }
    let mut out = Vec::new();
    for &r0 in &origins(h, size, stride) {
        for &c0 in &origins(w, size, stride) {
            let mut px = Vec::with_capacity(c * size * size);
            for ch in 0..c {
                for r in r0..r0 + size {
                    let start = (ch * h + r) * w + c0;
                    px.extend_from_slice(&image.data()[start..start + size]);
                }
            }
            let mut m = MaskPair::empty(size, size);
            for r in 0..size {
                let src = (r0 + r) * w + c0;
                m.det[r * size..(r + 1) * size].copy_from_slice(&masks.det[src..src + size]);
                m.cls[r * size..(r + 1) * size].copy_from_slice(&masks.cls[src..src + size]);
            }
            out.push(Patch {
                row: r0,
                col: c0,
                image: Tensor::new(&[c, size, size], px)?,
                masks: m,
            });
        }
    }
    Ok(out)
}
