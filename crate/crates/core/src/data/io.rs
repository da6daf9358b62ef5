//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json             Manifest (below)
//! <dir>/images/img_<seed>_<i>.png 8-bit RGB
//! <dir>/train.txt, val.txt, test.txt   one image id per line
//! ```
//!
//! `manifest.json` fields:
//!
//! - `version`: format version, currently 1
//! - `seed`: master seed the images were generated from
//! - `height`, `width`: image size in pixels
//! - `categories`: category names; label `k` is `categories[k - 1]`
//! - `images`: list of `{ "id", "file", "nuclei": [{ "row", "col", "category" }] }`,
//!   `file` relative to the dataset directory

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Nucleus};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: String,
    pub file: String,
    pub nuclei: Vec<Nucleus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub categories: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}` (expected train, val or test)")))
    }
}

/// Shuffles `ids` with the `split` stream of `seed` and cuts it by integer
/// `ratio` weights; remainders go to the last split. Each part keeps the
/// original order.
pub fn split_ids(ids: &[String], ratio: [usize; 3], seed: u64) -> Result<BTreeMap<Split, Vec<String>>> {
    let total: usize = ratio.iter().sum();
    if total == 0 {
        return Err(Error::Config("split ratio must not be all zero".into()));
    }
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "split", 0));
    let n_train = n * ratio[0] / total;
    let n_val = n * ratio[1] / total;
    let mut parts = [
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ];
    let mut out = BTreeMap::new();
    for (split, idx) in Split::ALL.into_iter().zip(&mut parts) {
        idx.sort_unstable();
        out.insert(split, idx.iter().map(|&i| ids[i].clone()).collect());
    }
    Ok(out)
}

/// Images, their annotations, and the train/val/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub categories: Vec<String>,
    pub images: Vec<AnnotatedImage>,
    pub splits: BTreeMap<Split, Vec<String>>,
}

fn to_png_bytes(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            buf.push((t.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    buf
}

/// Reads an 8-bit image as `[3,H,W]` in `[0,1]`.
pub(crate) fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = f64::from(px[ch]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub(crate) fn write_png(path: &Path, t: &Tensor) -> Result<()> {
    let (h, w) = (t.shape()[1] as u32, t.shape()[2] as u32);
    image::save_buffer(path, &to_png_bytes(t), w, h, image::ExtendedColorType::Rgb8).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

impl Dataset {
    /// Partitions freshly generated images by `ratio`.
    pub fn new(images: Vec<AnnotatedImage>, categories: Vec<String>, seed: u64, ratio: [usize; 3]) -> Result<Self> {
        let ids: Vec<String> = images.iter().map(|im| im.id.clone()).collect();
        let splits = split_ids(&ids, ratio, seed)?;
        Ok(Self {
            seed,
            categories,
            images,
            splits,
        })
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|im| (im.height(), im.width()))
    }

    pub fn split(&self, split: Split) -> Vec<&AnnotatedImage> {
        let by_id: BTreeMap<&str, &AnnotatedImage> = self.images.iter().map(|im| (im.id.as_str(), im)).collect();
        self.splits
            .get(&split)
            .map(|ids| ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect())
            .unwrap_or_default()
    }

    pub fn manifest(&self) -> Manifest {
        let (height, width) = self.image_size().unwrap_or((0, 0));
        Manifest {
            version: MANIFEST_VERSION,
            seed: self.seed,
            height,
            width,
            categories: self.categories.clone(),
            images: self
                .images
                .iter()
                .map(|im| ImageRecord {
                    id: im.id.clone(),
                    file: format!("images/{}.png", im.id),
                    nuclei: im.nuclei.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let manifest = self.manifest();
        for (im, rec) in self.images.iter().zip(&manifest.images) {
            write_png(&dir.join(&rec.file), &im.pixels)?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for (split, ids) in &self.splits {
            let path = dir.join(format!("{split}.txt"));
            let body: String = ids.iter().map(|id| format!("{id}\n")).collect();
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", manifest.version)));
        }
        let k = manifest.categories.len();
        let mut images = Vec::with_capacity(manifest.images.len());
        for rec in &manifest.images {
            let file: PathBuf = dir.join(&rec.file);
            let pixels = read_png(&file)?;
            if pixels.shape()[1..] != [manifest.height, manifest.width] {
                return Err(Error::Config(format!(
                    "{} is {:?}, manifest says {}x{}",
                    file.display(),
                    &pixels.shape()[1..],
                    manifest.height,
                    manifest.width
                )));
            }
            for n in &rec.nuclei {
                if n.row >= manifest.height || n.col >= manifest.width || n.category == 0 || n.category as usize > k {
                    return Err(Error::Config(format!("invalid annotation {n:?} in `{}`", rec.id)));
                }
            }
            images.push(AnnotatedImage {
                id: rec.id.clone(),
                pixels,
                nuclei: rec.nuclei.clone(),
            });
        }
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let path = dir.join(format!("{split}.txt"));
            let ids = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            splits.insert(split, ids.lines().filter(|l| !l.is_empty()).map(str::to_string).collect());
        }
        Ok(Self {
            seed: manifest.seed,
            categories: manifest.categories,
            images,
            splits,
        })
    }
}
