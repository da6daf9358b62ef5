//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic            8 bytes  "SFCNCKPT"
//! version          u32      1
//! image_height     u32
//! image_width      u32
//! input_channels   u32
//! base_channels    u32
//! blocks_per_module u32
//! num_categories   u32
//! scale_preset     u8       0 = full, 1 = desk
//! heads            u8       0 = sibling, 1 = single head
//! record_count     u32
//! record_count x {
//!     name_len     u32
//!     name         name_len bytes, UTF-8
//!     rank         u32
//!     dims         rank x u64
//!     payload      prod(dims) x f64
//! }
//! ```
//!
//! Parameters come first in name order, followed by batch-norm running
//! statistics as `<layer>.running_mean` / `<layer>.running_var`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{HeadLayout, Model, ModelConfig, Parameters, ScalePreset};
use crate::autodiff::RunningStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SFCNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    put_u32(buf, shape.len());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model to bytes.
pub fn encode(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    for v in [
        cfg.image_height,
        cfg.image_width,
        cfg.input_channels,
        cfg.base_channels,
        cfg.blocks_per_module,
        cfg.num_categories,
    ] {
        put_u32(&mut buf, v);
    }
    buf.push(match cfg.scale_preset {
        ScalePreset::Full => 0,
        ScalePreset::Desk => 1,
    });
    buf.push(match cfg.heads {
        HeadLayout::Sibling => 0,
        HeadLayout::SingleHead => 1,
    });
    put_u32(&mut buf, model.params.len() + 2 * model.stats.len());
    for (name, t) in model.params.iter() {
        put_record(&mut buf, name, t.shape(), t.data());
    }
    for (name, rs) in &model.stats {
        put_record(&mut buf, &format!("{name}{MEAN_SUFFIX}"), &[rs.mean.len()], &rs.mean);
        put_record(&mut buf, &format!("{name}{VAR_SUFFIX}"), &[rs.var.len()], &rs.var);
    }
    buf
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.0
            .read_exact(&mut b)
            .map_err(|_| Error::Checkpoint("truncated file".into()))?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.bytes(8)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Checkpoint("dimension overflow".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Parses checkpoint bytes without validating against an expected layout.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()?;
    }
    let scale_preset = match r.u8()? {
        0 => ScalePreset::Full,
        1 => ScalePreset::Desk,
        v => return Err(Error::Checkpoint(format!("unknown scale preset {v}"))),
    };
    let heads = match r.u8()? {
        0 => HeadLayout::Sibling,
        1 => HeadLayout::SingleHead,
        v => return Err(Error::Checkpoint(format!("unknown head layout {v}"))),
    };
    let config = ModelConfig {
        image_height: dims[0],
        image_width: dims[1],
        input_channels: dims[2],
        base_channels: dims[3],
        blocks_per_module: dims[4],
        num_categories: dims[5],
        scale_preset,
        heads,
    };

    let count = r.u32()?;
    let mut params = Parameters::new();
    let mut means = BTreeMap::new();
    let mut vars = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("payload overflow".into()))?;
        let data = r.f64s(n)?;
        if let Some(layer) = name.strip_suffix(MEAN_SUFFIX) {
            means.insert(layer.to_string(), data);
        } else if let Some(layer) = name.strip_suffix(VAR_SUFFIX) {
            vars.insert(layer.to_string(), data);
        } else {
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
    }
    if r.0.position() as usize != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let mut stats = BTreeMap::new();
    for (layer, mean) in means {
        let var = vars
            .remove(&layer)
            .ok_or_else(|| Error::Checkpoint(format!("running mean without variance for `{layer}`")))?;
        stats.insert(layer, RunningStats { mean, var });
    }
    Ok(Model { config, params, stats })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and checks it against the layout its own header describes.
pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = decode(&bytes)?;
    check_layout(&model, &model.config)?;
    Ok(model)
}

/// Reads a checkpoint that must match `expected` (the run configuration).
/// A mismatch reports the first differing parameter with both shapes.
pub fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = decode(&bytes)?;
    check_layout(&model, expected)?;
    Ok(Model {
        config: expected.clone(),
        ..model
    })
}

fn check_layout(model: &Model, expected: &ModelConfig) -> Result<()> {
    let reference = Model::build(expected, 0)?;
    for (name, t) in reference.params.iter() {
        match model.params.get(name) {
            Some(found) if found.shape() == t.shape() => {}
            Some(found) => {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: found.shape().to_vec(),
                })
            }
            None => {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: vec![],
                })
            }
        }
    }
    if let Some(extra) = model.params.names().find(|n| reference.params.get(n).is_none()) {
        return Err(Error::ShapeMismatch {
            name: extra.to_string(),
            expected: vec![],
            found: model.params.get(extra).map(|t| t.shape().to_vec()).unwrap_or_default(),
        });
    }
    for (layer, rs) in &reference.stats {
        match model.stats.get(layer) {
            Some(s) if s.mean.len() == rs.mean.len() && s.var.len() == rs.var.len() => {}
            _ => return Err(Error::Checkpoint(format!("missing or malformed running statistics for `{layer}`"))),
        }
    }
    Ok(())
}
