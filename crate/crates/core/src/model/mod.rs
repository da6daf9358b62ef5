//! The sibling fully convolutional network.
//!
//! A shared trunk (stem convolution plus three residual modules at full, half
//! and quarter resolution) feeds two heads:
//!
//! * the **detection** head projects module-3 features to two channels,
//!   upsamples them ×2, adds a two-channel projection of the module-2
//!   features, upsamples ×2 again and applies a softmax, giving
//!   `(p_bkg, p_obj)` per pixel;
//! * the **classification** head runs a fourth residual module on the
//!   module-3 features, projects to `K + 1` channels, upsamples ×4 and applies
//!   a softmax, giving the conditional probabilities `p(k | obj)`.
//!
//! [`HeadLayout::SingleHead`] drops the detection head entirely and reads the
//! classification softmax as an unconditional `K + 1`-way classifier, which is
//! the five-class FCN baseline.

mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, BatchStats, Graph, RunningStats, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::init::xavier_uniform;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePreset {
    Full,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadLayout {
    /// Detection and classification heads on a shared trunk.
    #[default]
    Sibling,
    /// Only the `K + 1`-way classification head.
    SingleHead,
}

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub base_channels: usize,
    pub blocks_per_module: usize,
    pub num_categories: usize,
    pub scale_preset: ScalePreset,
    #[serde(default)]
    pub heads: HeadLayout,
}

fn default_input_channels() -> usize {
    3
}

impl ModelConfig {
    /// 64x64 crops, 32 base channels, nine blocks per module, four categories.
    pub fn full() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            input_channels: 3,
            base_channels: 32,
            blocks_per_module: 9,
            num_categories: 4,
            scale_preset: ScalePreset::Full,
            heads: HeadLayout::Sibling,
        }
    }

    /// CPU-sized variant: 32x32 crops, 8 base channels, two blocks per module.
    pub fn desk() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            base_channels: 8,
            blocks_per_module: 2,
            scale_preset: ScalePreset::Desk,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.image_height == 0 || self.image_width == 0 || !self.image_height.is_multiple_of(4) || !self.image_width.is_multiple_of(4) {
            return bad(format!(
                "image size {}x{} must be positive and divisible by 4",
                self.image_height, self.image_width
            ));
        }
        if self.num_categories == 0 {
            return bad("num_categories must be at least 1".into());
        }
        if self.blocks_per_module == 0 {
            return bad("blocks_per_module must be at least 1".into());
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Number of classification channels, background included.
    pub fn class_channels(&self) -> usize {
        self.num_categories + 1
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Stem and modules 1-3.
    Trunk,
    /// Detection head, including the module-2 fusion projection.
    Detection,
    /// Module 4 and the classification head.
    Classification,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Trunk, ParamGroup::Detection, ParamGroup::Classification];

    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("det.") {
            ParamGroup::Detection
        } else if name.starts_with("m4.") || name.starts_with("cls.") {
            ParamGroup::Classification
        } else {
            ParamGroup::Trunk
        }
    }
}

/// Named learnable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Convolution and deconvolution kernels are weight-decayed; biases and
/// batch-norm affine parameters are not.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Probability maps at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    /// `[B, 2, H, W]`: channel 0 is `p_bkg`, channel 1 is `p_obj`.
    pub det_probs: Tensor,
    /// `[B, K+1, H, W]`: channel 0 is background, `1..=K` the categories.
    pub cls_cond_probs: Tensor,
}

/// Batch-norm statistics source for a stand-alone forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// What a graph-building forward pass should compute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardPlan {
    /// Groups whose parameters receive gradients and whose batch norms use
    /// batch statistics. Everything else is a constant in eval mode.
    pub trainable: BTreeSet<ParamGroup>,
    pub detection: bool,
    pub classification: bool,
}

impl ForwardPlan {
    pub fn eval() -> Self {
        Self {
            trainable: BTreeSet::new(),
            detection: true,
            classification: true,
        }
    }
}

/// Handles produced by [`Model::forward_graph`].
#[derive(Debug)]
pub struct ForwardVars {
    /// Detection softmax `[B,2,H,W]` (absent for single-head models or when not requested).
    pub det_probs: Option<Var>,
    /// Classification softmax `[B,K+1,H,W]`.
    pub cls_probs: Option<Var>,
    /// Trainable parameters bound into the graph.
    pub bindings: Vec<(String, Var)>,
    /// Batch statistics of train-mode batch norms, keyed by layer prefix.
    pub bn_updates: Vec<(String, BatchStats)>,
}

/// Parameters plus batch-norm running statistics for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
    /// Running statistics keyed by batch-norm prefix (e.g. `m1.b0.bn1`).
    pub stats: BTreeMap<String, RunningStats>,
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Parameters,
    stats: BTreeMap<String, RunningStats>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool) -> Result<()> {
        self.params
            .insert(format!("{name}.weight"), xavier_uniform(&[c_out, c_in, k, k], self.rng))?;
        if bias {
            self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        }
        Ok(())
    }

    fn deconv(&mut self, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<()> {
        let k = 2 * stride;
        self.params
            .insert(format!("{name}.weight"), xavier_uniform(&[c_in, c_out, k, k], self.rng))?;
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<()> {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0))?;
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]))?;
        self.stats.insert(name.to_string(), RunningStats::new(c));
        Ok(())
    }

    fn block(&mut self, prefix: &str, c_in: usize, c_out: usize, downsample: bool) -> Result<()> {
        // Convolutions feeding a batch norm carry no bias: it would be cancelled
        // by the mean subtraction and receive an identically zero gradient.
        self.conv(&format!("{prefix}.conv1"), c_out, c_in, 3, false)?;
        self.bn(&format!("{prefix}.bn1"), c_out)?;
        self.conv(&format!("{prefix}.conv2"), c_out, c_out, 3, false)?;
        self.bn(&format!("{prefix}.bn2"), c_out)?;
        if downsample {
            self.conv(&format!("{prefix}.proj"), c_out, c_in, 1, true)?;
        }
        Ok(())
    }
}

/// Channel widths of modules 1..=4.
fn module_channels(base: usize) -> [usize; 4] {
    [base, 2 * base, 4 * base, 4 * base]
}

impl Model {
    /// Builds a freshly initialized model: Xavier-uniform kernels, zero biases,
    /// unit batch-norm scales and zero shifts.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            rng: &mut rng,
            params: Parameters::new(),
            stats: BTreeMap::new(),
        };
        let c = module_channels(config.base_channels);
        let n = config.blocks_per_module;

        b.conv("stem.conv", c[0], config.input_channels, 3, false)?;
        b.bn("stem.bn", c[0])?;
        for (m, &width) in c.iter().enumerate().take(3) {
            for j in 0..n {
                let downsample = m > 0 && j == 0;
                let c_in = if downsample { c[m - 1] } else { width };
                b.block(&format!("m{}.b{j}", m + 1), c_in, width, downsample)?;
            }
        }
        if config.heads == HeadLayout::Sibling {
            b.conv("det.head", 2, c[2], 1, true)?;
            b.deconv("det.up1", 2, 2, 2)?;
            b.conv("det.fuse", 2, c[1], 1, true)?;
            b.deconv("det.up2", 2, 2, 2)?;
        }
        for j in 0..n {
            b.block(&format!("m4.b{j}"), c[3], c[3], false)?;
        }
        let kc = config.class_channels();
        b.conv("cls.head", kc, c[3], 1, true)?;
        b.deconv("cls.up", kc, kc, 4)?;

        Ok(Self {
            config: config.clone(),
            params: b.params,
            stats: b.stats,
        })
    }

    /// Number of convolution and deconvolution layers (skip projections and
    /// the fusion projection included).
    pub fn conv_layer_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, t)| name.ends_with(".weight") && t.rank() == 4)
            .count()
    }

    fn check_image(&self, images: &Tensor) -> Result<()> {
        let [_, c, h, w] = images.dims4("forward")?;
        let cfg = &self.config;
        if (c, h, w) != (cfg.input_channels, cfg.image_height, cfg.image_width) {
            return Err(Error::dim(
                "forward",
                format!(
                    "image {c}x{h}x{w}, model expects {}x{}x{}",
                    cfg.input_channels, cfg.image_height, cfg.image_width
                ),
            ));
        }
        Ok(())
    }

    /// Records the network on `g`. `images` must be `[B,C,H,W]` at the
    /// configured size.
    pub fn forward_graph(&self, g: &mut Graph, images: Var, plan: &ForwardPlan) -> Result<ForwardVars> {
        self.check_image(g.value(images))?;
        let mut ctx = ForwardCtx {
            model: self,
            plan,
            bindings: BTreeMap::new(),
            bn_updates: Vec::new(),
        };
        let n = self.config.blocks_per_module;

        let mut x = ctx.conv(g, "stem.conv", images, 1, 1)?;
        x = ctx.bn(g, "stem.bn", x)?;
        x = g.relu(x);
        let mut module_out = Vec::with_capacity(3);
        for m in 1..=3 {
            for j in 0..n {
                x = ctx.residual_block(g, x, &format!("m{m}.b{j}"), m > 1 && j == 0)?;
            }
            module_out.push(x);
        }
        let (m2, m3) = (module_out[1], module_out[2]);

        let det_probs = if plan.detection && self.config.heads == HeadLayout::Sibling {
            let head = ctx.conv(g, "det.head", m3, 1, 0)?;
            let fused = ctx.fuse_detection(g, head, m2)?;
            let logits = ctx.deconv(g, "det.up2", fused, 2)?;
            Some(g.softmax_channels(logits)?)
        } else {
            None
        };

        let cls_probs = if plan.classification || self.config.heads == HeadLayout::SingleHead {
            let mut y = m3;
            for j in 0..n {
                y = ctx.residual_block(g, y, &format!("m4.b{j}"), false)?;
            }
            let head = ctx.conv(g, "cls.head", y, 1, 0)?;
            let logits = ctx.deconv(g, "cls.up", head, 4)?;
            Some(g.softmax_channels(logits)?)
        } else {
            None
        };

        Ok(ForwardVars {
            det_probs,
            cls_probs,
            bindings: ctx.bindings.into_iter().collect(),
            bn_updates: ctx.bn_updates,
        })
    }

    /// Evaluates both output maps. Accepts `[C,H,W]` or `[B,C,H,W]`.
    ///
    /// For a single-head model the detection map is `(p_0, sum_{k>=1} p_k)`
    /// and the class map is the unconditional softmax.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<ForwardOutputs> {
        let images = images.clone().into_batch()?;
        let mut g = Graph::new();
        let x = g.input(images);
        let trainable = match mode {
            Mode::Eval => BTreeSet::new(),
            Mode::Train => ParamGroup::ALL.into_iter().collect(),
        };
        let plan = ForwardPlan {
            trainable,
            detection: true,
            classification: true,
        };
        let vars = self.forward_graph(&mut g, x, &plan)?;
        let cls = g.value(vars.cls_probs.expect("classification requested")).clone();
        let det = match vars.det_probs {
            Some(d) => g.value(d).clone(),
            None => nuclei_sum_map(&cls)?,
        };
        Ok(ForwardOutputs {
            det_probs: det,
            cls_cond_probs: cls,
        })
    }

    /// Eval-mode forward.
    pub fn predict(&self, images: &Tensor) -> Result<ForwardOutputs> {
        self.forward(images, Mode::Eval)
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) {
        for (name, batch) in updates {
            if let Some(rs) = self.stats.get_mut(name) {
                rs.update(batch);
            }
        }
    }
}

/// `[B,K+1,H,W]` class probabilities to a `[B,2,H,W]` detection map
/// `(p_0, 1 - p_0)` where the second channel is the summed nuclei mass.
pub fn nuclei_sum_map(cls: &Tensor) -> Result<Tensor> {
    let [batch, c, h, w] = cls.dims4("nuclei_sum_map")?;
    let plane = h * w;
    let d = cls.data();
    let mut out = vec![0.0; batch * 2 * plane];
    for b in 0..batch {
        for p in 0..plane {
            out[b * 2 * plane + p] = d[b * c * plane + p];
            out[b * 2 * plane + plane + p] = (1..c).map(|k| d[(b * c + k) * plane + p]).sum();
        }
    }
    Tensor::new(&[batch, 2, h, w], out)
}

/// Per-pass state: binds parameters into the graph and collects batch stats.
pub struct ForwardCtx<'m> {
    model: &'m Model,
    plan: &'m ForwardPlan,
    bindings: BTreeMap<String, Var>,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'m> ForwardCtx<'m> {
    pub fn new(model: &'m Model, plan: &'m ForwardPlan) -> Self {
        Self {
            model,
            plan,
            bindings: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn into_parts(self) -> (Vec<(String, Var)>, Vec<(String, BatchStats)>) {
        (self.bindings.into_iter().collect(), self.bn_updates)
    }

    fn trainable(&self, name: &str) -> bool {
        self.plan.trainable.contains(&ParamGroup::of(name))
    }

    fn bind(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        if self.trainable(name) {
            let v = g.param(t);
            self.bindings.insert(name.to_string(), v);
            Ok(v)
        } else {
            Ok(g.input(t))
        }
    }

    fn bind_opt(&mut self, g: &mut Graph, name: &str) -> Result<Option<Var>> {
        if self.model.params.get(name).is_some() {
            self.bind(g, name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn conv(&mut self, g: &mut Graph, layer: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bind(g, &format!("{layer}.weight"))?;
        let b = self.bind_opt(g, &format!("{layer}.bias"))?;
        g.conv2d(x, w, b, stride, pad)
    }

    fn deconv(&mut self, g: &mut Graph, layer: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.bind(g, &format!("{layer}.weight"))?;
        let b = self.bind_opt(g, &format!("{layer}.bias"))?;
        g.conv_transpose2d(x, w, b, stride)
    }

    fn bn(&mut self, g: &mut Graph, layer: &str, x: Var) -> Result<Var> {
        let gamma = self.bind(g, &format!("{layer}.gamma"))?;
        let beta = self.bind(g, &format!("{layer}.beta"))?;
        let model = self.model;
        if self.trainable(layer) {
            let (y, stats) = g.batch_norm(x, gamma, beta, BatchNormMode::Train)?;
            if let Some(s) = stats {
                self.bn_updates.push((layer.to_string(), s));
            }
            Ok(y)
        } else {
            let rs = model
                .stats
                .get(layer)
                .ok_or_else(|| Error::Config(format!("missing running statistics for `{layer}`")))?;
            Ok(g.batch_norm(x, gamma, beta, BatchNormMode::Eval(rs))?.0)
        }
    }

    /// `relu(F(x) + skip(x))` with `F = conv3x3 -> BN -> ReLU -> conv3x3 -> BN`.
    /// When `downsample` is set the first convolution has stride 2 and the skip
    /// path is a strided 1x1 projection; otherwise the skip path is identity.
    pub fn residual_block(&mut self, g: &mut Graph, x: Var, prefix: &str, downsample: bool) -> Result<Var> {
        let stride = if downsample { 2 } else { 1 };
        let mut h = self.conv(g, &format!("{prefix}.conv1"), x, stride, 1)?;
        h = self.bn(g, &format!("{prefix}.bn1"), h)?;
        h = g.relu(h);
        h = self.conv(g, &format!("{prefix}.conv2"), h, 1, 1)?;
        h = self.bn(g, &format!("{prefix}.bn2"), h)?;
        let skip = if downsample {
            self.conv(g, &format!("{prefix}.proj"), x, 2, 0)?
        } else {
            x
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }

    /// Upsamples the two-channel module-3 head ×2 and adds a two-channel 1x1
    /// projection of the module-2 features. Output is `[B,2,H/2,W/2]`.
    pub fn fuse_detection(&mut self, g: &mut Graph, head_m3: Var, features_m2: Var) -> Result<Var> {
        let up = self.deconv(g, "det.up1", head_m3, 2)?;
        let proj = self.conv(g, "det.fuse", features_m2, 1, 0)?;
        g.add(up, proj)
    }
}
