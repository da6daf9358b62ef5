//! Initialization, optimizer, learning-rate schedule and staged training.

pub mod init;
mod optim;
mod regime;
mod schedule;

pub use optim::Sgd;
pub use regime::{Regime, RegimeKind, Stage, StageBudgets, StageKind};
pub use schedule::{lr_schedule, LrSchedule};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{augment, crop_patches, make_masks, AnnotatedImage, AugmentConfig, Dataset, MaskPair, Split};
use crate::error::{Error, Result};
use crate::infer::{evaluate, InferConfig};
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::objective::{
    classification_loss, combine_opi, decay_term, detection_loss, gated_class_loss, joint_loss, LossReport,
    ObjectiveConfig,
};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Patches per step; trailing batches smaller than 2 are dropped.
    pub batch_size: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub budgets: StageBudgets,
    /// Ground-truth disk radius in pixels.
    pub mask_radius: usize,
    /// Patch stride; patches are the model's input size.
    pub patch_stride: Option<usize>,
    /// Validate every this many epochs (and after the last one); 0 disables.
    pub val_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            momentum: 0.9,
            base_lr: 0.01,
            budgets: StageBudgets::default(),
            mask_radius: 3,
            patch_stride: None,
            val_every: 5,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch norm)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.base_lr > 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and base_lr be positive".into()));
        }
        if self.mask_radius == 0 || self.patch_stride == Some(0) {
            return Err(Error::Config("mask_radius and patch_stride must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step in the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: String,
    pub lr: f64,
    pub loss_det: f64,
    pub loss_cls: f64,
    pub loss_decay: f64,
    pub loss_total: f64,
    pub n_cls: usize,
}

/// A validation score: detection F1 after detection stages, weighted
/// classification F1 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValRecord {
    pub stage: String,
    pub epoch: usize,
    pub score: f64,
}

/// End-of-epoch progress, passed to the optional observer.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub stage: StageKind,
    pub epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub val_score: Option<f64>,
}

type Observer<'a> = Box<dyn FnMut(&EpochSummary) + 'a>;

/// Runs training stages on a fixed dataset, keeping the step log and
/// optimizer state across stages.
pub struct Trainer<'a> {
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub infer: InferConfig,
    seed: u64,
    samples: Vec<(Tensor, MaskPair)>,
    val: Vec<&'a AnnotatedImage>,
    checkpoint_dir: Option<PathBuf>,
    observer: Option<Observer<'a>>,
    pub log: Vec<LogRow>,
    pub validation: Vec<ValRecord>,
    pub checkpoints: Vec<PathBuf>,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a Dataset,
        train: TrainConfig,
        objective: ObjectiveConfig,
        infer: InferConfig,
        seed: u64,
    ) -> Result<Self> {
        train.validate()?;
        infer.validate()?;
        let samples: Vec<(Tensor, MaskPair)> = dataset
            .split(Split::Train)
            .into_iter()
            .map(|im| {
                let m = make_masks(&im.nuclei, im.height(), im.width(), train.mask_radius);
                (im.pixels.clone(), m)
            })
            .collect();
        if samples.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        Ok(Self {
            train,
            objective,
            infer,
            seed,
            samples,
            val: dataset.split(Split::Val),
            checkpoint_dir: None,
            observer: None,
            log: Vec::new(),
            validation: Vec::new(),
            checkpoints: Vec::new(),
            step: 0,
        })
    }

    /// Writes stage-boundary and best-validation checkpoints under `dir`.
    pub fn with_checkpoints(mut self, dir: &Path) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self
    }

    pub fn with_observer(mut self, f: impl FnMut(&EpochSummary) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    /// The initial model for `regime`: its head layout on `config`,
    /// initialized from the `init` stream of the master seed.
    pub fn initial_model(&self, config: &ModelConfig, regime: RegimeKind) -> Result<Model> {
        let cfg = ModelConfig {
            heads: regime.heads(),
            ..config.clone()
        };
        self.objective.validate(cfg.class_channels())?;
        Model::build(&cfg, derive_seed(self.seed, "init", 0))
    }

    fn epoch_patches(&self, model: &Model, stage: StageKind, epoch: usize) -> Result<Vec<(Tensor, MaskPair)>> {
        let size = model.config.image_height;
        if model.config.image_width != size {
            return Err(Error::Config("training expects square model inputs".into()));
        }
        let stride = self.train.patch_stride.unwrap_or(size);
        let mut rng = rng_for(self.seed, &format!("augment/{}", stage.name()), epoch as u64);
        let mut out = Vec::new();
        for (img, masks) in &self.samples {
            let (a, m) = augment(&self.train.augment, img, masks, &mut rng);
            for p in crop_patches(&a, &m, size, stride)? {
                out.push((p.image, p.masks));
            }
        }
        let mut shuffle = rng_for(self.seed, &format!("shuffle/{}", stage.name()), epoch as u64);
        out.shuffle(&mut shuffle);
        Ok(out)
    }

    fn train_step(&mut self, model: &mut Model, stage: StageKind, batch: &[(Tensor, MaskPair)], lr: f64, weights: &(f64, Vec<f64>), opt: &mut Sgd) -> Result<LossReport> {
        let images = Tensor::stack(&batch.iter().map(|b| b.0.clone().into_batch()).collect::<Result<Vec<_>>>()?)?;
        let det_mask: Vec<u8> = batch.iter().flat_map(|b| b.1.det.iter().copied()).collect();
        let cls_mask: Vec<u8> = batch.iter().flat_map(|b| b.1.cls.iter().copied()).collect();
        let n = det_mask.len();
        let (alpha, gamma) = (weights.0, &weights.1);
        let obj = &self.objective;

        let mut g = Graph::new();
        let x = g.input(images);
        let vars = model.forward_graph(&mut g, x, &stage.plan())?;
        let need = |v: Option<crate::autodiff::Var>, what: &str| {
            v.ok_or_else(|| Error::Config(format!("{what} output missing for stage {}", stage.name())))
        };
        let (det, cls, lambda) = match stage {
            StageKind::Detection => {
                let d = need(vars.det_probs, "detection")?;
                (Some(detection_loss(&mut g, d, &det_mask, alpha)?), None, 1.0)
            }
            StageKind::Classification => {
                let d = need(vars.det_probs, "detection")?;
                let p_cls = combine_opi(&mut g, d, need(vars.cls_probs, "classification")?)?;
                (None, Some(classification_loss(&mut g, p_cls, d, &cls_mask, obj.t_p, gamma)?), 1.0)
            }
            StageKind::Joint => {
                let d = need(vars.det_probs, "detection")?;
                let p_cls = combine_opi(&mut g, d, need(vars.cls_probs, "classification")?)?;
                let c = classification_loss(&mut g, p_cls, d, &cls_mask, obj.t_p, gamma)?;
                (Some(detection_loss(&mut g, d, &det_mask, alpha)?), Some(c), obj.lambda)
            }
            StageKind::SfcnJoint => {
                let d = need(vars.det_probs, "detection")?;
                let gate: Vec<bool> = det_mask.iter().map(|&v| v == 1).collect();
                let c = gated_class_loss(&mut g, need(vars.cls_probs, "classification")?, &cls_mask, &gate, gamma)?;
                (Some(detection_loss(&mut g, d, &det_mask, alpha)?), Some(c), obj.lambda)
            }
            StageKind::FiveClass => {
                let gate = vec![true; n];
                let c = gated_class_loss(&mut g, need(vars.cls_probs, "classification")?, &cls_mask, &gate, gamma)?;
                (None, Some(c), 1.0)
            }
        };
        let decay = decay_term(&mut g, &vars.bindings, obj.beta);
        let (terms, report) = joint_loss(&mut g, det, cls, decay, lambda, n)?;

        self.step += 1;
        self.log.push(LogRow {
            step: self.step,
            stage: stage.name().to_string(),
            lr,
            loss_det: report.loss_det,
            loss_cls: report.loss_cls,
            loss_decay: report.loss_decay,
            loss_total: report.loss_total,
            n_cls: report.n_cls,
        });
        if !report.loss_total.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                value: report.loss_total,
            });
        }
        g.backward(terms.total)?;
        let mut grads = BTreeMap::new();
        for (name, v) in &vars.bindings {
            if let Some(gr) = g.grad(*v) {
                if gr.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Divergence {
                        step: self.step,
                        value: f64::NAN,
                    });
                }
                grads.insert(name.clone(), gr.to_vec());
            }
        }
        opt.step(&mut model.params, vars.bindings.iter().map(|(n, _)| n.as_str()), &grads, lr)?;
        model.apply_bn_updates(&vars.bn_updates);
        Ok(report)
    }

    fn checkpoint(&mut self, model: &Model, file: String) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(file);
            save_checkpoint(model, &path)?;
            if !self.checkpoints.contains(&path) {
                self.checkpoints.push(path);
            }
        }
        Ok(())
    }

    /// Trains one stage in place. `index` numbers the stage within its
    /// regime (1-based) for checkpoint names.
    pub fn run_stage(&mut self, model: &mut Model, stage: Stage, index: usize) -> Result<()> {
        let kind = stage.kind;
        let schedule = LrSchedule::for_stage(model.config.scale_preset, self.train.base_lr, stage.epochs);
        let mut opt = Sgd::new(self.train.momentum);
        let k1 = model.config.class_channels();
        let mut best = f64::NEG_INFINITY;
        for epoch in 0..stage.epochs {
            let lr = schedule.lr(epoch);
            let patches = self.epoch_patches(model, kind, epoch)?;
            let det_all: Vec<u8> = patches.iter().flat_map(|p| p.1.det.iter().copied()).collect();
            let cls_all: Vec<u8> = patches.iter().flat_map(|p| p.1.cls.iter().copied()).collect();
            let weights = (self.objective.resolve_alpha(&det_all), self.objective.resolve_gamma(&cls_all, k1));
            let mut total = 0.0;
            let mut steps = 0;
            for batch in patches.chunks(self.train.batch_size) {
                if batch.len() < 2 {
                    continue;
                }
                let r = self.train_step(model, kind, batch, lr, &weights, &mut opt)?;
                total += r.loss_total;
                steps += 1;
            }
            let last = epoch + 1 == stage.epochs;
            let validate = !self.val.is_empty() && self.train.val_every > 0 && ((epoch + 1) % self.train.val_every == 0 || last);
            let val_score = if validate {
                let (m, _) = evaluate(model, &self.val, &self.infer)?;
                let score = if kind == StageKind::Detection { m.detection.f1 } else { m.weighted.f1 };
                self.validation.push(ValRecord {
                    stage: kind.name().to_string(),
                    epoch,
                    score,
                });
                if score > best {
                    best = score;
                    self.checkpoint(model, format!("stage{index}_{}_best.ckpt", kind.name()))?;
                }
                Some(score)
            } else {
                None
            };
            if let Some(obs) = &mut self.observer {
                obs(&EpochSummary {
                    stage: kind,
                    epoch,
                    epochs: stage.epochs,
                    lr,
                    mean_loss: if steps > 0 { total / steps as f64 } else { 0.0 },
                    val_score,
                });
            }
        }
        self.checkpoint(model, format!("stage{index}_{}.ckpt", kind.name()))
    }

    /// Initializes a model for `regime` and runs all of its stages.
    pub fn run_regime(&mut self, config: &ModelConfig, regime: &Regime) -> Result<Model> {
        let mut model = self.initial_model(config, regime.kind)?;
        for (i, &stage) in regime.stages.iter().enumerate() {
            self.run_stage(&mut model, stage, i + 1)?;
        }
        Ok(model)
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub validation: Vec<ValRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains `regime` on the dataset's training split from the master `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_regime(
    regime: RegimeKind,
    dataset: &Dataset,
    model: &ModelConfig,
    objective: &ObjectiveConfig,
    train: &TrainConfig,
    infer: &InferConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut t = Trainer::new(dataset, train.clone(), objective.clone(), infer.clone(), seed)?;
    if let Some(dir) = checkpoint_dir {
        t = t.with_checkpoints(dir);
    }
    let m = t.run_regime(model, &Regime::new(regime, &train.budgets))?;
    Ok(TrainOutcome {
        model: m,
        log: t.log,
        validation: t.validation,
        checkpoints: t.checkpoints,
    })
}

#[cfg(test)]
mod tests;
