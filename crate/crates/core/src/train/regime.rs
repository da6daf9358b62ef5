//! Training regimes: ordered stages, each with a loss and a freeze set.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardPlan, HeadLayout, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    /// Single five-way head, pixel-frequency weighted loss.
    Fcn5cls,
    /// Sibling heads trained jointly; classification loss on ground-truth disks.
    Sfcn,
    /// Detection pre-training, then classification with detection frozen.
    OpiStage1Only,
    /// Detection pre-training, then joint training.
    OpiSkipClspretrain,
    /// Detection pre-training, classification pre-training, joint training.
    OpiFull,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] = [
        RegimeKind::Fcn5cls,
        RegimeKind::Sfcn,
        RegimeKind::OpiStage1Only,
        RegimeKind::OpiSkipClspretrain,
        RegimeKind::OpiFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::Fcn5cls => "fcn5cls",
            RegimeKind::Sfcn => "sfcn",
            RegimeKind::OpiStage1Only => "opi_stage1_only",
            RegimeKind::OpiSkipClspretrain => "opi_skip_clspretrain",
            RegimeKind::OpiFull => "opi_full",
        }
    }

    pub fn heads(self) -> HeadLayout {
        match self {
            RegimeKind::Fcn5cls => HeadLayout::SingleHead,
            _ => HeadLayout::Sibling,
        }
    }
}

impl fmt::Display for RegimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RegimeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegimeKind::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let names: Vec<&str> = RegimeKind::ALL.iter().map(|r| r.name()).collect();
            Error::Config(format!("unknown regime `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Loss and freeze behaviour of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageKind {
    /// Detection loss; classification branch not evaluated.
    Detection,
    /// Gated classification loss; trunk and detection frozen.
    Classification,
    /// Detection plus gated classification; nothing frozen.
    Joint,
    /// Detection plus classification on ground-truth disks; nothing frozen.
    SfcnJoint,
    /// Five-way loss over all pixels of a single-head model.
    FiveClass,
}

impl StageKind {
    /// Name used in logs, checkpoint files and seed tags. Stages with equal
    /// names draw identical random streams, so a shared prefix of two
    /// regimes trains identically.
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Detection => "detection",
            StageKind::Classification => "classification",
            StageKind::Joint => "joint",
            StageKind::SfcnJoint => "sfcn_joint",
            StageKind::FiveClass => "five_class",
        }
    }

    pub fn trainable(self) -> BTreeSet<ParamGroup> {
        let groups: &[ParamGroup] = match self {
            StageKind::Detection => &[ParamGroup::Trunk, ParamGroup::Detection],
            StageKind::Classification => &[ParamGroup::Classification],
            StageKind::FiveClass => &[ParamGroup::Trunk, ParamGroup::Classification],
            StageKind::Joint | StageKind::SfcnJoint => &ParamGroup::ALL,
        };
        groups.iter().copied().collect()
    }

    pub fn plan(self) -> ForwardPlan {
        ForwardPlan {
            trainable: self.trainable(),
            detection: self != StageKind::FiveClass,
            classification: self != StageKind::Detection,
        }
    }

    /// Parameter groups that must stay bitwise unchanged.
    pub fn frozen(self) -> BTreeSet<ParamGroup> {
        let t = self.trainable();
        ParamGroup::ALL.into_iter().filter(|g| !t.contains(g)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub kind: StageKind,
    pub epochs: usize,
}

/// Epoch budgets of the three OPI stages. Single-stage regimes train for
/// their sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageBudgets {
    pub detection: usize,
    pub classification: usize,
    pub joint: usize,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self {
            detection: 30,
            classification: 30,
            joint: 40,
        }
    }
}

impl StageBudgets {
    pub fn total(&self) -> usize {
        self.detection + self.classification + self.joint
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Regime {
    pub kind: RegimeKind,
    pub stages: Vec<Stage>,
}

impl Regime {
    pub fn new(kind: RegimeKind, b: &StageBudgets) -> Self {
        let s = |kind, epochs| Stage { kind, epochs };
        let stages = match kind {
            RegimeKind::Fcn5cls => vec![s(StageKind::FiveClass, b.total())],
            RegimeKind::Sfcn => vec![s(StageKind::SfcnJoint, b.total())],
            RegimeKind::OpiStage1Only => vec![
                s(StageKind::Detection, b.detection),
                s(StageKind::Classification, b.classification),
            ],
            RegimeKind::OpiSkipClspretrain => vec![s(StageKind::Detection, b.detection), s(StageKind::Joint, b.joint)],
            RegimeKind::OpiFull => vec![
                s(StageKind::Detection, b.detection),
                s(StageKind::Classification, b.classification),
                s(StageKind::Joint, b.joint),
            ],
        };
        Self { kind, stages }
    }
}
