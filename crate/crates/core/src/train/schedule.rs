//! Step-decay learning-rate schedule.

use crate::model::ScalePreset;

/// Reference schedule: decay at epochs 100 and 150 of a 200-epoch run.
const FULL_BOUNDARIES: [usize; 2] = [100, 150];
const FULL_LENGTH: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Divisor applied at each boundary. Dividing (rather than multiplying
    /// by 0.1) lands exactly on 0.001 and 0.0001 from 0.01.
    pub divisor: f64,
    /// Epochs at which the rate is divided by `divisor`.
    pub boundaries: Vec<usize>,
}

impl LrSchedule {
    /// 0.01 until epoch 100, 0.001 until 150, 0.0001 afterwards.
    pub fn full() -> Self {
        Self {
            base: 0.01,
            divisor: 10.0,
            boundaries: FULL_BOUNDARIES.to_vec(),
        }
    }

    /// Full preset uses the reference boundaries; desk preset places them at
    /// the same fractions (1/2 and 3/4) of the stage budget.
    pub fn for_stage(preset: ScalePreset, base: f64, stage_epochs: usize) -> Self {
        let boundaries = match preset {
            ScalePreset::Full => FULL_BOUNDARIES.to_vec(),
            ScalePreset::Desk => FULL_BOUNDARIES.iter().map(|b| b * stage_epochs / FULL_LENGTH).collect(),
        };
        Self {
            base,
            divisor: 10.0,
            boundaries,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = self.boundaries.iter().filter(|&&b| epoch >= b).count();
        self.base / self.divisor.powi(drops as i32)
    }
}

/// The reference schedule as a function of epoch.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::full().lr(epoch)
}
