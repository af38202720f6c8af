//! Streaming group-level statistics.
//!
//! Every (group, arm) cell keeps a running count, mean and sum of squared
//! deviations. Variances use the population divisor (`m2 / count`), which is
//! what the stage-wise plug-in estimators normalize by.

use serde::{Deserialize, Serialize};

use crate::config::{EffectScale, Participant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn of(treated: bool) -> Arm {
        if treated {
            Arm::Treated
        } else {
            Arm::Control
        }
    }
}

/// Welford accumulator for one (group, arm) cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupArmStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl GroupArmStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, value: f64) {
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
        // Rounding can push a constant stream a hair below zero.
        if self.m2 < 0.0 {
            self.m2 = 0.0;
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    /// Population variance `m2 / count`.
    pub fn variance(&self) -> Option<f64> {
        (self.count > 0).then(|| self.m2 / self.count as f64)
    }
}

/// Everything the design needs from the history through the current stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialState {
    cells: Vec<[GroupArmStats; 2]>,
    group_counts: Vec<u64>,
    total_enrolled: u64,
    stage: usize,
}

impl TrialState {
    pub fn new(groups: usize) -> Self {
        TrialState {
            cells: vec![[GroupArmStats::default(); 2]; groups],
            group_counts: vec![0; groups],
            total_enrolled: 0,
            stage: 0,
        }
    }

    pub fn groups(&self) -> usize {
        self.cells.len()
    }

    /// Number of non-empty batches absorbed so far.
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn total_enrolled(&self) -> u64 {
        self.total_enrolled
    }

    pub fn group_count(&self, group: usize) -> u64 {
        self.group_counts[group]
    }

    pub fn cell(&self, group: usize, arm: Arm) -> &GroupArmStats {
        &self.cells[group][arm.index()]
    }

    /// Absorbs one stage of participants. The batch is rejected as a whole
    /// if any record is invalid.
    pub fn update(&mut self, batch: &[Participant]) -> Result<()> {
        let groups = self.groups();
        for p in batch {
            if p.group >= groups {
                return Err(Error::GroupOutOfRange {
                    index: p.group,
                    groups,
                });
            }
            if !p.outcome.is_finite() {
                return Err(Error::NonFinite("participant outcome"));
            }
        }
        if batch.is_empty() {
            return Ok(());
        }
        for p in batch {
            self.cells[p.group][Arm::of(p.treated).index()].push(p.outcome);
            self.group_counts[p.group] += 1;
        }
        self.total_enrolled += batch.len() as u64;
        self.stage += 1;
        Ok(())
    }

    pub fn arm_mean(&self, group: usize, arm: Arm) -> Option<f64> {
        self.cell(group, arm).mean()
    }

    pub fn arm_variance(&self, group: usize, arm: Arm) -> Option<f64> {
        self.cell(group, arm).variance()
    }

    /// Estimated group effect; `None` when an arm is empty or, on the log
    /// scale, when either arm mean is not positive.
    pub fn group_effect(&self, group: usize, scale: EffectScale) -> Option<f64> {
        let treated = self.arm_mean(group, Arm::Treated)?;
        let control = self.arm_mean(group, Arm::Control)?;
        match scale {
            EffectScale::MeanDifference => Some(treated - control),
            EffectScale::LogRelativeRisk => {
                (treated > 0.0 && control > 0.0).then(|| treated.ln() - control.ln())
            }
        }
    }

    /// Share of all enrolled participants that belong to `group`.
    pub fn group_proportion(&self, group: usize) -> Option<f64> {
        (self.total_enrolled > 0)
            .then(|| self.group_counts[group] as f64 / self.total_enrolled as f64)
    }

    pub fn group_proportions(&self) -> Option<Vec<f64>> {
        (0..self.groups())
            .map(|j| self.group_proportion(j))
            .collect()
    }

    /// Realized fraction of the group's participants that were treated.
    pub fn treated_fraction(&self, group: usize) -> Option<f64> {
        let n = self.group_counts[group];
        (n > 0).then(|| self.cell(group, Arm::Treated).count() as f64 / n as f64)
    }
}
