//! Parameter groups, SGD with (Nesterov) momentum, milestone schedule.

use serde::{Deserialize, Serialize};

use super::extractor::Mode;
use super::model::{ModelGrads, ModelState};
use crate::error::{Error, Result};

/// The four decomposition groups: extractor `f`, base classifier `h⁰`,
/// earlier novel classifiers `h¹..hⁱ⁻¹`, current novel classifier `hⁱ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Extractor,
    Base,
    Previous,
    Current,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Extractor,
        Group::Base,
        Group::Previous,
        Group::Current,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Freeze flags and lazily allocated momentum buffers per group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGroups {
    frozen: [bool; 4],
    buffers: [Option<Vec<f64>>; 4],
}

impl ParamGroups {
    pub fn all_trainable() -> Self {
        Self::default()
    }

    /// Only the listed groups train; everything else is frozen.
    pub fn training(groups: &[Group]) -> Self {
        let mut pg = Self::default();
        for g in Group::ALL {
            pg.frozen[g.index()] = !groups.contains(&g);
        }
        pg
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        self.frozen[group.index()] = frozen;
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen[group.index()]
    }

    pub fn momentum(&self, group: Group) -> Option<&[f64]> {
        self.buffers[group.index()].as_deref()
    }

    pub fn has_state(&self) -> bool {
        self.buffers.iter().any(Option::is_some)
    }

    /// Norm layers run in inference mode whenever the extractor is frozen.
    pub fn extractor_mode(&self) -> Mode {
        if self.is_frozen(Group::Extractor) {
            Mode::Inference
        } else {
            Mode::Train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

/// One optimizer step over every unfrozen group:
/// `d = g + λθ; v ← μv + d; θ ← θ − lr·(d + μv)` (Nesterov) or
/// `θ ← θ − lr·v` (heavy ball). Frozen groups and their buffers are not
/// touched.
pub fn sgd_step(
    model: &mut ModelState,
    groups: &mut ParamGroups,
    grads: &ModelGrads,
    p: &SgdParams,
) -> Result<()> {
    for group in Group::ALL {
        if groups.is_frozen(group) {
            continue;
        }
        let grad_slices = grads.group_slices(group).ok_or_else(|| {
            Error::Config(format!("group {group:?} is trainable but has no gradients"))
        })?;
        let mut params = model.group_slices_mut(group);
        let total: usize = params.iter().map(|s| s.len()).sum();
        let grad_total: usize = grad_slices.iter().map(|s| s.len()).sum();
        if total != grad_total {
            return Err(Error::shape(
                "sgd_step",
                format!("{group:?}: {grad_total} gradients for {total} parameters"),
            ));
        }
        if total == 0 {
            continue;
        }
        let buf = groups.buffers[group.index()].get_or_insert_with(|| vec![0.0; total]);
        if buf.len() != total {
            return Err(Error::shape(
                "sgd_step",
                format!("{group:?}: stale momentum buffer"),
            ));
        }
        let grads_flat = grad_slices.iter().flat_map(|s| s.iter());
        let params_flat = params.iter_mut().flat_map(|s| s.iter_mut());
        for ((theta, &g), v) in params_flat.zip(grads_flat).zip(buf.iter_mut()) {
            let d = g + p.weight_decay * *theta;
            *v = p.momentum * *v + d;
            let step = if p.nesterov { d + p.momentum * *v } else { *v };
            *theta -= p.lr * step;
        }
    }
    Ok(())
}

/// Base-session optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    /// Desk-scale schedule: the full recipe's milestones at 60% and 80% of
    /// training, compressed to 30 epochs.
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            milestones: vec![18, 24],
            gamma: 0.1,
            label_smoothing: 0.0,
        }
    }
}

impl TrainConfig {
    /// Full-scale recipe: 200 epochs, batch 256, lr 0.1 decayed ×0.1 at
    /// epochs 120 and 160, Nesterov momentum 0.9, weight decay 5e-4.
    pub fn full_scale() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            milestones: vec![120, 160],
            gamma: 0.1,
            label_smoothing: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr > 0, 0 <= momentum < 1, weight_decay >= 0".into(),
            ));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "milestones must be strictly increasing".into(),
            ));
        }
        if self.milestones.iter().any(|&m| m >= self.epochs) {
            return Err(Error::Config("milestones must be < epochs".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// `lr · gamma^(#milestones ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.gamma.powi(passed as i32)
    }

    pub fn sgd_at(&self, epoch: usize) -> SgdParams {
        SgdParams {
            lr: self.lr_at(epoch),
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
        }
    }
}
