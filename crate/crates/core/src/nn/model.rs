//! Extractor plus concatenated classifiers `[h⁰; h¹; …; hⁱ]`.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{Classifier, RowOrigin};
use super::extractor::{Extractor, ExtractorGrads, Mode};
use super::loss::smoothed_cross_entropy;
use super::optim::Group;
use crate::error::{Error, Result};
use crate::numcore::{argmax, Tensor2D};

pub const CHECKPOINT_FORMAT: &str = "fscil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub extractor: Extractor,
    /// `h⁰`, one row per base class.
    pub base: Classifier,
    /// `h¹ … hⁱ` in session order.
    pub novel: Vec<Classifier>,
}

/// Gradients shaped like a [`ModelState`]. `extractor` is `None` when the
/// backward pass stopped at the features.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub extractor: Option<ExtractorGrads>,
    pub base: Tensor2D,
    pub novel: Vec<Tensor2D>,
}

impl ModelGrads {
    pub fn group_slices(&self, group: Group) -> Option<Vec<&[f64]>> {
        match group {
            Group::Extractor => self.extractor.as_ref().map(|g| g.slices()),
            Group::Base => Some(vec![self.base.as_slice()]),
            Group::Previous => {
                let n = self.novel.len().saturating_sub(1);
                Some(self.novel[..n].iter().map(|t| t.as_slice()).collect())
            }
            Group::Current => Some(
                self.novel
                    .last()
                    .map(|t| t.as_slice())
                    .into_iter()
                    .collect(),
            ),
        }
    }
}

/// Output of [`ModelState::loss_and_grads`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ModelGrads,
    pub logits: Tensor2D,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ModelState,
}

impl ModelState {
    pub fn new(extractor: Extractor, base: Classifier) -> Result<Self> {
        let model = Self {
            extractor,
            base,
            novel: Vec::new(),
        };
        model.check()?;
        Ok(model)
    }

    /// Number of novel sessions applied so far.
    pub fn session(&self) -> usize {
        self.novel.len()
    }

    pub fn base_classes(&self) -> usize {
        self.base.classes()
    }

    pub fn num_classes(&self) -> usize {
        self.base.classes() + self.novel.iter().map(Classifier::classes).sum::<usize>()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    fn check(&self) -> Result<()> {
        let d = self.feature_dim();
        for c in std::iter::once(&self.base).chain(&self.novel) {
            c.check()?;
            if c.dim() != d {
                return Err(Error::shape(
                    "ModelState",
                    format!("classifier width {} but features have {d}", c.dim()),
                ));
            }
        }
        Ok(())
    }

    pub fn push_novel(&mut self, classifier: Classifier) -> Result<()> {
        if classifier.dim() != self.feature_dim() {
            return Err(Error::shape(
                "push_novel",
                format!(
                    "classifier width {} vs feature dim {}",
                    classifier.dim(),
                    self.feature_dim()
                ),
            ));
        }
        classifier.check()?;
        self.novel.push(classifier);
        Ok(())
    }

    /// All classifier rows stacked in class order.
    pub fn classifier_matrix(&self) -> Tensor2D {
        Tensor2D::vstack(
            std::iter::once(&self.base.weight).chain(self.novel.iter().map(|c| &c.weight)),
        )
        .expect("widths checked on insertion")
    }

    pub fn row_origins(&self) -> Vec<RowOrigin> {
        std::iter::once(&self.base)
            .chain(&self.novel)
            .flat_map(|c| c.origin.iter().copied())
            .collect()
    }

    /// Inference-mode features.
    pub fn features(&self, x: &Tensor2D) -> Result<Tensor2D> {
        self.extractor.infer(x)
    }

    /// Concatenated-classifier logits; column `c` scores class `c`.
    pub fn logits(&self, features: &Tensor2D) -> Result<Tensor2D> {
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(
                "logits",
                format!(
                    "features have {} columns, classifiers {}",
                    features.cols(),
                    self.feature_dim()
                ),
            ));
        }
        features.matmul_transposed(&self.classifier_matrix())
    }

    /// Argmax class per row, lowest index on ties.
    pub fn predict(&self, x: &Tensor2D) -> Result<Vec<usize>> {
        let z = self.logits(&self.features(x)?)?;
        Ok(z.iter_rows()
            .map(|r| argmax(r).expect("at least one class"))
            .collect())
    }

    /// Smoothed cross-entropy over every seen class and gradients for all
    /// classifiers; extractor gradients only when `extractor_grads` is set.
    /// In `Mode::Train` the norm layers use (and update) batch statistics.
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor2D,
        labels: &[usize],
        eps: f64,
        mode: Mode,
        extractor_grads: bool,
    ) -> Result<LossOutput> {
        let (features, cache) = if extractor_grads || mode == Mode::Train {
            let (f, c) = self.extractor.forward_cached(x, mode)?;
            (f, Some(c))
        } else {
            (self.extractor.infer(x)?, None)
        };
        let w = self.classifier_matrix();
        let z = features.matmul_transposed(&w)?;
        let (loss, dz) = smoothed_cross_entropy(&z, labels, eps)?;
        if !loss.is_finite() || !dz.is_finite() || !features.is_finite() {
            // the caller knows the epoch or step
            return Err(Error::Training {
                epoch: 0,
                msg: format!("loss became {loss}"),
            });
        }
        // dW = dzᵀ·F, split back into the per-session blocks
        let dw = crate::numcore::matmul(&dz.transpose(), &features)?;
        let d = self.feature_dim();
        let mut offset = 0;
        let mut take = |rows: usize| {
            let block = dw.as_slice()[offset * d..(offset + rows) * d].to_vec();
            offset += rows;
            Tensor2D::from_vec(rows, d, block).expect("sized block")
        };
        let base = take(self.base.classes());
        let novel = self.novel.iter().map(|c| take(c.classes())).collect();
        let extractor = match (extractor_grads, cache) {
            (true, Some(cache)) => {
                let df = crate::numcore::matmul(&dz, &w)?;
                Some(self.extractor.backward(&cache, &df)?)
            }
            _ => None,
        };
        Ok(LossOutput {
            loss,
            grads: ModelGrads {
                extractor,
                base,
                novel,
            },
            logits: z,
        })
    }

    /// Parameters of one decomposition group, in optimizer order.
    pub fn group_slices(&self, group: Group) -> Vec<&[f64]> {
        match group {
            Group::Extractor => self.extractor.param_slices(),
            Group::Base => vec![self.base.weight.as_slice()],
            Group::Previous => {
                let n = self.novel.len().saturating_sub(1);
                self.novel[..n]
                    .iter()
                    .map(|c| c.weight.as_slice())
                    .collect()
            }
            Group::Current => self
                .novel
                .last()
                .map(|c| c.weight.as_slice())
                .into_iter()
                .collect(),
        }
    }

    pub fn group_slices_mut(&mut self, group: Group) -> Vec<&mut [f64]> {
        match group {
            Group::Extractor => self.extractor.param_slices_mut(),
            Group::Base => vec![self.base.weight.as_mut_slice()],
            Group::Previous => {
                let n = self.novel.len().saturating_sub(1);
                self.novel[..n]
                    .iter_mut()
                    .map(|c| c.weight.as_mut_slice())
                    .collect()
            }
            Group::Current => self
                .novel
                .last_mut()
                .map(|c| c.weight.as_mut_slice())
                .into_iter()
                .collect(),
        }
    }

    pub fn group_flat(&self, group: Group) -> Vec<f64> {
        self.group_slices(group).concat()
    }

    pub fn set_group_flat(&mut self, group: Group, values: &[f64]) -> Result<()> {
        let mut slices = self.group_slices_mut(group);
        let total: usize = slices.iter().map(|s| s.len()).sum();
        if total != values.len() {
            return Err(Error::shape(
                "set_group_flat",
                format!("{} values for {total} parameters", values.len()),
            ));
        }
        let mut rest = values;
        for s in slices.iter_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Hash of the raw bytes of a group's parameters.
    pub fn group_digest(&self, group: Group) -> u64 {
        digest(self.group_slices(group))
    }

    /// Hash of every norm layer's running statistics.
    pub fn stats_digest(&self) -> u64 {
        digest(self.extractor.stat_slices())
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        ckpt.model.check()?;
        Ok(ckpt.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn digest(slices: Vec<&[f64]>) -> u64 {
    let mut h = DefaultHasher::new();
    for s in slices {
        h.write_usize(s.len());
        for v in s {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}
