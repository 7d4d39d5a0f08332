use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{l2_normalize_rows, Rng, Tensor2D, NORM_EPS};

/// How a classifier row came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowOrigin {
    SgdTrained,
    Prototype,
    NormalizedPrototype,
    RandomInit,
}

/// Linear classifier without bias; row `j` scores class `j` of the block it
/// covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub weight: Tensor2D,
    pub origin: Vec<RowOrigin>,
}

impl Classifier {
    pub fn new(weight: Tensor2D, origin: RowOrigin) -> Self {
        let origin = vec![origin; weight.rows()];
        Self { weight, origin }
    }

    /// Gaussian rows with standard deviation `std`.
    pub fn random(classes: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..classes * dim).map(|_| std * rng.normal()).collect();
        Self::new(
            Tensor2D::from_vec(classes, dim, data).expect("sized buffer"),
            RowOrigin::RandomInit,
        )
    }

    /// Uniform rows in `±1/sqrt(dim)`.
    pub fn uniform(classes: usize, dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let data = (0..classes * dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self::new(
            Tensor2D::from_vec(classes, dim, data).expect("sized buffer"),
            RowOrigin::RandomInit,
        )
    }

    /// Rows are the given prototypes, optionally L2-normalized.
    pub fn from_prototypes(prototypes: Tensor2D, normalize: bool) -> Self {
        if normalize {
            Self::new(
                l2_normalize_rows(&prototypes, NORM_EPS),
                RowOrigin::NormalizedPrototype,
            )
        } else {
            Self::new(prototypes, RowOrigin::Prototype)
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn mark(&mut self, origin: RowOrigin) {
        self.origin.iter_mut().for_each(|o| *o = origin);
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.origin.len() != self.weight.rows() {
            return Err(Error::Format(format!(
                "{} origin tags for {} rows",
                self.origin.len(),
                self.weight.rows()
            )));
        }
        Ok(())
    }
}
