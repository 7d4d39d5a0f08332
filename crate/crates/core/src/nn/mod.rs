//! Feature extractor, classifiers, loss and optimizer.

mod classifier;
mod extractor;
mod loss;
mod model;
mod optim;

pub use classifier::{Classifier, RowOrigin};
pub use extractor::{
    Extractor, ExtractorConfig, ExtractorGrads, FeatureNorm, ForwardCache, Linear, LinearGrad,
    Mode, NormGrad, NORM_DENOM_EPS, VAR_FLOOR,
};
pub use loss::{cross_entropy, smoothed_cross_entropy, smoothed_targets};
pub use model::{LossOutput, ModelGrads, ModelState, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::{sgd_step, Group, ParamGroups, SgdParams, TrainConfig};
