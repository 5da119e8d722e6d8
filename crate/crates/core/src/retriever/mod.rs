//! Dense dual-encoder retriever: hashed features, linear towers trained with
//! in-batch negatives, and exact top-k search.

pub mod features;
pub mod index;
pub mod model;

pub use features::{featurize, FeatureVector, NUM_FEATURES};
pub use index::{build_index, search, DenseIndex};
pub use model::{
    Tower,
    in_batch_loss, similarity, train, BatchGradients, DualEncoderModel, TrainConfig, TrainTrace,
    TrainingPair,
};
