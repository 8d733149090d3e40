//! Trainable classifier stacks and the shared training loop.

pub mod checkpoint;
pub mod feedforward;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;
pub mod transformer;

pub use checkpoint::{Checkpoint, RunMetadata};
pub use feedforward::{Activation, FeedForward, MlpConfig, SnnConfig};
pub use layers::{Ctx, Mode};
pub use loss::softmax_cross_entropy;
pub use model::{predict, Classifier, Output};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, Params};
pub use train::{train_classifier, TrainConfig, TrainReport};
pub use transformer::{TokenSet, Transformer, TransformerConfig};
