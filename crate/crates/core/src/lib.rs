//! Multi-stage temporal convolutional action segmentation with adversarial
//! temporal domain adaptation, on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grad_suite;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod training;

pub use data::{LabeledDataset, SyntheticConfig, TargetDataset};
pub use error::{Error, Result};
pub use losses::{Domain, LossBreakdown, LossWeights};
pub use metrics::{MetricOptions, MetricsReport, Scores};
pub use model::{build_model, Mode, ModelConfig, ModelParams};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use training::{predict, train, TrainConfig, TrainHistory};
