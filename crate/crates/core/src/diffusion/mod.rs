//! Class-conditioned denoising diffusion on small synthetic images.

pub mod data;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod train;

pub use data::{make_dataset, patchify, unpatchify, DatasetKind, ToyDataset};
pub use metrics::{eval_metrics, frechet_distance, pixel_pca, EvalMetrics};
pub use model::{DitConfig, DitLayer, DitModel, ForwardOptions, ForwardOutput, Routing};
pub use schedule::DiffusionSchedule;
pub use train::{batch_loss, sample, train, LogRecord, SampleOptions, Samples, TrainConfig};

#[cfg(test)]
mod tests;
