//! Conditional denoising diffusion on 8×8 synthetic glyphs, with a CrossWKV
//! noise predictor that reads class tokens as its text stream.

pub mod data;
mod model;
mod sample;
mod schedule;
mod train;

pub use data::{ToyBatch, CLASSES, CLASS_NAMES};
pub use model::{sinusoidal, Denoiser, DenoiserConfig, DenoiserParams};
pub use sample::{ppm_grid, sample, sample_and_classify, SampleReport, SAMPLE_STEPS};
pub use schedule::{q_sample, NoiseSchedule};
pub use train::{
    diffusion_loss, diffusion_loss_with, sample_batch, train, train_model, write_log_csv, EvalSet,
    LogRecord, NoisePredictor, TrainConfig,
};
