//! Training, evaluation, metrics, image I/O and checkpoint persistence.

pub mod checkpoint;
pub mod eval;
pub mod image_io;
pub mod metrics;
pub mod optim;
pub mod run_config;
pub mod schedule;
pub mod synthetic;
pub mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use eval::{evaluate, evaluate_images, DatasetSummary, ImageScore, MetricReport};
pub use image_io::{list_images, load_grayscale, save_grayscale};
pub use metrics::{average_report, psnr, ssim};
pub use optim::Adam;
pub use run_config::{RunConfig, SEED_ENV};
pub use schedule::CosineSchedule;
pub use train::{TrainConfig, Trainer};
