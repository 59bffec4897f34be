//! Dual-stream segmentation: a shared encoder trained jointly on annotated
//! image-mask pairs and on denoising of unannotated images.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{DatasetManifest, ImageBuffer, ManifestRecord, MaskBuffer, RngState, Split};
pub use error::{Error, Result};
pub use losses::LossWeights;
pub use model::{ModelConfig, Network};
pub use schedule::{NoiseSchedule, SchedulerKind};
pub use trainer::{Dataset, Sample, TrainConfig, Trainer};

/// Sets the size of the global worker pool. Results never depend on it.
/// Only the first call takes effect.
pub fn init_workers(workers: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}
