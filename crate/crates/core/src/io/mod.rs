//! Persistence and orchestration: checkpoints, run configuration, dataset
//! files, and the training/sampling pipelines the CLI drives.

mod augment;
mod checkpoint;
mod config;
mod dataset;
mod pipeline;
mod report;

pub use checkpoint::{
    load_denoiser, load_vae, save_denoiser, save_vae, Checkpoint, DenoiserSnapshot, ModelKind,
};
pub use config::{Profile, RunConfig, ScheduleConfig};
pub use dataset::{load_motion, save_motion, write_json, MOTION_FORMAT};
pub use pipeline::{
    encode_dataset_to_latents, encode_dataset_with_scale, encode_motion, normalize_dataset_frames,
    normalize_motion, per_sample_seed, sample_motion, single_concept_batch, snapshot_context,
    train_denoiser_pipeline, train_vae_pipeline, LatentItems, SequenceItems,
};
pub use augment::{augment_denoiser, AugmentConfig, AugmentReport};
pub use report::{evaluate_model, EvalConfig, EvalReport};
