//! Evaluation metrics and energy-surface inspection for generated motions.

mod features;
mod frechet;
mod grid;
mod metrics;

pub use features::{feature_matrix, motion_features, FeatureVector, FEATURE_DIM, FEATURE_VERSION};
pub use frechet::{
    frechet_distance, frechet_distance_rows, frechet_from_moments, mean_and_covariance,
    symmetric_eigen,
};
pub use grid::{energy_grid, gaussian_smooth, pearson, EnergyGrid, PlaneSpec};
pub use metrics::{
    bootstrap_mean_ci, concept_recall, diversity, jerk_metric, multimodality, per_sample_hits,
    transition_distance, FamilyRate,
    RecallReport, HIT_THRESHOLD,
};
