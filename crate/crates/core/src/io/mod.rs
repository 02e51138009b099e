//! Readers and writers for interaction logs, visual feature stores, user
//! splits and planted ground truth, plus the synthetic dataset generator.

mod features;
mod ground_truth;
mod interactions;
mod split_file;
pub mod synth;

pub use features::{load_visual_features, write_visual_features, FeatureLookup, VisualFeatureStore};
pub use ground_truth::{read_ground_truth, write_ground_truth, PlantedGroundTruth};
pub use interactions::{load_interactions, parse_interactions, write_interactions};
pub use split_file::{read_split, write_split};
pub use synth::{generate_synthetic, SyntheticConfig, SyntheticDataset};
