//! The region-aware model: config, region geometry, forward graph,
//! feature concatenation and checkpoints.

mod checkpoint;
mod config;
mod features;
mod ram;
mod region;

pub use checkpoint::{load_checkpoint, load_config, save_checkpoint, MANIFEST_FILE, MODEL_FILE};
pub use config::{parse_attributes, AttributeSpec, Branch, BranchSet, FcDims, Geometry, RamConfig, StemLayer, StemOp};
pub use features::{concat_features, parse_selections, BranchFeatures, FeatureSelection, RegionPick};
pub use ram::{BatchOutput, FeatureVars, ForwardOutput, LogitVars, Mode, ParamGroup, RamModel};
pub use region::{split_regions, RegionSpec};
