//! The full dual-branch parsing network: configurable dilated backbone, mask
//! branch, hand localization, prior fusion, pyramid/fusion parsing branch,
//! and reconstruction to input resolution.

mod config;
mod forward;
mod params;

pub use config::{ModelConfig, PriorMode};
pub use forward::{
    backbone_forward, locate_hand, mask_branch_forward, model_forward, parsing_branch_forward,
    reconstruct_full, ModelOutput,
};
pub use params::{BackboneParams, MaskBranchParams, ModelParams, ParsingBranchParams, StageParams};
