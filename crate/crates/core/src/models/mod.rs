//! The two-branch ensemble: a ViT over IMU window images, a 3D-CNN + ViT over
//! skeleton heatmap volumes, and a fusion head over both representations.

mod cnn3d;
mod config;
mod ensemble;
mod layers;
mod vit;

pub use cnn3d::Cnn3d;
pub use config::{parse_kv, Cnn3dConfig, ModelConfig, StageSpec, VitConfig};
pub use ensemble::{
    concat_features, fill_store, ClassifierHead, EnsembleModel, ImuBranch, SkeletonBranch,
    HEAD_PREFIX, IMU_PREFIX, SKELETON_PREFIX,
};
pub use layers::{stack, Conv3d, Init, LayerNorm, Linear, LN_EPS};
pub use vit::{patchify, patchify_var, unpatchify, Vit};
