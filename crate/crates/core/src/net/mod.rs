//! The predictive-coding network: geometry, parameters, recurrent dynamics
//! and checkpoints.

mod checkpoint;
mod config;
mod dynamics;
mod model;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry, TensorKind};
pub use config::{Architecture, BaselineKind, HeadSpec, Hyper, PcConfig};
pub use dynamics::{
    classify, feedforward_init, grad_scale_factor, pc_step, run_trajectory, run_trajectory_with, GradScale,
    NetworkState, TrajectoryStep,
};
pub(crate) use dynamics::{check_image, update_terms};
pub use model::{count_params, ConvLayer, Decoder, ParamGroup, ParamReport, PcNet, REFERENCE_RESIDUAL, REFERENCE_TOTALS};
