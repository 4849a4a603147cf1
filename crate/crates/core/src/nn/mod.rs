//! Layer graphs, the default backbone and heads, optimizers, parameter
//! averaging and checkpoints.

mod build;
mod checkpoint;
mod graph;
mod optim;

pub use build::{
    build_backbone, build_backbone_with, build_decoder, build_decoder_with, build_mlp_head, build_mlp_head_with,
    BackboneConfig, DecoderConfig, DecoderOutput, FinalActivation, Initializer,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use graph::{attach_head, Activation, CombinedNet, Layer, Mode, ModuleGraph, Norm, NormKind, Param};
pub use optim::{ema_update, LRSchedule, Optimizer, OptimizerKind};
