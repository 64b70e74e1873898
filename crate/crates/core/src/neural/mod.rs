//! Feedforward backbones, the Adam optimizer and the sample-based training
//! loop that composes the networks with the constraint layer.

pub mod adam;
pub mod mlp;
pub mod train;

pub use adam::AdamState;
pub use mlp::{Mlp, Tape};
pub use train::{
    predict, soft_penalty, train, EpochRecord, LayerEngine, Method, Model, SampleTask,
    TrainConfig, TrainTrace,
};
