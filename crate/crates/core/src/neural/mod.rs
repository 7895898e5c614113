//! Recurrent gain networks, reverse-mode differentiation and optimization.

pub mod checkpoint;
pub mod net;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use net::{Activation, BoundNet, GainNetConfig, Parameter, RecurrentGainNet, Unroll};
pub use optim::{clip_global_norm, AdamConfig, OptimizerState};
pub use tape::{Adjoints, Node, Tape};
pub use tensor::Tensor2;
