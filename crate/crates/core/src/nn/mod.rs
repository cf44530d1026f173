//! Layers, networks, training steps and checkpoints.

pub mod arch;
mod capture;
mod checkpoint;
mod layer;
mod loss;
mod network;
mod optim;

pub use arch::{Architecture, NetworkBuilder};
pub use capture::capture_activations;
pub use checkpoint::{load_checkpoint, load_checkpoint_f64, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layer::{
    pad_values_for, Activation, BatchNorm, Conv2D, Dense, Layer, PaddingMode, PcaConv2D, PcaDense, TensorRole,
};
pub use loss::{argmax_rows, correct_count, softmax_cross_entropy};
pub use network::{ForwardCache, Gradients, Mode, Network, Node, ParamCount, Port, ResidualGroup};
pub use optim::{backward_and_step, l2_penalty, Optimizer, OptimizerConfig, SlotState};
