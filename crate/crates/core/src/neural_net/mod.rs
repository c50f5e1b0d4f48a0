//! Fully connected policy network with per-sample gradients, Adam and
//! JSON checkpoints.
//!
//! Each head computes `g((1/sqrt m) * a_k . h(L))` where `h(L)` is the last
//! hidden layer of width `m` and `g` is the head activation.

mod adam;
mod checkpoint;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mlp::{
    Activation, Backward, HeadActivation, LayoutStamp, Mlp, MlpSpec, Outputs, ParamVector, SampleGradient, Workspace,
    LAYOUT_VERSION,
};
