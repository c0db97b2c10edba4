//! Differentiable numerics: tensors, the autodiff tape, layers, parameter
//! storage, checkpoint containers, and the finite-difference checker.

pub mod gradcheck;
pub mod layers;
pub mod store;
pub mod tape;
pub mod tensor;

pub use gradcheck::grad_check;
pub use layers::{
    conv_stack_forward, init_conv_stack, init_mlp, mlp_forward, Activation, BoundParams,
    ConvLayerSpec, GradVec, ParamStore,
};
pub use store::{read_tensors, write_tensors};
pub use tape::{affine_value, conv1d_value, l2_normalize, Gradients, NodeId, Tape};
pub use tensor::Tensor;
