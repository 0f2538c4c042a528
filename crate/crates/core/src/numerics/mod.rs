//! Dense tensors, MLPs with reverse-mode gradients, and optimizers.

pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use mlp::{
    mlp_backward, mlp_forward, sigmoid, Activation, ForwardCache, Gradients, Init, Linear,
    LinearGrad, Mlp, OutputActivation, LOGIT_CLAMP,
};
pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use tensor::Tensor;
