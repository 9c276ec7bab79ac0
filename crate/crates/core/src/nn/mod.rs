//! Minimal dense neural-network substrate: tensors, a two-part model
//! (feature extractor + classifier), reverse-mode gradients and plain SGD.

mod model;
mod tape;
mod tensor;

pub use model::{
    forward_classify, forward_extract, init_model, sgd_step, Activation, DenseLayer, GradientSet,
    LayerGrad, ModelParams,
};
pub use tape::{backward, trace_from_parts, LossTrace, ParamVars, Tape, Var};
pub use tensor::DenseTensor;
