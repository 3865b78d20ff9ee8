//! The attention encoder-decoder backbone, its LoRA adapters, analytic
//! gradients and optimizers.
//!
//! The model is deliberately tiny: one `tanh` encoder projection, a
//! single-head dot-product attention whose query comes from the previous
//! token's embedding, one `tanh` hidden layer and an output projection.
//! Everything is evaluated in `f64`.

mod checkpoint;
mod config;
mod forward;
mod grad;
mod optim;
mod params;

pub use checkpoint::{
    read_adapter, read_params, write_adapter, write_params, ADAPTER_MAGIC, FORMAT_VERSION,
    PARAMS_MAGIC,
};
pub use config::{LoraTarget, ModelConfig, BOS, EOS, FIRST_TOKEN, PAD};
pub use forward::{forward, Encoded, ForwardOutput, ModelView, Step};
pub use grad::{loss_and_grads, Gradients};
pub use optim::{sgd_step, Adam, AdamConfig};
pub use params::{merge, LoraAdapter, LoraFactors, ParameterSet, Tensors};

pub(crate) use forward::softmax;
