pub mod controller;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{GatePlan, LayerSpec, Network, ParamClass};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
pub use train::{TrainConfig, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
pub type Trainer32<'a> = Trainer<'a, f32>;
pub type Trainer64<'a> = Trainer<'a, f64>;
