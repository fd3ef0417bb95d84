//! Model-heterogeneous federated learning with variational
//! transposed-convolution decoders.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for common use.

pub mod accounting;
pub mod checkpoint;
pub mod datapart;
pub mod error;
pub mod evaluation;
pub mod math;
pub mod modelzoo;
pub mod nn;
pub mod orchestrator;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type LocalModelF32 = modelzoo::LocalModel<f32>;
pub type LocalModelF64 = modelzoo::LocalModel<f64>;
pub type VtcDecoderF32 = modelzoo::VtcDecoder<f32>;
pub type VtcDecoderF64 = modelzoo::VtcDecoder<f64>;
pub type StdVecF32 = math::StdVec<f32>;
pub type StdVecF64 = math::StdVec<f64>;
pub type PrototypeMapF32 = math::PrototypeMap<f32>;
pub type PrototypeMapF64 = math::PrototypeMap<f64>;
pub type DatasetBundleF32 = datapart::DatasetBundle<f32>;
pub type DatasetBundleF64 = datapart::DatasetBundle<f64>;
pub type ClientStateF32 = orchestrator::ClientState<f32>;
pub type RunArtifactsF32 = orchestrator::RunArtifacts<f32>;
