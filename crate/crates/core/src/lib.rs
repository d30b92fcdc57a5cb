//! Dynamic data selection: a learned per-instance feature gate in front of a
//! reconstruction autoencoder, built on a small reverse-mode autodiff core.
//!
//! The numeric core ([`tensor`], [`gating`], [`nets`]) is generic over the
//! scalar type; the aliases below fix it to `f64` (and `f32` with the `32`
//! suffix). Data generation, training and gradient checking run in `f64`.

pub mod gating;
pub mod gradcheck;
pub mod nets;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type GateConfig = gating::GateConfig<f64>;
pub type SelectionMask = gating::SelectionMask<f64>;
pub type Network = nets::Network<f64>;
pub type Adam = nets::Adam<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tensor::Tape<f32>;
pub type GateConfig32 = gating::GateConfig<f32>;
pub type SelectionMask32 = gating::SelectionMask<f32>;
pub type Network32 = nets::Network<f32>;
pub type Adam32 = nets::Adam<f32>;

/// Any error raised by this crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Gate(#[from] gating::GateError),
    #[error(transparent)]
    Net(#[from] nets::NetError),
    #[error(transparent)]
    Checkpoint(#[from] nets::CheckpointError),
    #[error(transparent)]
    Data(#[from] synthdata::DataError),
    #[error(transparent)]
    Train(#[from] trainer::TrainError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
