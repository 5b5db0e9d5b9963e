//! Dense semantic labeling of multi-channel rasters with convolutional
//! networks: layers, architectures, training, tiled inference and
//! evaluation.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use arch::{ArchSpec, Architecture};
pub use error::{Error, Result};
pub use network::Network;
pub use tensor::{Scalar, Shape, Tensor, Tensor4};
