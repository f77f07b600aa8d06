//! Multi-modal image fusion with spatial-frequential cross attention.

pub mod attention;
pub mod baseline;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod param;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{AdaFuseModel, ModelConfig};
pub use tensor::{Element, Tensor};
