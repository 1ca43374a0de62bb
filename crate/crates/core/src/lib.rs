//! Boundary-aware 3-D multi-organ segmentation on a small reverse-mode
//! autodiff engine.

pub mod arch;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod nn;
pub mod phantom;
pub mod supervision;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volume;

pub use arch::{Attention, BaNet, NetworkConfig};
pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Real, Shape, Tensor};
