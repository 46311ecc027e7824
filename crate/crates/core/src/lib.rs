#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod network;
pub mod par;
pub mod retrieval;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Matrix;
