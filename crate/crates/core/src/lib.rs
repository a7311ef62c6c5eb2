#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod arm;
pub mod cli;
pub mod error;
pub mod fluid;
pub mod index;
pub mod linprog;
pub mod model;
pub mod policies;
pub mod sim;

pub use error::{Error, Result};
