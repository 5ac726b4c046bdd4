#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Numerics for eigenfunction averages over submanifolds of model surfaces.

pub mod bounds;
pub mod cli;
pub mod eigenmodes;
pub mod error;
pub mod flow;
pub mod quantize;
pub mod geometry;
pub mod returns;
pub mod submanifold;
pub mod tubes;

pub use error::{Error, Result};
