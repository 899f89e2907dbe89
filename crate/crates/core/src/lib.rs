//! Coreset selection over CNN activations and measurement of how much
//! interpretation results change when only a coreset is used.

pub mod activation;
pub mod coreset;
pub mod error;
pub mod fidelity;
pub mod ice;
pub mod lasso;
pub mod pipeline;
pub mod simeval;
pub mod synthetic;
pub mod topic;
pub mod vebi;
pub mod viz;

pub use error::{Error, Result};
