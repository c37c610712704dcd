//! Pattern-exploiting training over a pluggable masked language model.

pub mod avs;
pub mod backend;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod ipet;
pub mod math;
pub mod pipeline;
pub mod pvp;
pub mod run;
pub mod synthetic;
pub mod task;
pub mod training;
pub mod vocab;

pub use error::{PetError, Result};
