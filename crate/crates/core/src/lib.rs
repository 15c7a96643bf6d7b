pub mod ctc;
pub mod error;
pub mod model;
pub mod numcore;
pub mod synthdata;
pub mod traineval;
pub mod uma;

pub use error::{Error, Result};
pub use numcore::{Array, Graph, Scalar, VarId};

pub type Array64 = Array<f64>;
pub type Array32 = Array<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
