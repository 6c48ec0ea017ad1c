pub mod agent;
pub mod array;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod params;
pub mod props;
pub mod trainer;

pub use array::Array;
pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
