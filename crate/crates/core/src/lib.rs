pub mod autodiff;
pub mod checkpoint;
pub mod divergence;
pub mod error;
pub mod linalg;
pub mod manifold;
pub mod network;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod proposal;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
