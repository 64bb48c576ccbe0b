pub mod error;
pub mod numerics;
pub mod scene_graph;
pub mod temporal;
pub mod hstan;
pub mod cqr;
pub mod drta;
pub mod scenario;
pub mod metrics;
pub mod bench;
pub mod pipeline;

pub use error::{Error, Result};
