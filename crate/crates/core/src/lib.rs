//! Training engine for softmax-family losses over multiple label baskets
//! whose classes may overlap.
//!
//! - [`loss`]: the unified margin-softmax loss and its gradients.
//! - [`bbs`]: basket label space, negative-class mining, basket-based loss.
//! - [`parallel`]: the same loss with class centers sharded across workers.
//! - [`datasim`]: synthetic data, basket splitting and the basket file format.
//! - [`trainer`]: MLP backbone, SGD and the training loop.
//! - [`eval`]: verification and retrieval metrics.
//! - [`experiment`]: JSON-configured pipelines and throughput benchmarks.

pub mod bbs;
pub mod datasim;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod ids;
pub mod loss;
pub mod parallel;
pub mod select;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
pub use ids::{BasketId, LocalId, NetworkId};
