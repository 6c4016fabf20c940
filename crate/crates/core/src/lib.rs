//! Aggregation-free federated learning with collaborative data condensation.
//!
//! Clients condense their private data into a few synthetic images per class
//! and upload those together with class-level logit statistics; the server
//! trains the global model directly on the pooled synthetic images. The crate
//! also carries the FedAvg, FedProx and FedDM baselines, a small reverse-mode
//! autodiff tape, IDX loading and a synthetic image generator.

pub mod class_matrix;
pub mod condensation;
pub mod data;
pub mod error;
pub mod federation;
mod linalg;
pub mod model;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod server;
pub mod swd;
pub mod tape;
pub mod tensor;

pub use class_matrix::ClassMatrix;
pub use error::{Error, Result};
pub use federation::{Algorithm, Federation, FederationConfig, RoundRecord, RunResult};
pub use model::{ArchKind, ModelArchitecture, ModelParams};
pub use tensor::Tensor;
