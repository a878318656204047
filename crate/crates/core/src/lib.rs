//! Supervised deep multimodal symmetric matrix tri-factorization.
//!
//! Each subject contributes one symmetric connectivity matrix per modality.
//! Every modality gets a deep nonnegative node-to-community map
//! `Psi = rownorm(relu(W_1) ... relu(W_L))`, every subject a signed community
//! interaction matrix `S_i`, and a logistic classifier reads the
//! softmax-weighted fusion of the community summaries `Psi^T A_i Psi`.
//! Everything is trained jointly by plain gradient descent on
//!
//! ```text
//! mu * sum_i sum_m ||A_i^m - Psi^m S_i Psi^m^T||_F^2 + sum_i logistic(y_i, beta^T v_i + b)
//! ```

pub mod checkpoint;
pub mod commands;
pub mod dataio;
pub mod error;
pub mod gradients;
pub mod interpret;
pub mod metrics;
pub mod model;
pub mod synthgen;
pub mod training;

pub use dataio::{load_dataset, stratified_split, MultimodalGraphDataset, SplitIndices};
pub use error::{Error, Result};
pub use gradients::{finite_difference_check, loss_gradients, GradientSet};
pub use model::{HyperParams, ModelParams};
pub use training::{init_params, train, TrainingHistory};
