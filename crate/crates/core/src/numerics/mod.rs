//! Dense matrices, seeded random streams and PCA.

mod matrix;
mod pca;
mod rng;

pub use matrix::{dot, squared_distance, Matrix};
pub use pca::{pca_fit, pca_inverse_transform, pca_transform, PcaModel, PcaTarget};
pub use rng::{SeededRng, ALGORITHM_ID};
