//! Unsupervised bias mitigation through deep-to-shallow self-distillation.
//!
//! A small feed-forward network is warmed up with an averaged two-head
//! cross-entropy, the shallow-tap features of each class are clustered into
//! pseudo-attribute groups, and training continues with a hybrid objective
//! that pulls every group's shallow feature distribution toward the deep
//! feature distribution of its class (kernel MMD) while the shallow and deep
//! classifiers are tied together with a KL term.
//!
//! Everything runs on synthetic biased data generated by [`datagen`], so the
//! spurious correlation, the minority groups and the ground-truth bias labels
//! are all known exactly.

pub mod clustering;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, PcaModel, PcaTarget, SeededRng};
