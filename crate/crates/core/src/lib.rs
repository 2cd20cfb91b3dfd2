//! Desk-scale simulator for federated multi-modal (image + text) learning with
//! missing modalities.
//!
//! The pipeline: a procedurally generated paired dataset ([`datagen`]) is split
//! across clients and partially masked; each client fills the gaps once with a
//! [`completion`] provider, then trains a cross-modal joint encoder
//! ([`model`]) against a supervised + contrastive + margin objective
//! ([`losses`]) in [`client`]. The [`server`] weights uploads by how similar
//! their probe-set representations are (linear CKA) and aggregates.
//! [`harness`] wires it into configurable experiments.
//!
//! All numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases at the
//! bottom of this file fix the common instantiations.

pub mod autodiff;
pub mod client;
pub mod completion;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod server;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Record64 = datagen::MultiModalRecord<f64>;
pub type Record32 = datagen::MultiModalRecord<f32>;
pub type JointParams64 = model::JointModuleParams<f64>;
pub type JointParams32 = model::JointModuleParams<f32>;
pub type ClassifierParams64 = model::ClassifierParams<f64>;
pub type ClassifierParams32 = model::ClassifierParams<f32>;
pub type FrozenEncoders64 = model::FrozenEncoders<f64>;
pub type FrozenEncoders32 = model::FrozenEncoders<f32>;
pub type ClientUpdate64 = client::ClientUpdate<f64>;
pub type ClientUpdate32 = client::ClientUpdate<f32>;
