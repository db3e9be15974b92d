//! Rotation-prediction self-supervision for vision transformers.
//!
//! The crate carries its own reverse-mode autodiff engine ([`tensor`]), the
//! layers of a small ViT ([`nn`], [`vit`]), dataset ingestion ([`data`]), the
//! image/patch rotation pretext task ([`pretext`]), optimisation and
//! checkpoints ([`optim`]) and the evaluation harnesses ([`eval`]).
//!
//! Numeric code is generic over [`Scalar`]; training runs in `f32` and the
//! gradient checks in `f64`. The aliases below name the common choices.

pub mod error;
pub mod scalar;
pub mod nn;
pub mod tensor;
pub mod vit;
pub mod data;
pub mod pretext;
pub mod optim;
pub mod eval;
pub mod config;
pub mod selftest;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, SeededRng, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
