//! Test-time adaptation with conjugate pseudo-labels.
//!
//! The numeric core ([`tensor`], [`autodiff`], [`losses`], [`models`],
//! [`optim`], [`tta`]) is generic over [`Scalar`] (`f32` or `f64`). The data
//! generator, the learnt-loss module and the experiment pipelines work in
//! `f64`.

pub mod autodiff;
pub mod checks;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod losses;
pub mod meta;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod tta;

pub use autodiff::{grad_check, Graph, Var};
pub use datagen::{Dataset, GaussianShiftSpec, ShiftBenchmark};
pub use error::{Error, Result};
pub use losses::{make_loss, LabelVector, LossKind, LossParams, LossSpec};
pub use meta::{MetaConfig, MetaLossNet};
pub use models::{Architecture, BnStats, MaskMode, Model, ParamMask, TrainConfig};
pub use optim::{Optimizer, OptimizerKind};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use tta::{adapt_online, grid_search, tta_objective, tta_step, Batch, Method, OnlineReport, TTAConfig};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type LossSpec64 = LossSpec<f64>;
pub type LossSpec32 = LossSpec<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Batch64 = Batch<f64>;
pub type Batch32 = Batch<f32>;
