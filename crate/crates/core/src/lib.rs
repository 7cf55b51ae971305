//! Latent graph ODEs for irregularly-sampled multi-agent trajectories.
//!
//! A temporal-graph encoder maps partial observations to a Gaussian
//! posterior over each object's initial latent state; a graph neural ODE
//! rolls the latent states forward and a linear decoder reads observations
//! back out. Training maximizes the evidence lower bound.
//!
//! The numeric core is generic over [`scalar::Scalar`]; [`Model64`] and
//! [`Model32`] are the two concrete instantiations.

pub mod autodiff;
pub mod encoder;
mod error;
pub mod eval;
pub mod experiment;
pub mod graph_ode;
pub mod model;
pub mod plot;
pub mod scalar;
pub mod sim;
pub mod task;
pub mod temporal_graph;
pub mod train;

pub use error::{Error, Result};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Model64 = model::Model<f64>;
pub type Model32 = model::Model<f32>;
