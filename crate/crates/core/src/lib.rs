//! Stochastic recurrent neural network: a generative model that stacks a
//! nonlinear Gaussian state space layer on a deterministic GRU layer,
//! trained by maximizing a structured variational evidence lower bound.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tensor`]), network building blocks ([`nn`]), the generative model
//! ([`generative`]) and its structured inference network ([`inference`]),
//! the ELBO and training loop ([`elbo`], [`train`]), exact verification
//! oracles ([`oracle`]) and dataset plumbing ([`data`]).

pub mod config;
pub mod data;
pub mod elbo;
pub mod generative;
pub mod inference;
pub mod nn;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, ParamStore, Tensor, TensorError, Var};
