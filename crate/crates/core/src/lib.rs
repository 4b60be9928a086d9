//! Point-wise loss training of monotone neural networks.
//!
//! A scalar reverse-mode tape ([`autodiff`]) supports gradients of gradients,
//! which the [`loss`] module uses to penalize negative input derivatives of an
//! MLP ([`model`]) at each training point. [`trainer`] runs minibatch SGD and
//! [`metrics`] measures how monotone a trained model actually is.

pub mod autodiff;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod trainer;
