//! Event-camera ingestion, spatio-temporal compression of address-event
//! streams into few-step frame tensors, and hybrid spiking networks
//! (synaptic convolution front end + multi-threshold LIF dense layers)
//! trained with hand-derived eligibility-trace gradients.

pub mod checkpoint;
pub mod compress;
pub mod error;
pub mod events;
pub mod network;
pub mod neuron;
pub mod real;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
