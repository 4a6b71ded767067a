//! Simulator and attack toolkit for interrupt-driven single-stepping of a
//! modeled confidential VM: page-fault tracking, Prime+Probe with
//! out-of-order noise, T-table AES-XTS key recovery and instruction latency
//! analysis.

pub mod crypto;
pub mod guest;
pub mod cache;
pub mod channel;
pub mod stepper;
pub mod tracker;
pub mod fixture;
pub mod attack;
pub mod classifier;
pub mod keyrec;
pub mod pipeline;
pub mod latency;
pub mod experiments;
