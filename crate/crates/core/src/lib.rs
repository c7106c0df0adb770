//! Energy-aware reconfigurable edge runtime.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod domain;
pub mod energy;
pub mod metrics;
pub mod net;
pub mod nodesim;
pub mod protocol;
pub mod qrm;
pub mod sim;
