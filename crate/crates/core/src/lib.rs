//! Dense correspondence toolkit for photographed documents and their clean
//! originals.
//!
//! The crate provides the raster and flow-field substrate ([`image`],
//! [`flow`], [`sample`], [`filter`]), correlation volumes
//! ([`correlation`]), edge-based thin plate spline pre-alignment
//! ([`prealign`]), the synthetic triplet generator ([`synth`]), evaluation
//! metrics ([`metrics`]) and annotation transfer through flows
//! ([`transfer`]).
//!
//! Flow convention: a flow lives on the target grid and `x + f(x)` is the
//! corresponding source location, so `warp(source, f)` is aligned with the
//! target.

pub mod correlation;
pub mod error;
pub mod filter;
pub mod flow;
pub mod image;
pub mod metrics;
pub mod prealign;
pub mod sample;
pub mod synth;
pub mod transfer;

pub use error::{Error, Result};
pub use flow::{compose_flows, invert_flow, read_flow, resize_flow, write_flow, CoordGrid, FlowField};
pub use image::Image;
pub use sample::{bilinear_sample, warp, warp_with, OutOfBounds};
