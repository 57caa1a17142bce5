//! Weighted-data-space beamforming and DAMAS deconvolution for microphone arrays.
//!
//! Data vectors are vectorized cross-spectral matrices (column-major, `j = l·M + m`).
//! A weighting `W` turns the data space into an inner-product space; the
//! conventional, inverse-variance, shading, robust adaptive and Capon
//! beamformers are all least-squares fits of a point-source model in such a space.
//!
//! Time-harmonic fields use the `e^{+iωt}` convention. Frequencies passed to the
//! library are angular (rad/s); the command-line tool takes Hz.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beamforming;
pub mod covariance;
pub mod damas;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod spectra;
pub mod synth;
pub mod weighting;

pub use error::{Error, Result};
pub use geometry::{build_focus_grid, FlowField, FocusGrid, Lattice, MicArray, Point3};
pub use weighting::{build_weighting, SelectionMask, WeightingChoice, WeightingScheme};
