//! Self-calibrating BCE, adaptive stochastic label perturbation and a
//! calibration metric suite for dense binary classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`], [`rng`]: value grids and keyed random streams
//! * [`perturb`], [`loss`]: label perturbation and the losses built on it
//! * [`aslp`]: per-sample adaptive perturbation rules
//! * [`metrics`]: ECE variants, over-confidence error, max-F, max-E
//! * [`model`]: a tiny convolutional segmenter with manual backprop
//! * [`synth`]: synthetic in-distribution and out-of-distribution data
//! * [`trainer`]: the two-phase training protocol and evaluation
//! * [`io`]: map files, config files, checkpoints and CSV exports
//! * [`cli`]: the `aslp` command-line tool

pub mod aslp;
pub mod cli;
pub mod error;
pub mod grid;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod par;
pub mod perturb;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Grid, LabelMap, ProbabilityMap};
