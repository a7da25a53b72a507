//! Structured prediction over sequences of correlated label streams.
//!
//! The model is a fully-connected spatio-temporal conditional random field:
//! every (time step, stream) node carries a label, every ordered pair of
//! nodes carries a pairwise energy, and — in the gated variant — the pairwise
//! energies are low-rank bilinear forms produced from the observation itself.
//! Inference is naive mean field run as coordinate descent on the variational
//! free energy; learning backpropagates through the unrolled update sequence.
//!
//! Modules mirror the pipeline: [`graph`] (instances and chunking),
//! [`energy`] (model parameters and energy evaluation), [`inference`]
//! (mean-field and brute-force oracles), [`learning`] (loss, gradients,
//! training), [`synth`] (planted-context benchmark generator), [`eval`]
//! (relation detection / tagging / recognition metrics), [`io`] (file
//! formats), and [`verify`] (self-check suites shared with the CLI).

pub mod energy;
pub mod error;
pub mod eval;
pub mod graph;
pub mod inference;
pub mod io;
pub mod learning;
mod numeric;
pub mod rng;
pub mod synth;
mod tape;
pub mod verify;

pub use error::{Error, Result};
