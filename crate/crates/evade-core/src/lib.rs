//! Core library for training an API-import malware detector ensemble and
//! attacking it with a conditional generative model that proposes import
//! injections.
//!
//! Modules build on each other roughly bottom-up: `nn` (tensors, autodiff,
//! optimizer), `data`/`synth` (datasets and splits), `classical` (random
//! forest, logistic regression), `representation` (metric-learning encoder),
//! `ensemble` (soft voting and target assignment), `distill` (differentiable
//! proxy), `cvae` (generator), `attack` (injection methods), and `eval`
//! (metrics and reports).

pub mod attack;
pub mod classical;
pub mod cvae;
pub mod data;
pub mod distill;
pub mod ensemble;
pub mod eval;
pub mod nn;
pub mod representation;
pub mod synth;

pub use nn::NnError;
