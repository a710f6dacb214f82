//! Continuous speech separation engine built around a skipping-memory LSTM
//! separator.
//!
//! The crate is self-contained: a minimal autodiff tensor ([`numerics`]),
//! the TasNet-style building blocks ([`layers`]), the SkiM separator with
//! frame-by-frame streaming ([`skim`]), a dual-path RNN baseline
//! ([`dprnn`]), Graph-PIT training loss and SDR metrics ([`graphpit`]), a
//! deterministic synthetic meeting simulator ([`meetsim`]), a desk-scale
//! trainer ([`train`]) and an analytic/empirical compute profiler
//! ([`profile`]).

pub mod numerics;

pub mod layers;

pub mod skim;

pub mod dprnn;

pub mod graphpit;

pub mod meetsim;

pub mod train;

pub mod profile;
