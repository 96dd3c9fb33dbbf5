//! Analysis of rotary position embedding (RoPE) query/key activations.
//!
//! The crate reads pre-rotation query/key dumps ([`dump`]), summarizes each
//! rotary pair by its mean vectors ([`stats`]), rebuilds the positional part
//! of attention from those means ([`decompose`]) and classifies pairs as
//! rotary offset features against the frequency and angle bounds
//! ([`offset`]). [`report`] turns results into CSV and SVG.

pub mod decompose;
pub mod dump;
pub mod error;
pub mod offset;
pub mod report;
pub mod rope;
pub mod stats;

pub use error::{Error, Result};
pub use rope::{Layout, RopeConfig, RotaryPair};
