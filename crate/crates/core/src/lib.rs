//! Synthetic clinical EEG cohort, multitaper spectrogram front end, VQ
//! tokenizer, masked token modeling, cross-modal alignment, summarizer
//! selection and a matched case-control probing benchmark.

pub mod align;
pub mod bench;
pub mod cohortgen;
pub mod dsp;
pub mod error;
pub mod manifest;
pub mod mim;
pub mod nn;
pub mod pipeline;
pub mod profile;
pub mod rng;
pub mod summarize;
pub mod vqtok;

pub use error::{CoreError, Result};
pub use profile::Profile;
