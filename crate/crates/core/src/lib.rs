//! Enrollment-free target-speaker separation and diarization.
//!
//! The crate is organised the way the processing chain runs:
//!
//! - [`signal`]: waveforms, STFT/iSTFT, masking, WAV I/O
//! - [`mixture`]: toy speaker corpus, overlapped mixture synthesis, labels
//! - [`embed`]: speaker encoders and the noisy-embedding sampling strategies
//! - [`cluster`]: window extraction, overlap filtering, spectral clustering
//! - [`tsnet`]: the two-stage speaker-conditioned network and its training loop
//! - [`losses`]: BCE, time-domain reconstruction and overlapping spectral losses
//! - [`pipeline`]: framed VAD, segment merging, concatenation and full inference
//! - [`metrics`]: DER, SDR, cpWER and RTTM I/O

pub mod cluster;
pub mod embed;
mod error;
pub mod losses;
pub mod metrics;
pub mod mixture;
pub mod pipeline;
pub mod rng;
pub mod signal;
pub mod tsnet;

pub use error::{Error, Result};
