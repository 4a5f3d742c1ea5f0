//! Waveform and time-frequency primitives.

mod stft;
mod wav;
mod waveform;

pub use stft::{apply_mask, istft, stft, Mask, Spectrogram, Stft, StftConfig, WindowKind};
pub use wav::{read_wav, write_wav};
pub use waveform::{Waveform, DEFAULT_SAMPLE_RATE};

/// Root-mean-square of a slice; zero for an empty slice.
pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Converts a decibel ratio to a linear amplitude factor.
pub fn db_to_amplitude(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}
