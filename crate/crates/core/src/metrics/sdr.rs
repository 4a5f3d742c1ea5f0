use crate::signal::Waveform;
use crate::{Error, Result};

/// Error-energy floor; bounds the SDR of a perfect estimate.
pub const SDR_ERROR_FLOOR: f64 = 1e-10;

/// Plain energy-ratio SDR in dB: `10 log10(sum y^2 / max(floor, sum (y - y_hat)^2))`.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    let (y, e) = (reference.samples(), estimate.samples());
    if y.len() != e.len() {
        return Err(Error::Shape(format!("reference {} vs estimate {} samples", y.len(), e.len())));
    }
    let signal: f64 = y.iter().map(|v| v * v).sum();
    if signal <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let error: f64 = y.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(10.0 * (signal / error.max(SDR_ERROR_FLOOR)).log10())
}
