use ndarray::Array2;

use crate::signal::Spectrogram;

/// Added to magnitudes before the logarithm.
pub const FEATURE_FLOOR: f64 = 1e-6;

/// `ln(|X| + floor)`, normalised to zero mean and unit variance over the
/// whole utterance (one mean and one deviation for all bins and frames).
pub fn log_magnitude_features(spec: &Spectrogram) -> Array2<f64> {
    let mut x = spec.magnitude().mapv(|m| (m + FEATURE_FLOOR).ln());
    let n = x.len().max(1) as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    x.mapv_inplace(|v| (v - mean) / std);
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, StftConfig, Waveform, WindowKind};

    #[test]
    fn features_are_standardised_and_gain_invariant() {
        let x: Vec<f64> = (0..4000).map(|n| (n as f64 * 0.3).sin() * (1.0 + (n % 7) as f64)).collect();
        let cfg = StftConfig::new(256, 128, WindowKind::SqrtHann).unwrap();
        let a = log_magnitude_features(&stft(&Waveform::new(x.clone(), 16_000).unwrap(), &cfg).unwrap());
        let mean = a.mean().unwrap();
        let var = a.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        assert_eq!(a.dim(), (1 + 4000 / 128, 129));
        let loud: Vec<f64> = x.iter().map(|v| v * 100.0).collect();
        let b = log_magnitude_features(&stft(&Waveform::new(loud, 16_000).unwrap(), &cfg).unwrap());
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-3, "{diff}");
    }
}
