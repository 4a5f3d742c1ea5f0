//! Speaker embeddings: the encoder abstraction, a deterministic toy encoder,
//! externally computed embedding files, and the V1-V4 sampling strategies.

mod encoder;
mod sampling;

pub use encoder::{
    PrecomputedEmbeddings, SpanEncoder, SpeakerEncoder, ToyEncoder, ToyEncoderConfig,
};
pub use sampling::{sample_embedding, EmbeddingVariant, SampledEmbedding, SamplingStrategy, StrategyKind};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Unit-norm speaker embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEmbedding {
    values: Vec<f64>,
}

impl SpeakerEmbedding {
    /// Wraps an already normalised vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let norm = l2(&values);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self { values })
    }

    /// Scales `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        let norm = l2(&values);
        if norm < 1e-12 {
            return Err(Error::DegenerateMean);
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Arithmetic mean re-normalised to unit length.
pub fn mean_embed(es: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    let first = es.first().ok_or(Error::Empty("embedding list"))?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for e in es {
        if e.dim() != dim {
            return Err(Error::Shape(format!("embedding dims {} vs {}", e.dim(), dim)));
        }
        for (a, v) in acc.iter_mut().zip(&e.values) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= es.len() as f64);
    SpeakerEmbedding::normalized(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_single_and_repeated_elements() {
        let e = SpeakerEmbedding::normalized(vec![1.0, 2.0, 2.0]).unwrap();
        assert_eq!(mean_embed(std::slice::from_ref(&e)).unwrap(), e);
        let m = mean_embed(&[e.clone(), e.clone()]).unwrap();
        for (a, b) in m.values().iter().zip(e.values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn antipodal_mean_is_degenerate() {
        let e = SpeakerEmbedding::normalized(vec![0.0, 1.0]).unwrap();
        let neg = SpeakerEmbedding::normalized(vec![0.0, -1.0]).unwrap();
        assert!(matches!(mean_embed(&[e, neg]), Err(Error::DegenerateMean)));
        assert!(matches!(mean_embed(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn rejects_unnormalised_vectors() {
        assert!(SpeakerEmbedding::new(vec![1.0, 1.0]).is_err());
        assert!(SpeakerEmbedding::new(vec![0.6, 0.8]).is_ok());
    }
}
