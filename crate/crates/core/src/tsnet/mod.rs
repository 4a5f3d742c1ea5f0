//! Speaker-conditioned network with a swappable head.
//!
//! Per frame: `h = tanh(W2 tanh(W1 x + b1) + b2)`, causally smoothed over time
//! (`s_0 = h_0`, `s_t = a s_{t-1} + (1 - a) h_t`). For each speaker the
//! smoothed latent is concatenated with the speaker embedding and passed
//! through two shared tanh layers, then a sigmoid head with one output row
//! (voice activity) or `F` rows (a time-frequency mask).

mod checkpoint;
mod features;
mod objective;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use features::{log_magnitude_features, FEATURE_FLOOR};
pub use objective::{sep_loss, sep_loss_and_grad, separate, vad_loss_and_grad, SepTarget};
pub use train::{evaluate, train, OptimizerConfig, Objective, TrainConfig, TrainExample, TrainOutcome};

use std::hash::{Hash, Hasher};

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embed::SpeakerEmbedding;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsNetDims {
    /// Input features per frame (`F`), also the number of mask rows.
    pub num_features: usize,
    pub embed_dim: usize,
    pub latent: usize,
    pub max_speakers: usize,
    /// Temporal smoothing coefficient `a` in `[0, 1)`.
    pub smoothing: f64,
}

impl TsNetDims {
    pub fn validate(&self) -> Result<()> {
        if self.num_features == 0 || self.embed_dim == 0 || self.latent == 0 || self.max_speakers == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!("smoothing must lie in [0, 1), got {}", self.smoothing)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Vad,
    Mask,
}

/// Parameters, also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct TsNetParams {
    pub dims: TsNetDims,
    pub head_kind: HeadKind,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w4: Array2<f64>,
    pub b4: Array1<f64>,
    /// `1 x R` for the VAD head, `F x R` for the mask head.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

pub(crate) const PARAM_NAMES: [&str; 10] = ["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "head_w", "head_b"];

impl TsNetParams {
    pub fn zeros(dims: TsNetDims, head_kind: HeadKind) -> Self {
        let (f, e, r) = (dims.num_features, dims.embed_dim, dims.latent);
        let rows = match head_kind {
            HeadKind::Vad => 1,
            HeadKind::Mask => f,
        };
        Self {
            dims,
            head_kind,
            w1: Array2::zeros((r, f)),
            b1: Array1::zeros(r),
            w2: Array2::zeros((r, r)),
            b2: Array1::zeros(r),
            w3: Array2::zeros((r, r + e)),
            b3: Array1::zeros(r),
            w4: Array2::zeros((r, r)),
            b4: Array1::zeros(r),
            head_w: Array2::zeros((rows, r)),
            head_b: Array1::zeros(rows),
        }
    }

    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn random(dims: TsNetDims, head_kind: HeadKind, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims, head_kind);
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, &[0x7e7]));
        for w in [&mut p.w1, &mut p.w2, &mut p.w3, &mut p.w4, &mut p.head_w] {
            let fan_in = w.ncols() as f64;
            let normal = Normal::new(0.0, fan_in.sqrt().recip()).expect("valid std");
            w.iter_mut().for_each(|v| *v = normal.sample(&mut r));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims, self.head_kind)
    }

    pub fn num_outputs(&self) -> usize {
        self.head_w.nrows()
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 10] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
            self.w4.as_slice().expect("standard layout"),
            self.b4.as_slice().expect("standard layout"),
            self.head_w.as_slice().expect("standard layout"),
            self.head_b.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 10] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
            self.w4.as_slice_mut().expect("standard layout"),
            self.b4.as_slice_mut().expect("standard layout"),
            self.head_w.as_slice_mut().expect("standard layout"),
            self.head_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub(crate) fn shapes(&self) -> [Vec<usize>; 10] {
        [
            self.w1.shape().to_vec(),
            self.b1.shape().to_vec(),
            self.w2.shape().to_vec(),
            self.b2.shape().to_vec(),
            self.w3.shape().to_vec(),
            self.b3.shape().to_vec(),
            self.w4.shape().to_vec(),
            self.b4.shape().to_vec(),
            self.head_w.shape().to_vec(),
            self.head_b.shape().to_vec(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Self, c: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
    }

    /// Content hash used to detect traces recorded with other parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.head_kind.hash(&mut h);
        for t in self.tensors() {
            t.len().hash(&mut h);
            t.iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        h.finish()
    }

    fn check_inputs(&self, x: &Array2<f64>, emb: &[SpeakerEmbedding]) -> Result<()> {
        let d = &self.dims;
        if x.ncols() != d.num_features {
            return Err(Error::Shape(format!("expected {} features per frame, got {}", d.num_features, x.ncols())));
        }
        if x.nrows() == 0 {
            return Err(Error::Empty("feature frames"));
        }
        if emb.is_empty() {
            return Err(Error::Empty("speaker embeddings"));
        }
        if emb.len() > d.max_speakers {
            return Err(Error::Shape(format!("{} speakers exceed the maximum of {}", emb.len(), d.max_speakers)));
        }
        if let Some(e) = emb.iter().find(|e| e.dim() != d.embed_dim) {
            return Err(Error::Shape(format!("embedding dim {} != {}", e.dim(), d.embed_dim)));
        }
        Ok(())
    }

    /// Runs the network and returns `K x T x rows` sigmoid outputs with the trace
    /// needed by [`TsNetParams::backward`].
    pub fn forward(&self, x: &Array2<f64>, emb: &[SpeakerEmbedding]) -> Result<(Array3<f64>, ForwardTrace)> {
        self.check_inputs(x, emb)?;
        let (t_len, r) = (x.nrows(), self.dims.latent);
        let h1 = (x.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh);
        let a = self.dims.smoothing;
        let mut sm = h2.clone();
        for t in 1..t_len {
            let prev = sm.row(t - 1).to_owned();
            let mut row = sm.row_mut(t);
            row *= 1.0 - a;
            row.scaled_add(a, &prev);
        }
        let mut out = Array3::zeros((emb.len(), t_len, self.num_outputs()));
        let mut speakers = Vec::with_capacity(emb.len());
        for (k, e) in emb.iter().enumerate() {
            let mut z = Array2::zeros((t_len, r + self.dims.embed_dim));
            z.slice_mut(s![.., ..r]).assign(&sm);
            z.slice_mut(s![.., r..]).assign(&Array1::from(e.values().to_vec()));
            let g1 = (z.dot(&self.w3.t()) + &self.b3).mapv(f64::tanh);
            let g = (g1.dot(&self.w4.t()) + &self.b4).mapv(f64::tanh);
            let y = (g.dot(&self.head_w.t()) + &self.head_b).mapv(sigmoid);
            out.index_axis_mut(Axis(0), k).assign(&y);
            speakers.push(SpeakerTrace { z, g1, g, y });
        }
        let trace = ForwardTrace {
            fingerprint: self.fingerprint(),
            x: x.clone(),
            h1,
            h2,
            speakers,
        };
        Ok((out, trace))
    }

    /// Per-speaker activity probabilities, `K x T`.
    pub fn forward_vad(&self, x: &Array2<f64>, emb: &[SpeakerEmbedding]) -> Result<Array2<f64>> {
        if self.head_kind != HeadKind::Vad {
            return Err(Error::Config("forward_vad needs a VAD head".into()));
        }
        let (out, _) = self.forward(x, emb)?;
        Ok(out.index_axis_move(Axis(2), 0))
    }

    /// Per-speaker masks, `K x T x F`.
    pub fn forward_sep(&self, x: &Array2<f64>, emb: &[SpeakerEmbedding]) -> Result<Array3<f64>> {
        if self.head_kind != HeadKind::Mask {
            return Err(Error::Config("forward_sep needs a mask head".into()));
        }
        Ok(self.forward(x, emb)?.0)
    }

    /// Gradients of a loss given its gradient with respect to the outputs
    /// (`K x T x rows`, as returned by [`TsNetParams::forward`]).
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &Array3<f64>) -> Result<TsNetParams> {
        if trace.fingerprint != self.fingerprint() {
            return Err(Error::StaleTrace("parameters changed since the forward pass".into()));
        }
        let (t_len, r) = (trace.x.nrows(), self.dims.latent);
        let expected = (trace.speakers.len(), t_len, self.num_outputs());
        if grad_out.dim() != expected {
            return Err(Error::Shape(format!("output gradient {:?}, expected {expected:?}", grad_out.dim())));
        }
        let mut gr = self.zeros_like();
        let mut d_sm = Array2::<f64>::zeros((t_len, r));
        for (k, sp) in trace.speakers.iter().enumerate() {
            let dy = grad_out.index_axis(Axis(0), k);
            let d_logit = &dy * &sp.y.mapv(|v| v * (1.0 - v));
            gr.head_w += &d_logit.t().dot(&sp.g);
            gr.head_b += &d_logit.sum_axis(Axis(0));
            let d_g = d_logit.dot(&self.head_w);
            let d_a4 = d_g * sp.g.mapv(|v| 1.0 - v * v);
            gr.w4 += &d_a4.t().dot(&sp.g1);
            gr.b4 += &d_a4.sum_axis(Axis(0));
            let d_g1 = d_a4.dot(&self.w4);
            let d_a3 = d_g1 * sp.g1.mapv(|v| 1.0 - v * v);
            gr.w3 += &d_a3.t().dot(&sp.z);
            gr.b3 += &d_a3.sum_axis(Axis(0));
            let d_z = d_a3.dot(&self.w3);
            d_sm += &d_z.slice(s![.., ..r]);
        }
        // undo the smoothing recursion
        let a = self.dims.smoothing;
        let mut d_h2 = Array2::<f64>::zeros((t_len, r));
        let mut carry = Array1::<f64>::zeros(r);
        for t in (0..t_len).rev() {
            carry = &carry * a + d_sm.row(t);
            if t > 0 {
                d_h2.row_mut(t).assign(&(&carry * (1.0 - a)));
            } else {
                d_h2.row_mut(0).assign(&carry);
            }
        }
        let d_a2 = d_h2 * trace.h2.mapv(|v| 1.0 - v * v);
        gr.w2 += &d_a2.t().dot(&trace.h1);
        gr.b2 += &d_a2.sum_axis(Axis(0));
        let d_h1 = d_a2.dot(&self.w2);
        let d_a1 = d_h1 * trace.h1.mapv(|v| 1.0 - v * v);
        gr.w1 += &d_a1.t().dot(&trace.x);
        gr.b1 += &d_a1.sum_axis(Axis(0));
        Ok(gr)
    }
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    fingerprint: u64,
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    speakers: Vec<SpeakerTrace>,
}

impl ForwardTrace {
    pub fn num_frames(&self) -> usize {
        self.x.nrows()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }
}

#[derive(Debug, Clone)]
struct SpeakerTrace {
    z: Array2<f64>,
    g1: Array2<f64>,
    g: Array2<f64>,
    y: Array2<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Mask-head network whose every row copies the VAD head.
pub fn init_stage2(vad: &TsNetParams) -> Result<TsNetParams> {
    if vad.head_kind != HeadKind::Vad {
        return Err(Error::Config("init_stage2 needs a VAD-head network".into()));
    }
    let f = vad.dims.num_features;
    let mut p = vad.clone();
    p.head_kind = HeadKind::Mask;
    p.head_w = Array2::from_shape_fn((f, vad.dims.latent), |(_, j)| vad.head_w[[0, j]]);
    p.head_b = Array1::from_elem(f, vad.head_b[0]);
    Ok(p)
}
