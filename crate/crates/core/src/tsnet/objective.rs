//! Losses composed with the network, differentiated end to end.

use ndarray::{Array2, Array3, Axis, Zip};

use super::TsNetParams;
use crate::embed::SpeakerEmbedding;
use crate::losses::{bce_vad_grad, l_sep_grad, osl_grad, OslConfig, SepLoss, L_SEP_FLOOR};
use crate::signal::{Spectrogram, Stft, Waveform};
use crate::{Error, Result};

/// Ground truth for one separation example.
#[derive(Debug, Clone)]
pub struct SepTarget {
    pub mix: Spectrogram,
    /// Clean sources, `K x N` with `N` the mixture length.
    pub sources: Array2<f64>,
    /// `|STFT|` of each clean source, `K x T x F`.
    pub ref_mags: Array3<f64>,
}

impl SepTarget {
    pub fn new(mix: &Waveform, sources: &[Waveform], stft: &Stft) -> Result<Self> {
        let n = mix.len();
        if sources.iter().any(|s| s.len() != n) {
            return Err(Error::Shape("sources must match the mixture length".into()));
        }
        let spec = stft.forward(mix);
        let (t, f) = spec.bins.dim();
        let mut src = Array2::zeros((sources.len(), n));
        let mut mags = Array3::zeros((sources.len(), t, f));
        for (k, s) in sources.iter().enumerate() {
            src.row_mut(k).assign(&ndarray::ArrayView1::from(s.samples()));
            mags.index_axis_mut(Axis(0), k).assign(&stft.forward(s).magnitude());
        }
        Ok(Self {
            mix: spec,
            sources: src,
            ref_mags: mags,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.sources.nrows()
    }
}

/// BCE of the VAD head against `K x T` targets, with parameter gradients.
pub fn vad_loss_and_grad(
    p: &TsNetParams,
    x: &Array2<f64>,
    emb: &[SpeakerEmbedding],
    targets: &Array2<f64>,
) -> Result<(f64, TsNetParams)> {
    if p.head_kind != super::HeadKind::Vad {
        return Err(Error::Config("VAD loss needs a VAD head".into()));
    }
    let (out, trace) = p.forward(x, emb)?;
    let pred = out.index_axis(Axis(2), 0).to_owned();
    let (loss, g) = bce_vad_grad(&pred, targets)?;
    let grads = p.backward(&trace, &g.insert_axis(Axis(2)))?;
    Ok((loss, grads))
}

/// Masks (`K x T x F`) and time-domain estimates (`K x N`) for a mixture.
pub fn separate(
    p: &TsNetParams,
    stft: &Stft,
    x: &Array2<f64>,
    emb: &[SpeakerEmbedding],
    mix: &Spectrogram,
) -> Result<(Array3<f64>, Array2<f64>)> {
    let masks = p.forward_sep(x, emb)?;
    let y_hat = reconstruct(stft, &masks, mix)?;
    Ok((masks, y_hat))
}

fn reconstruct(stft: &Stft, masks: &Array3<f64>, mix: &Spectrogram) -> Result<Array2<f64>> {
    let (k, t, f) = masks.dim();
    if (t, f) != mix.bins.dim() {
        return Err(Error::Shape(format!("mask {:?} vs spectrogram {:?}", (t, f), mix.bins.dim())));
    }
    let mut y = Array2::zeros((k, mix.num_samples));
    for ki in 0..k {
        let mut bins = mix.bins.clone();
        Zip::from(&mut bins).and(masks.index_axis(Axis(0), ki)).for_each(|c, &m| *c *= m);
        let w = stft.inverse(&mix.with_bins(bins));
        y.row_mut(ki).assign(&ndarray::ArrayView1::from(w.samples()));
    }
    Ok(y)
}

/// `l_sep + lambda * osl` for the mask head.
pub fn sep_loss(
    p: &TsNetParams,
    stft: &Stft,
    x: &Array2<f64>,
    emb: &[SpeakerEmbedding],
    target: &SepTarget,
    cfg: &OslConfig,
) -> Result<SepLoss> {
    let (masks, y_hat) = separate(p, stft, x, emb, &target.mix)?;
    compose(&masks, &y_hat, target, cfg).map(|(l, _, _)| l)
}

fn compose(
    masks: &Array3<f64>,
    y_hat: &Array2<f64>,
    target: &SepTarget,
    cfg: &OslConfig,
) -> Result<(SepLoss, Array2<f64>, Array3<f64>)> {
    if target.num_speakers() != masks.dim().0 {
        return Err(Error::Shape(format!(
            "{} embeddings for {} target sources",
            masks.dim().0,
            target.num_speakers()
        )));
    }
    let (l, d_y) = l_sep_grad(y_hat, &target.sources, L_SEP_FLOOR)?;
    let mix_mag = target.mix.magnitude();
    let est = masks * &mix_mag.clone().insert_axis(Axis(0));
    let (o, d_est) = osl_grad(&est, &target.ref_mags, cfg)?;
    let loss = SepLoss {
        l_sep: l,
        osl: o,
        combined: l + cfg.lambda * o,
    };
    Ok((loss, d_y, d_est))
}

/// Separation loss with parameter gradients, back through mask, iSTFT and OSL.
pub fn sep_loss_and_grad(
    p: &TsNetParams,
    stft: &Stft,
    x: &Array2<f64>,
    emb: &[SpeakerEmbedding],
    target: &SepTarget,
    cfg: &OslConfig,
) -> Result<(SepLoss, TsNetParams)> {
    if p.head_kind != super::HeadKind::Mask {
        return Err(Error::Config("separation loss needs a mask head".into()));
    }
    let (masks, trace) = p.forward(x, emb)?;
    let y_hat = reconstruct(stft, &masks, &target.mix)?;
    let (loss, d_y, d_est) = compose(&masks, &y_hat, target, cfg)?;
    let (k, t, _) = masks.dim();
    let mix_mag = target.mix.magnitude();
    let mut d_m = Array3::zeros(masks.raw_dim());
    for ki in 0..k {
        let d_row = d_y.row(ki);
        let d_s = stft.inverse_adjoint(d_row.as_slice().expect("contiguous"), t);
        let mut slot = d_m.index_axis_mut(Axis(0), ki);
        Zip::from(&mut slot)
            .and(&d_s)
            .and(&target.mix.bins)
            .and(&mix_mag)
            .and(d_est.index_axis(Axis(0), ki))
            .for_each(|g, ds, xb, &mag, &de| {
                *g = ds.re * xb.re + ds.im * xb.im + cfg.lambda * de * mag;
            });
    }
    let grads = p.backward(&trace, &d_m)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{random_embedding, tiny_dims};
    use super::super::{init_stage2, HeadKind, PARAM_NAMES};
    use super::*;
    use crate::losses::bce_vad;
    use crate::rng;
    use crate::signal::{StftConfig, WindowKind};
    use rand::Rng;

    fn tiny_stft() -> Stft {
        Stft::new(StftConfig::new(16, 4, WindowKind::SqrtHann).unwrap()).unwrap()
    }

    /// Max relative error of analytic vs central-difference gradients.
    fn check(p: &TsNetParams, loss: impl Fn(&TsNetParams) -> f64, grads: &TsNetParams) -> f64 {
        let h = 1e-4;
        let mut worst = 0.0f64;
        for ti in 0..PARAM_NAMES.len() {
            for i in 0..grads.tensors()[ti].len() {
                let mut a = p.clone();
                a.tensors_mut()[ti][i] += h;
                let mut b = p.clone();
                b.tensors_mut()[ti][i] -= h;
                let num = (loss(&a) - loss(&b)) / (2.0 * h);
                let ana = grads.tensors()[ti][i];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn setup(seed: u64) -> (Array2<f64>, Vec<SpeakerEmbedding>, SepTarget) {
        let mut r = rng::stream(seed, &[2]);
        let stft = tiny_stft();
        let n = 44;
        let sources: Vec<Waveform> = (0..2)
            .map(|_| Waveform::new((0..n).map(|_| r.gen_range(-0.5..0.5)).collect(), 16_000).unwrap())
            .collect();
        let mix: Vec<f64> = (0..n).map(|i| sources[0].samples()[i] + sources[1].samples()[i]).collect();
        let mix = Waveform::new(mix, 16_000).unwrap();
        let target = SepTarget::new(&mix, &sources, &stft).unwrap();
        let x = super::super::log_magnitude_features(&target.mix);
        let emb = (0..2).map(|_| random_embedding(4, &mut r)).collect();
        (x, emb, target)
    }

    #[test]
    fn vad_gradient_matches_finite_differences() {
        let p = TsNetParams::random(tiny_dims(), HeadKind::Vad, 3).unwrap();
        let (x, emb, _) = setup(1);
        assert_eq!(x.dim(), (12, 9));
        let mut r = rng::stream(5, &[]);
        let targets = Array2::from_shape_fn((2, 12), |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
        let (_, g) = vad_loss_and_grad(&p, &x, &emb, &targets).unwrap();
        let err = check(&p, |q| bce_vad(&q.forward_vad(&x, &emb).unwrap(), &targets).unwrap(), &g);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn separation_gradient_matches_finite_differences() {
        let stft = tiny_stft();
        let p = init_stage2(&TsNetParams::random(tiny_dims(), HeadKind::Vad, 4).unwrap()).unwrap();
        let (x, emb, target) = setup(2);
        for lambda in [0.0, 0.08] {
            let cfg = OslConfig { lambda, ..Default::default() };
            let (_, g) = sep_loss_and_grad(&p, &stft, &x, &emb, &target, &cfg).unwrap();
            let err = check(&p, |q| sep_loss(q, &stft, &x, &emb, &target, &cfg).unwrap().combined, &g);
            assert!(err < 1e-4, "lambda {lambda}: {err}");
        }
    }

    #[test]
    fn replicated_head_gets_gradient_in_every_row() {
        let stft = tiny_stft();
        let p = init_stage2(&TsNetParams::random(tiny_dims(), HeadKind::Vad, 6).unwrap()).unwrap();
        let (x, emb, target) = setup(3);
        let (_, g) = sep_loss_and_grad(&p, &stft, &x, &emb, &target, &OslConfig::default()).unwrap();
        for row in g.head_w.rows() {
            assert!(row.iter().any(|v| v.abs() > 1e-12));
        }
        assert!(g.head_b.iter().all(|v| v.abs() > 1e-12));
    }

    #[test]
    fn unit_masks_reconstruct_the_mixture() {
        let stft = tiny_stft();
        let (_, _, target) = setup(4);
        let masks = Array3::ones((1, 12, 9));
        let y = reconstruct(&stft, &masks, &target.mix).unwrap();
        let mix = target.sources.sum_axis(Axis(0));
        for (a, b) in y.row(0).iter().zip(&mix) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
