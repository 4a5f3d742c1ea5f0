//! Training objectives and their gradients.
//!
//! Every loss has a `*_grad` companion returning the value together with the
//! gradient with respect to the prediction, in the prediction's shape.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;
pub const L_SEP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OslConfig {
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_p() -> u32 {
    1
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_lambda() -> f64 {
    0.08
}

impl Default for OslConfig {
    fn default() -> Self {
        Self {
            p: default_p(),
            epsilon: default_epsilon(),
            lambda: default_lambda(),
        }
    }
}

impl OslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p != 1 && self.p != 2 {
            return Err(Error::Config(format!("OSL norm order must be 1 or 2, got {}", self.p)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("OSL epsilon must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("OSL lambda must be non-negative".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean binary cross-entropy over all `K x T` entries.
pub fn bce_vad(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    bce_vad_grad(pred, target).map(|(v, _)| v)
}

/// Gradient is zero where the prediction was clamped.
pub fn bce_vad_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(pred.shape(), target.shape(), "bce_vad")?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(pred.raw_dim());
    Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &v| {
        let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= v * q.ln() + (1.0 - v) * (1.0 - q).ln();
        if p == q {
            *g = (-v / q + (1.0 - v) / (1.0 - q)) / n;
        }
    });
    Ok((loss / n, grad))
}

/// `log10(max(floor, mean |y_hat - y|))` over `K x N` samples.
pub fn l_sep(y_hat: &Array2<f64>, y: &Array2<f64>, floor: f64) -> Result<f64> {
    l_sep_grad(y_hat, y, floor).map(|(v, _)| v)
}

/// Zero gradient when the floor is active; subgradient 0 at exact equality.
pub fn l_sep_grad(y_hat: &Array2<f64>, y: &Array2<f64>, floor: f64) -> Result<(f64, Array2<f64>)> {
    same_shape(y_hat.shape(), y.shape(), "l_sep")?;
    let n = y_hat.len().max(1) as f64;
    let mae = neumaier_sum(y_hat.iter().zip(y).map(|(a, b)| (a - b).abs())) / n;
    let mut grad = Array2::zeros(y_hat.raw_dim());
    if mae > floor {
        let scale = 1.0 / (n * mae * std::f64::consts::LN_10);
        Zip::from(&mut grad).and(y_hat).and(y).for_each(|g, &a, &b| {
            *g = scale * sign(a - b);
        });
    }
    Ok((mae.max(floor).log10(), grad))
}

/// Compensated summation, so a constant error sums to exactly `n` times itself.
fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0);
    for v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `w(t, f) = sum_k |Y_k| / (max_k |Y_k| + eps)` over `K x T x F` magnitudes.
pub fn overlap_weight(mags: &Array3<f64>, epsilon: f64) -> Array2<f64> {
    let (k, t, f) = mags.dim();
    let mut w = Array2::zeros((t, f));
    for ti in 0..t {
        for fi in 0..f {
            let (mut sum, mut max) = (0.0, 0.0f64);
            for ki in 0..k {
                let v = mags[[ki, ti, fi]];
                sum += v;
                max = max.max(v);
            }
            w[[ti, fi]] = sum / (max + epsilon);
        }
    }
    w
}

/// Overlapping spectral loss on magnitudes, weighted by the ground truth.
pub fn osl(est_mags: &Array3<f64>, ref_mags: &Array3<f64>, cfg: &OslConfig) -> Result<f64> {
    osl_grad(est_mags, ref_mags, cfg).map(|(v, _)| v)
}

pub fn osl_grad(est_mags: &Array3<f64>, ref_mags: &Array3<f64>, cfg: &OslConfig) -> Result<(f64, Array3<f64>)> {
    cfg.validate()?;
    same_shape(est_mags.shape(), ref_mags.shape(), "osl")?;
    let k = est_mags.dim().0.max(1) as f64;
    let w = overlap_weight(ref_mags, cfg.epsilon);
    let mut loss = 0.0;
    let mut grad = Array3::zeros(est_mags.raw_dim());
    for ((idx, &e), &r) in est_mags.indexed_iter().zip(ref_mags.iter()) {
        let (_, t, f) = idx;
        let d = e - r;
        let wt = w[[t, f]];
        if cfg.p == 1 {
            loss += wt * d.abs();
            grad[idx] = wt * sign(d) / k;
        } else {
            loss += wt * d * d;
            grad[idx] = 2.0 * wt * d / k;
        }
    }
    Ok((loss / k, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SepLoss {
    pub l_sep: f64,
    pub osl: f64,
    pub combined: f64,
}

/// `l_sep + lambda * osl`.
pub fn combined_sep_loss(
    y_hat: &Array2<f64>,
    y: &Array2<f64>,
    est_mags: &Array3<f64>,
    ref_mags: &Array3<f64>,
    cfg: &OslConfig,
) -> Result<SepLoss> {
    let l = l_sep(y_hat, y, L_SEP_FLOOR)?;
    let o = osl(est_mags, ref_mags, cfg)?;
    Ok(SepLoss {
        l_sep: l,
        osl: o,
        combined: l + cfg.lambda * o,
    })
}

/// One row of a loss curve. Components that do not apply are left empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub bce: Option<f64>,
    pub l_sep: Option<f64>,
    pub osl: Option<f64>,
    pub combined: f64,
}

pub fn write_loss_csv(path: &Path, rows: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("loss csv: {other:?}")),
    }
}

/// Appends rows to an open CSV loss log as training progresses.
pub struct LossLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> LossLog<W> {
    pub fn new(inner: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(inner),
        }
    }

    pub fn push(&mut self, row: &LossRecord) -> Result<()> {
        self.writer.serialize(row).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let p = Array2::from_elem((2, 5), 0.5);
        for t in [Array2::zeros((2, 5)), Array2::ones((2, 5))] {
            assert!((bce_vad(&p, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_of_perfect_prediction_is_clamp_floor() {
        let t = array![[0.0, 1.0, 1.0], [1.0, 0.0, 0.0]];
        let v = bce_vad(&t, &t).unwrap();
        assert!(v > 0.0 && v < 2e-7, "{v}");
    }

    #[test]
    fn bce_matches_scalar_recomputation() {
        let mut r = rng();
        let p = Array2::from_shape_fn((2, 3), |_| r.gen_range(0.01..0.99));
        let t = Array2::from_shape_fn((2, 3), |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
        let mut acc = 0.0;
        for k in 0..2 {
            for i in 0..3 {
                let (pp, tt): (f64, f64) = (p[[k, i]], t[[k, i]]);
                acc += -(tt * pp.ln() + (1.0 - tt) * (1.0 - pp).ln());
            }
        }
        assert!((bce_vad(&p, &t).unwrap() - acc / 6.0).abs() < 1e-12);
        assert!(bce_vad(&p, &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn l_sep_unit_values() {
        let y = Array2::zeros((2, 8));
        let y_hat = Array2::from_shape_fn((2, 8), |(k, n)| if (k + n) % 2 == 0 { 0.1 } else { -0.1 });
        assert_eq!(l_sep(&y_hat, &y, L_SEP_FLOOR).unwrap(), -1.0);
        assert_eq!(l_sep(&y, &y, L_SEP_FLOOR).unwrap(), -8.0);
        assert!(l_sep(&y, &Array2::zeros((2, 7)), L_SEP_FLOOR).is_err());
    }

    #[test]
    fn l_sep_matches_double_sum() {
        let mut r = rng();
        let y: Array2<f64> = Array2::from_shape_fn((2, 16), |_| r.gen_range(-1.0..1.0));
        let y_hat: Array2<f64> = Array2::from_shape_fn((2, 16), |_| r.gen_range(-1.0..1.0));
        let mut acc = 0.0f64;
        for k in 0..2 {
            for n in 0..16 {
                acc += (y_hat[[k, n]] - y[[k, n]]).abs();
            }
        }
        let oracle = (acc / 32.0).log10();
        assert!((l_sep(&y_hat, &y, L_SEP_FLOOR).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn overlap_weight_canonical_bins() {
        let eps = 1e-8;
        let mags = Array3::from_shape_vec((2, 1, 3), vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let w = overlap_weight(&mags, eps);
        assert!((w[[0, 0]] - 2.0 / (1.0 + eps)).abs() < 1e-15);
        assert!((w[[0, 1]] - 1.0 / (1.0 + eps)).abs() < 1e-15);
        assert_eq!(w[[0, 2]], 0.0);
    }

    #[test]
    fn osl_single_bin_hand_case() {
        let cfg = OslConfig {
            epsilon: 1e-300,
            ..Default::default()
        };
        let y = Array3::from_elem((2, 1, 1), 1.0);
        let y_hat = Array3::from_elem((2, 1, 1), 1.5);
        assert!((osl(&y_hat, &y, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(osl(&y, &y, &OslConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn osl_matches_triple_sum() {
        let mut r = rng();
        let y: Array3<f64> = Array3::from_shape_fn((2, 4, 5), |_| r.gen_range(0.0..2.0));
        let y_hat: Array3<f64> = Array3::from_shape_fn((2, 4, 5), |_| r.gen_range(0.0..2.0));
        for p in [1u32, 2] {
            let cfg = OslConfig {
                p,
                ..Default::default()
            };
            let mut acc = 0.0f64;
            for t in 0..4 {
                for f in 0..5 {
                    let sum = y[[0, t, f]] + y[[1, t, f]];
                    let max = y[[0, t, f]].max(y[[1, t, f]]);
                    let w = sum / (max + cfg.epsilon);
                    for k in 0..2 {
                        acc += w * (y_hat[[k, t, f]] - y[[k, t, f]]).abs().powi(p as i32);
                    }
                }
            }
            assert!((osl(&y_hat, &y, &cfg).unwrap() - acc / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_is_affine_in_lambda() {
        let mut r = rng();
        let y: Array2<f64> = Array2::from_shape_fn((2, 16), |_| r.gen_range(-1.0..1.0));
        let y_hat = Array2::from_shape_fn((2, 16), |_| r.gen_range(-1.0..1.0));
        let ym = Array3::from_shape_fn((2, 3, 4), |_| r.gen_range(0.0..1.0));
        let yhm = Array3::from_shape_fn((2, 3, 4), |_| r.gen_range(0.0..1.0));
        let at = |lambda| {
            combined_sep_loss(&y_hat, &y, &yhm, &ym, &OslConfig { lambda, ..Default::default() }).unwrap()
        };
        assert_eq!(at(0.0).combined, at(0.0).l_sep);
        assert_eq!(OslConfig::default().lambda, 0.08);
        let o = at(0.0).osl;
        assert!((at(0.1).combined - at(0.05).combined - 0.05 * o).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_config() {
        let y = Array3::zeros((1, 1, 1));
        assert!(osl(&y, &y, &OslConfig { p: 3, ..Default::default() }).is_err());
        assert!(osl(&y, &y, &OslConfig { epsilon: 0.0, ..Default::default() }).is_err());
    }

    fn finite_diff_2(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, g: &Array2<f64>) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a.as_slice_mut().unwrap()[idx] += h;
            b.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            let ana = g.as_slice().unwrap()[idx];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "{idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng();
        let p = Array2::from_shape_fn((2, 4), |_| r.gen_range(0.05..0.95));
        let t = Array2::from_shape_fn((2, 4), |_| r.gen_range(0.0..1.0));
        let (_, g) = bce_vad_grad(&p, &t).unwrap();
        finite_diff_2(|x| bce_vad(x, &t).unwrap(), &p, &g);

        let y = Array2::from_shape_fn((2, 6), |_| r.gen_range(-1.0..1.0));
        let y_hat = Array2::from_shape_fn((2, 6), |_| r.gen_range(-1.0..1.0));
        let (_, g) = l_sep_grad(&y_hat, &y, L_SEP_FLOOR).unwrap();
        finite_diff_2(|x| l_sep(x, &y, L_SEP_FLOOR).unwrap(), &y_hat, &g);

        let ym = Array3::from_shape_fn((2, 2, 3), |_| r.gen_range(0.0..1.0));
        let yhm = Array3::from_shape_fn((2, 2, 3), |_| r.gen_range(0.0..1.0));
        for p in [1, 2] {
            let cfg = OslConfig { p, ..Default::default() };
            let (_, g) = osl_grad(&yhm, &ym, &cfg).unwrap();
            let flat = yhm.clone().into_shape_with_order((2, 6)).unwrap();
            let g2 = g.into_shape_with_order((2, 6)).unwrap();
            finite_diff_2(
                |x| osl(&x.clone().into_shape_with_order((2, 2, 3)).unwrap(), &ym, &cfg).unwrap(),
                &flat,
                &g2,
            );
        }
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rows = vec![
            LossRecord { step: 0, epoch: 0, bce: Some(0.7), l_sep: None, osl: None, combined: 0.7 },
            LossRecord { step: 1, epoch: 0, bce: None, l_sep: Some(-1.5), osl: Some(2.0), combined: -1.34 },
        ];
        write_loss_csv(&path, &rows).unwrap();
        assert_eq!(read_loss_csv(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,epoch,bce,l_sep,osl,combined"));
    }

    proptest! {
        #[test]
        fn weight_bounds_and_osl_monotonicity(
            vals in prop::collection::vec(0.0f64..3.0, 12),
            est in prop::collection::vec(0.0f64..3.0, 12),
            bump in 0.0f64..1.0,
            at in 0usize..12,
        ) {
            let y = Array3::from_shape_vec((3, 2, 2), vals).unwrap();
            let w = overlap_weight(&y, 1e-8);
            for &v in &w {
                prop_assert!((0.0..4.0).contains(&v));
            }
            let cfg = OslConfig::default();
            let e = Array3::from_shape_vec((3, 2, 2), est).unwrap();
            let base = osl(&e, &y, &cfg).unwrap();
            prop_assert!(base >= 0.0);
            // push one bin further away from its reference
            let mut e2 = e.clone();
            let slot = e2.as_slice_mut().unwrap();
            let r = y.as_slice().unwrap()[at];
            slot[at] += if slot[at] >= r { bump } else { -bump };
            prop_assert!(osl(&e2, &y, &cfg).unwrap() >= base - 1e-12);
        }
    }
}
