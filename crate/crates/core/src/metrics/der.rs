//! Overlap-aware diarization error rate with a no-score collar.
//!
//! Time within `collar` of any reference boundary is excluded. On the scored
//! remainder a region with `r` reference and `h` hypothesis speakers
//! contributes `r` units of reference time, `max(0, r - h)` missed,
//! `max(0, h - r)` false alarm and `min(r, h) - correct` confusion, where
//! `correct` counts reference speakers whose mapped hypothesis speaker is also
//! active. The speaker mapping maximises total correctly attributed time.

use serde::{Deserialize, Serialize};

use super::assignment::hungarian;
use super::rttm::DiarAnnotation;
use crate::{Error, Result};

pub const DEFAULT_COLLAR_S: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerReport {
    pub der: f64,
    pub missed_s: f64,
    pub false_alarm_s: f64,
    pub confusion_s: f64,
    pub scored_reference_s: f64,
    /// `(reference speaker, hypothesis speaker)` pairs of the optimal mapping.
    pub mapping: Vec<(String, String)>,
}

fn merged_zones(reference: &DiarAnnotation, collar: f64) -> Vec<(f64, f64)> {
    if collar <= 0.0 {
        return Vec::new();
    }
    let mut zones: Vec<(f64, f64)> = reference
        .tracks
        .iter()
        .flat_map(|t| [(t.start - collar, t.start + collar), (t.end - collar, t.end + collar)])
        .collect();
    zones.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for z in zones {
        match merged.last_mut() {
            Some(last) if z.0 <= last.1 => last.1 = last.1.max(z.1),
            _ => merged.push(z),
        }
    }
    merged
}

pub fn der(reference: &DiarAnnotation, hypothesis: &DiarAnnotation, collar: f64) -> Result<DerReport> {
    let ref_spk = reference.speakers();
    let hyp_spk = hypothesis.speakers();
    let zones = merged_zones(reference, collar);

    let mut points: Vec<f64> = reference
        .tracks
        .iter()
        .chain(&hypothesis.tracks)
        .flat_map(|t| [t.start, t.end])
        .chain(zones.iter().flat_map(|z| [z.0, z.1]))
        .collect();
    points.sort_by(f64::total_cmp);
    points.dedup();

    let active = |ann: &DiarAnnotation, names: &[String], t: f64| -> Vec<usize> {
        let mut idx: Vec<usize> = ann
            .tracks
            .iter()
            .filter(|tr| tr.start <= t && t < tr.end)
            .map(|tr| names.binary_search(&tr.speaker).expect("speaker listed"))
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    };

    let mut overlap = vec![vec![0.0; hyp_spk.len()]; ref_spk.len()];
    let (mut scored, mut missed, mut fa, mut matched) = (0.0, 0.0, 0.0, 0.0);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let d = b - a;
        if d <= 0.0 {
            continue;
        }
        let mid = 0.5 * (a + b);
        if zones.iter().any(|z| z.0 <= mid && mid < z.1) {
            continue;
        }
        let r = active(reference, &ref_spk, mid);
        let h = active(hypothesis, &hyp_spk, mid);
        scored += r.len() as f64 * d;
        missed += r.len().saturating_sub(h.len()) as f64 * d;
        fa += h.len().saturating_sub(r.len()) as f64 * d;
        matched += r.len().min(h.len()) as f64 * d;
        for &i in &r {
            for &j in &h {
                overlap[i][j] += d;
            }
        }
    }
    if scored <= 0.0 {
        return Err(Error::UndefinedDer);
    }
    let cost: Vec<Vec<f64>> = overlap.iter().map(|row| row.iter().map(|v| -v).collect()).collect();
    let assignment = if hyp_spk.is_empty() { vec![None; ref_spk.len()] } else { hungarian(&cost) };
    let mut correct = 0.0;
    let mut mapping = Vec::new();
    for (i, j) in assignment.iter().enumerate() {
        if let Some(j) = *j {
            correct += overlap[i][j];
            mapping.push((ref_spk[i].clone(), hyp_spk[j].clone()));
        }
    }
    let confusion = (matched - correct).max(0.0);
    Ok(DerReport {
        der: (missed + fa + confusion) / scored,
        missed_s: missed,
        false_alarm_s: fa,
        confusion_s: confusion,
        scored_reference_s: scored,
        mapping,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::assignment::permute;
    use crate::metrics::Track;
    use rand::{Rng, SeedableRng};

    fn ann(tracks: &[(&str, f64, f64)]) -> DiarAnnotation {
        DiarAnnotation::new(
            tracks
                .iter()
                .map(|&(s, a, b)| Track {
                    speaker: s.into(),
                    start: a,
                    end: b,
                })
                .collect(),
        )
        .unwrap()
    }

    /// 10 ms frame scorer with brute-force speaker mapping.
    fn frame_oracle(r: &DiarAnnotation, h: &DiarAnnotation, collar: f64) -> f64 {
        let end = r.tracks.iter().chain(&h.tracks).map(|t| t.end).fold(0.0, f64::max) + 1.0;
        let rs = r.speakers();
        let hs = h.speakers();
        let on = |a: &DiarAnnotation, s: &str, t: f64| a.tracks.iter().any(|x| x.speaker == s && x.start <= t && t < x.end);
        let frames = (end / 0.01).ceil() as usize;
        let mut rows = Vec::new();
        for i in 0..frames {
            let t = (i as f64 + 0.5) * 0.01;
            let in_collar = r
                .tracks
                .iter()
                .any(|x| (t - x.start).abs() < collar || (t - x.end).abs() < collar);
            if in_collar {
                continue;
            }
            let ra: Vec<bool> = rs.iter().map(|s| on(r, s, t)).collect();
            let ha: Vec<bool> = hs.iter().map(|s| on(h, s, t)).collect();
            rows.push((ra, ha));
        }
        let n = rs.len().max(hs.len());
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        let mut total_ref = 0.0;
        for (ra, _) in &rows {
            total_ref += ra.iter().filter(|&&x| x).count() as f64;
        }
        permute(&mut perm, 0, &mut |p| {
            let mut err = 0.0;
            for (ra, ha) in &rows {
                let nr = ra.iter().filter(|&&x| x).count();
                let nh = ha.iter().filter(|&&x| x).count();
                let correct = (0..rs.len())
                    .filter(|&i| ra[i] && p[i] < hs.len() && ha[p[i]])
                    .count();
                err += (nr.max(nh) - correct) as f64;
            }
            best = best.min(err);
        });
        best / total_ref
    }

    #[test]
    fn identical_annotations_score_zero() {
        let a = ann(&[("a", 0.0, 3.0), ("b", 2.0, 5.0)]);
        assert_eq!(der(&a, &a, 0.25).unwrap().der, 0.0);
    }

    #[test]
    fn truncated_hypothesis_matches_frame_oracle() {
        let r = ann(&[("spk1", 0.0, 10.0)]);
        let h = ann(&[("spk1", 0.0, 9.0)]);
        let rep = der(&r, &h, 0.25).unwrap();
        // scored [0.25, 9.75] = 9.5 s, missed [9.0, 9.75] = 0.75 s
        assert!((rep.der - 0.75 / 9.5).abs() < 1e-12);
        assert!((rep.der - frame_oracle(&r, &h, 0.25)).abs() < 1e-3);
    }

    #[test]
    fn swapped_labels_score_zero() {
        let r = ann(&[("spk1", 0.0, 5.0), ("spk2", 5.0, 10.0)]);
        let h = ann(&[("spk2", 0.0, 5.0), ("spk1", 5.0, 10.0)]);
        assert_eq!(der(&r, &h, 0.25).unwrap().der, 0.0);
    }

    #[test]
    fn empty_reference_is_undefined() {
        let h = ann(&[("a", 0.0, 1.0)]);
        assert!(matches!(der(&DiarAnnotation::default(), &h, 0.25), Err(Error::UndefinedDer)));
    }

    #[test]
    fn false_alarm_can_exceed_one() {
        let r = ann(&[("a", 0.0, 1.0)]);
        let h = ann(&[("a", 0.0, 1.0), ("b", 0.0, 10.0), ("c", 0.0, 10.0)]);
        assert!(der(&r, &h, 0.0).unwrap().der > 1.0);
    }

    #[test]
    fn random_annotations_agree_with_frame_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut random = |n_spk: usize| {
            let mut tracks = Vec::new();
            for s in 0..n_spk {
                // boundaries on the 10 ms grid so frame scoring is exact
                let mut t: u32 = rng.gen_range(0..200);
                for _ in 0..rng.gen_range(1..4) {
                    let d = rng.gen_range(30..300);
                    tracks.push(Track {
                        speaker: format!("s{s}"),
                        start: t as f64 / 100.0,
                        end: (t + d) as f64 / 100.0,
                    });
                    t += d + rng.gen_range(20..200);
                }
            }
            DiarAnnotation::new(tracks).unwrap()
        };
        for _ in 0..100 {
            let r = random(3);
            let h = random(2);
            let d = der(&r, &h, 0.25).unwrap().der;
            let o = frame_oracle(&r, &h, 0.25);
            assert!((d - o).abs() < 1e-9, "{d} vs {o}");
        }
    }
}
