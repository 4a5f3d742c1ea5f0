//! Enrollment-free speaker discovery: fixed windows, overlap filtering,
//! spectral clustering of window embeddings and cluster centroids.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{mean_embed, SpanEncoder, SpeakerEmbedding};
use crate::metrics::DiarAnnotation;
use crate::signal::Waveform;
use crate::{rng, Error, Result};

pub const WINDOW_S: f64 = 2.0;
/// A trailing partial window is kept when at least this long.
pub const MIN_TAIL_S: f64 = 1.0;
pub const K_MAX: usize = 8;
pub const KMEANS_RESTARTS: usize = 50;
/// Frame length used when asking a detector about a window.
pub const DETECTOR_FRAME_S: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start_s: f64,
    pub end_s: f64,
}

/// Contiguous `win_s` windows; a final partial window survives if it is at
/// least [`MIN_TAIL_S`] long.
pub fn extract_windows(x: &Waveform, win_s: f64) -> Vec<Window> {
    let sr = x.sample_rate() as f64;
    let step = (win_s * sr).round() as usize;
    let min_tail = (MIN_TAIL_S * sr).round() as usize;
    let mut out = Vec::new();
    let mut a = 0;
    while a < x.len() && step > 0 {
        let b = (a + step).min(x.len());
        if b - a == step || b - a >= min_tail {
            out.push(Window {
                start_s: a as f64 / sr,
                end_s: b as f64 / sr,
            });
        }
        a = b;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameClass {
    Single,
    Multi,
    NonSpeech,
}

/// Classifies a short stretch of the recording by how many speakers talk in it.
pub trait OverlapDetector: Send + Sync {
    fn classify(&self, start_s: f64, end_s: f64) -> FrameClass;
}

/// Ground-truth detector: counts reference speakers active at the frame centre.
#[derive(Debug, Clone)]
pub struct OracleOverlapDetector {
    reference: DiarAnnotation,
}

impl OracleOverlapDetector {
    pub fn new(reference: DiarAnnotation) -> Self {
        Self { reference }
    }
}

impl OverlapDetector for OracleOverlapDetector {
    fn classify(&self, start_s: f64, end_s: f64) -> FrameClass {
        let t = 0.5 * (start_s + end_s);
        let mut active: Vec<&str> = self
            .reference
            .tracks
            .iter()
            .filter(|tr| tr.start <= t && t < tr.end)
            .map(|tr| tr.speaker.as_str())
            .collect();
        active.sort_unstable();
        active.dedup();
        match active.len() {
            0 => FrameClass::NonSpeech,
            1 => FrameClass::Single,
            _ => FrameClass::Multi,
        }
    }
}

/// Frames of `frame_s` covering the window (last one may be shorter).
fn window_frames(w: &Window, frame_s: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
    let n = ((w.end_s - w.start_s) / frame_s - 1e-9).ceil().max(1.0) as usize;
    (0..n).map(move |i| {
        let a = w.start_s + i as f64 * frame_s;
        (a, (a + frame_s).min(w.end_s))
    })
}

/// Keeps windows in which strictly more than half of the frames are `Single`.
pub fn overlap_filter(windows: &[Window], det: &dyn OverlapDetector) -> Vec<Window> {
    windows
        .iter()
        .filter(|w| {
            let (mut single, mut total) = (0usize, 0usize);
            for (a, b) in window_frames(w, DETECTOR_FRAME_S) {
                total += 1;
                if det.classify(a, b) == FrameClass::Single {
                    single += 1;
                }
            }
            2 * single > total
        })
        .copied()
        .collect()
}

/// Embeds each window, skipping windows without voiced frames.
pub fn embed_windows(
    x: &Waveform,
    windows: &[Window],
    encoder: &dyn SpanEncoder,
) -> Result<Vec<(Window, SpeakerEmbedding)>> {
    let mut out = Vec::new();
    for w in windows {
        match encoder.encode_span(x, w.start_s, w.end_s) {
            Ok(e) => out.push((*w, e)),
            Err(Error::NoVoicedFrames) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Pairwise cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub values: Array2<f64>,
}

pub fn affinity(es: &[SpeakerEmbedding]) -> AffinityMatrix {
    let n = es.len();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in 0..i {
            let c = es[i].cosine(&es[j]).clamp(-1.0, 1.0);
            values[[i, j]] = c;
            values[[j, i]] = c;
        }
    }
    AffinityMatrix { values }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k_est: usize,
    /// Set when a requested cluster count could not be populated.
    pub warning: Option<String>,
}

impl ClusterAssignment {
    pub fn members(&self, c: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == c).collect()
    }
}

/// Clusters unit embeddings with cosine affinity clipped to `[0, 1]`.
pub fn spectral_cluster(es: &[SpeakerEmbedding], k: Option<usize>, seed: u64) -> Result<ClusterAssignment> {
    if es.len() < 2 {
        return Err(Error::Config(format!("clustering needs at least 2 embeddings, got {}", es.len())));
    }
    let a = affinity(es).values.mapv(|v| v.max(0.0));
    spectral_cluster_affinity(&a, k, seed)
}

/// Ng-Jordan-Weiss spectral clustering of a non-negative symmetric affinity.
/// Without `k`, the count is the largest gap among the smallest `K_MAX + 1`
/// eigenvalues of the normalised Laplacian.
pub fn spectral_cluster_affinity(a: &Array2<f64>, k: Option<usize>, seed: u64) -> Result<ClusterAssignment> {
    let n = a.nrows();
    if n < 2 || a.ncols() != n {
        return Err(Error::Shape(format!("affinity must be square with n >= 2, got {:?}", a.dim())));
    }
    if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("affinity must be finite and non-negative".into()));
    }
    let degree: Vec<f64> = a.rows().into_iter().map(|r| r.sum()).collect();
    let inv_sqrt: Vec<f64> = degree.iter().map(|&d| if d > 0.0 { d.sqrt().recip() } else { 0.0 }).collect();
    let lap = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * a[[i, j]] * inv_sqrt[j]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]).then(i.cmp(&j)));
    let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();

    let mut warning = None;
    let k = match k {
        Some(0) => return Err(Error::Config("cluster count must be positive".into())),
        Some(k) if k > n => {
            warning = Some(format!("requested {k} clusters for {n} embeddings"));
            n
        }
        Some(k) => k,
        None => {
            let top = K_MAX.min(n - 1);
            let mut best = (1, f64::NEG_INFINITY);
            for c in 1..=top {
                let gap = vals[c] - vals[c - 1];
                if gap > best.1 + 1e-12 {
                    best = (c, gap);
                }
            }
            best.0
        }
    };
    if k == 1 {
        return Ok(ClusterAssignment {
            labels: vec![0; n],
            k_est: 1,
            warning,
        });
    }
    // rows of the leading eigenvectors, normalised to unit length
    let mut points = vec![vec![0.0; k]; n];
    for (c, &idx) in order.iter().take(k).enumerate() {
        for i in 0..n {
            points[i][c] = eig.eigenvectors[(i, idx)];
        }
    }
    for p in &mut points {
        let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            p.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let labels = canonical_labels(&kmeans(&points, k, seed));
    let used = labels.iter().max().map_or(0, |m| m + 1);
    if used < k {
        let msg = format!("only {used} of {k} requested clusters are populated");
        tracing::warn!("{msg}");
        warning.get_or_insert(msg);
    }
    Ok(ClusterAssignment {
        labels,
        k_est: k,
        warning,
    })
}

/// Relabels clusters in order of first appearance.
fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    labels
        .iter()
        .map(|&l| match map.iter().find(|(from, _)| *from == l) {
            Some(&(_, to)) => to,
            None => {
                let to = map.len();
                map.push((l, to));
                to
            }
        })
        .collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, q) in centroids.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm from k-means++ seeds, best of [`KMEANS_RESTARTS`] runs.
fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut r = rng::stream(seed, &[0xc1, restart as u64]);
        let mut centroids = vec![points[r.gen_range(0..n)].clone()];
        while centroids.len() < k {
            let d: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
            let total: f64 = d.iter().sum();
            let next = if total <= 0.0 {
                r.gen_range(0..n)
            } else {
                let mut u = r.gen_range(0.0..total);
                d.iter()
                    .position(|&v| {
                        u -= v;
                        u < 0.0
                    })
                    .unwrap_or(n - 1)
            };
            centroids.push(points[next].clone());
        }
        let mut labels = vec![usize::MAX; n];
        for _ in 0..100 {
            let new: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
            if new == labels {
                break;
            }
            labels = new;
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
                if members.is_empty() {
                    continue;
                }
                for (j, v) in centroid.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| dist2(p, &centroids[l])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b - 1e-12) {
            best = Some((inertia, labels));
        }
    }
    best.expect("at least one restart").1
}

/// Unit-normalised mean of the cluster members.
pub fn centroid(es: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    mean_embed(es)
}

/// Fraction of items whose cluster's majority truth label matches their own.
pub fn purity(labels: &[usize], truth: &[usize]) -> f64 {
    if labels.is_empty() {
        return 1.0;
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let t = truth.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; t]; k];
    for (&l, &g) in labels.iter().zip(truth) {
        counts[l][g] += 1;
    }
    counts.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum::<usize>() as f64 / labels.len() as f64
}

/// JSON cluster report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub windows: Vec<ReportWindow>,
    pub k_est: usize,
    pub warning: Option<String>,
    /// Overall and per-cluster purity, when ground truth is available.
    pub purity: Option<f64>,
    pub cluster_purity: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub label: usize,
    pub truth: Option<String>,
}

impl ClusterReport {
    pub fn new(windows: &[Window], assignment: &ClusterAssignment, truth: Option<&[String]>) -> Self {
        let (purity_all, per_cluster) = match truth {
            Some(names) => {
                let mut uniq: Vec<&String> = names.iter().collect();
                uniq.sort();
                uniq.dedup();
                let ids: Vec<usize> = names.iter().map(|n| uniq.binary_search(&n).expect("present")).collect();
                let per = (0..assignment.k_est)
                    .map(|c| {
                        let m = assignment.members(c);
                        let l: Vec<usize> = m.iter().map(|_| 0).collect();
                        let t: Vec<usize> = m.iter().map(|&i| ids[i]).collect();
                        purity(&l, &t)
                    })
                    .collect();
                (Some(purity(&assignment.labels, &ids)), Some(per))
            }
            None => (None, None),
        };
        Self {
            windows: windows
                .iter()
                .enumerate()
                .map(|(i, w)| ReportWindow {
                    start_s: w.start_s,
                    end_s: w.end_s,
                    label: assignment.labels[i],
                    truth: truth.map(|t| t[i].clone()),
                })
                .collect(),
            k_est: assignment.k_est,
            warning: assignment.warning.clone(),
            purity: purity_all,
            cluster_purity: per_cluster,
        }
    }
}

/// Reference speaker with the most active time inside the window.
pub fn dominant_speaker(reference: &DiarAnnotation, w: &Window) -> Option<String> {
    let mut best: Option<(String, f64)> = None;
    for spk in reference.speakers() {
        let t: f64 = reference
            .tracks
            .iter()
            .filter(|tr| tr.speaker == spk)
            .map(|tr| (tr.end.min(w.end_s) - tr.start.max(w.start_s)).max(0.0))
            .sum();
        if t > 0.0 && best.as_ref().is_none_or(|(_, b)| t > *b) {
            best = Some((spk, t));
        }
    }
    best.map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Track;
    use rand_distr::{Distribution, Normal};

    fn wav(s: f64) -> Waveform {
        Waveform::zeros((s * 16_000.0) as usize, 16_000)
    }

    fn spans(ws: &[Window]) -> Vec<(f64, f64)> {
        ws.iter().map(|w| (w.start_s, w.end_s)).collect()
    }

    #[test]
    fn windows_keep_tails_of_at_least_one_second() {
        assert_eq!(spans(&extract_windows(&wav(6.0), 2.0)), vec![(0.0, 2.0), (2.0, 4.0), (4.0, 6.0)]);
        assert_eq!(spans(&extract_windows(&wav(5.0), 2.0)), vec![(0.0, 2.0), (2.0, 4.0), (4.0, 5.0)]);
        assert_eq!(spans(&extract_windows(&wav(4.5), 2.0)), vec![(0.0, 2.0), (2.0, 4.0)]);
    }

    struct Always(FrameClass);
    impl OverlapDetector for Always {
        fn classify(&self, _: f64, _: f64) -> FrameClass {
            self.0
        }
    }

    #[test]
    fn filter_with_constant_detectors() {
        let ws = extract_windows(&wav(6.0), 2.0);
        assert_eq!(overlap_filter(&ws, &Always(FrameClass::Single)), ws);
        assert!(overlap_filter(&ws, &Always(FrameClass::Multi)).is_empty());
    }

    #[test]
    fn oracle_filter_drops_mostly_overlapped_windows() {
        let track = |s: &str, a: f64, b: f64| Track { speaker: s.into(), start: a, end: b };
        let reference = DiarAnnotation::new(vec![track("a", 0.0, 7.1), track("b", 3.1, 12.0)]).unwrap();
        let det = OracleOverlapDetector::new(reference.clone());
        let ws = extract_windows(&wav(12.0), 2.0);
        let kept = overlap_filter(&ws, &det);
        // label-based overlap fraction per window
        let expected: Vec<Window> = ws
            .iter()
            .filter(|w| {
                let ov = (w.end_s.min(7.1) - w.start_s.max(3.1)).max(0.0);
                ov / (w.end_s - w.start_s) <= 0.5
            })
            .copied()
            .collect();
        assert_eq!(kept, expected);
        assert_eq!(spans(&kept), vec![(0.0, 2.0), (2.0, 4.0), (8.0, 10.0), (10.0, 12.0)]);
    }

    fn blob(center: &[f64], n: usize, seed: u64) -> Vec<SpeakerEmbedding> {
        let mut r = rng::stream(seed, &[]);
        let noise = Normal::new(0.0, 0.05).unwrap();
        (0..n)
            .map(|_| SpeakerEmbedding::normalized(center.iter().map(|c| c + noise.sample(&mut r)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn two_orthogonal_blobs_split_perfectly() {
        let mut es = blob(&[1.0, 0.0, 0.0, 0.0], 10, 1);
        es.extend(blob(&[0.0, 1.0, 0.0, 0.0], 10, 2));
        let a = spectral_cluster(&es, None, 0).unwrap();
        assert_eq!(a.k_est, 2);
        let truth: Vec<usize> = (0..20).map(|i| i / 10).collect();
        assert_eq!(purity(&a.labels, &truth), 1.0);
        assert_eq!(a.labels, truth);
    }

    #[test]
    fn identical_embeddings_form_one_cluster() {
        let e = SpeakerEmbedding::normalized(vec![0.3, 0.4, 0.5]).unwrap();
        let a = spectral_cluster(&vec![e; 6], None, 0).unwrap();
        assert_eq!(a.k_est, 1);
        assert!(a.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn permutation_equivariance_and_scale_invariance() {
        let mut es = blob(&[1.0, 0.0, 0.0], 6, 3);
        es.extend(blob(&[0.0, 1.0, 0.0], 6, 4));
        es.extend(blob(&[0.0, 0.0, 1.0], 6, 5));
        let a = spectral_cluster(&es, None, 1).unwrap();
        assert_eq!(a.k_est, 3);
        let perm: Vec<usize> = (0..18).map(|i| (i * 7) % 18).collect();
        let pes: Vec<_> = perm.iter().map(|&i| es[i].clone()).collect();
        let b = spectral_cluster(&pes, None, 1).unwrap();
        // same partition up to relabelling
        for i in 0..18 {
            for j in 0..18 {
                assert_eq!(b.labels[i] == b.labels[j], a.labels[perm[i]] == a.labels[perm[j]]);
            }
        }
        let aff = affinity(&es).values.mapv(|v| v.max(0.0));
        let scaled = spectral_cluster_affinity(&(&aff * 3.5), None, 1).unwrap();
        assert_eq!(scaled.labels, a.labels);
    }

    #[test]
    fn requested_count_is_honoured_or_flagged() {
        let mut es = blob(&[1.0, 0.0], 5, 6);
        es.extend(blob(&[0.0, 1.0], 5, 7));
        let a = spectral_cluster(&es, Some(2), 0).unwrap();
        assert_eq!(a.k_est, 2);
        assert!(a.warning.is_none());
        let same = vec![SpeakerEmbedding::normalized(vec![1.0, 0.0]).unwrap(); 4];
        let b = spectral_cluster(&same, Some(3), 0).unwrap();
        let used = b.labels.iter().max().unwrap() + 1;
        assert!(used == 3 || b.warning.is_some());
        let c = spectral_cluster(&same, Some(6), 0).unwrap();
        assert!(c.warning.is_some());
        assert!(spectral_cluster(&same[..1], None, 0).is_err());
    }

    #[test]
    fn affinity_is_symmetric_with_unit_diagonal() {
        let es = blob(&[1.0, 1.0, -1.0], 5, 8);
        let a = affinity(&es).values;
        for i in 0..5 {
            assert_eq!(a[[i, i]], 1.0);
            for j in 0..5 {
                assert!((a[[i, j]] - a[[j, i]]).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&a[[i, j]]));
            }
        }
    }

    #[test]
    fn centroid_cases() {
        let e = SpeakerEmbedding::normalized(vec![0.6, 0.8]).unwrap();
        assert_eq!(centroid(std::slice::from_ref(&e)).unwrap(), e);
        let a = SpeakerEmbedding::normalized(vec![1.0, 1.0]).unwrap();
        let b = SpeakerEmbedding::normalized(vec![1.0, -1.0]).unwrap();
        let c = centroid(&[a, b]).unwrap();
        assert!((c.values()[0] - 1.0).abs() < 1e-12 && c.values()[1].abs() < 1e-12);
        let target = SpeakerEmbedding::normalized((0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut r = rng::stream(12, &[]);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let copies: Vec<_> = (0..100)
            .map(|_| {
                SpeakerEmbedding::normalized(target.values().iter().map(|v| v + noise.sample(&mut r)).collect())
                    .unwrap()
            })
            .collect();
        assert!(centroid(&copies).unwrap().cosine(&target) > 0.99);
    }

    #[test]
    fn report_serialises_with_purity() {
        let mut es = blob(&[1.0, 0.0], 3, 1);
        es.extend(blob(&[0.0, 1.0], 3, 2));
        let a = spectral_cluster(&es, Some(2), 0).unwrap();
        let ws: Vec<Window> = (0..6).map(|i| Window { start_s: 2.0 * i as f64, end_s: 2.0 * i as f64 + 2.0 }).collect();
        let truth: Vec<String> = (0..6).map(|i| if i < 3 { "x".into() } else { "y".into() }).collect();
        let rep = ClusterReport::new(&ws, &a, Some(&truth));
        assert_eq!(rep.purity, Some(1.0));
        let json = serde_json::to_string(&rep).unwrap();
        let back: ClusterReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}
