//! Concatenated minimum-permutation word error rate.

use serde::{Deserialize, Serialize};

use super::assignment::{exhaustive_assignment, hungarian};
use crate::{Error, Result};

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Word-level Levenshtein distance.
pub fn edit_distance<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> usize {
    let m = hypothesis.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r.as_ref() != h.as_ref());
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Per-speaker (reference) or per-channel (hypothesis) word sequences.
/// Multiple entries with the same name are concatenated in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSet {
    pub entries: Vec<(String, Vec<String>)>,
}

impl TranscriptSet {
    pub fn from_texts<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        let mut set = Self::default();
        for (name, text) in items {
            set.push(name, normalize_words(text));
        }
        set
    }

    pub fn push(&mut self, name: &str, words: Vec<String>) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some((_, w)) => w.extend(words),
            None => self.entries.push((name.to_string(), words)),
        }
    }

    pub fn total_words(&self) -> usize {
        self.entries.iter().map(|(_, w)| w.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignmentMethod {
    /// Exhaustive up to 8 streams, Hungarian beyond.
    Auto,
    Exhaustive,
    Hungarian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpwerReport {
    pub cpwer: f64,
    pub errors: usize,
    pub reference_words: usize,
    /// `(reference speaker, hypothesis channel)`; `None` marks an unmatched side.
    pub assignment: Vec<(Option<String>, Option<String>)>,
}

pub fn cpwer(reference: &TranscriptSet, hypothesis: &TranscriptSet) -> Result<CpwerReport> {
    cpwer_with(reference, hypothesis, AssignmentMethod::Auto)
}

pub fn cpwer_with(
    reference: &TranscriptSet,
    hypothesis: &TranscriptSet,
    method: AssignmentMethod,
) -> Result<CpwerReport> {
    if reference.entries.is_empty() {
        return Err(Error::Empty("reference transcript set"));
    }
    let reference_words = reference.total_words();
    if reference_words == 0 {
        return Err(Error::Empty("reference words"));
    }
    let n = reference.entries.len().max(hypothesis.entries.len());
    fn words(set: &TranscriptSet, i: usize) -> &[String] {
        set.entries.get(i).map_or(&[], |(_, w)| &w[..])
    }
    // square matrix; padding rows/columns stand for an empty stream
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| edit_distance(words(reference, i), words(hypothesis, j)) as f64)
                .collect()
        })
        .collect();
    let use_exhaustive = match method {
        AssignmentMethod::Auto => n <= 8,
        AssignmentMethod::Exhaustive => true,
        AssignmentMethod::Hungarian => false,
    };
    let solved = if use_exhaustive { exhaustive_assignment(&cost) } else { hungarian(&cost) };
    let mut errors = 0usize;
    let mut assignment = Vec::new();
    for (i, j) in solved.iter().enumerate() {
        let j = j.expect("square assignment is complete");
        errors += cost[i][j] as usize;
        let name = |set: &TranscriptSet, k: usize| set.entries.get(k).map(|(n, _)| n.clone());
        let pair = (name(reference, i), name(hypothesis, j));
        if pair.0.is_some() || pair.1.is_some() {
            assignment.push(pair);
        }
    }
    Ok(CpwerReport {
        cpwer: errors as f64 / reference_words as f64,
        errors,
        reference_words,
        assignment,
    })
}
