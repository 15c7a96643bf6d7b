use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::ctc::TokenSequence;
use crate::error::{Error, Result};
use crate::uma::Segmentation;

/// Edit operation counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors over reference length; not capped at 1.
    pub fn rate(&self) -> f64 {
        if self.reference_len == 0 {
            0.0
        } else {
            self.errors() as f64 / self.reference_len as f64
        }
    }
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference_len += o.reference_len;
    }
}

/// Levenshtein alignment with unit costs. Among minimum-distance alignments
/// the one with the most substitutions is reported; for a fixed distance and
/// substitution count the deletion and insertion counts are then determined
/// by the length difference.
pub fn cer(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<ErrorCounts> {
    let (r, h) = (reference.as_slice(), hypothesis.as_slice());
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    // cell = (distance, substitutions); better = smaller distance, then more substitutions
    let better = |a: (usize, usize), b: (usize, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 > b.1);
    let m = h.len();
    let mut prev: Vec<(usize, usize)> = (0..=m).map(|j| (j, 0)).collect();
    let mut cur = vec![(0, 0); m + 1];
    for (i, &rt) in r.iter().enumerate() {
        cur[0] = (i + 1, 0);
        for j in 1..=m {
            let diag = if rt == h[j - 1] {
                prev[j - 1]
            } else {
                (prev[j - 1].0 + 1, prev[j - 1].1 + 1)
            };
            let del = (prev[j].0 + 1, prev[j].1);
            let ins = (cur[j - 1].0 + 1, cur[j - 1].1);
            let mut best = diag;
            for cand in [del, ins] {
                if better(cand, best) {
                    best = cand;
                }
            }
            cur[j] = best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (dist, subs) = prev[m];
    let n = r.len();
    // del + ins = dist - subs and del - ins = n - m
    let indel = dist - subs;
    let deletions = if n >= m {
        (indel + (n - m)) / 2
    } else {
        (indel - (m - n)) / 2
    };
    Ok(ErrorCounts {
        substitutions: subs,
        deletions,
        insertions: indel - deletions,
        reference_len: n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryHits {
    pub hits: usize,
    pub total: usize,
}

impl BoundaryHits {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

impl AddAssign for BoundaryHits {
    fn add_assign(&mut self, o: Self) {
        self.hits += o.hits;
        self.total += o.total;
    }
}

/// Input-frame positions mapped to encoder steps: `round(frame / s)`,
/// clamped to the last step.
pub fn boundary_steps(frames: &[usize], s: usize, steps: usize) -> Vec<usize> {
    frames
        .iter()
        .map(|&f| ((f as f64 / s as f64).round() as usize).min(steps.saturating_sub(1)))
        .collect()
}

/// Counts transitions (input-frame positions) that have a valley within two
/// encoder steps after mapping by [`boundary_steps`].
pub fn boundary_alignment(seg: &Segmentation, transitions: &[usize], s: usize) -> BoundaryHits {
    let steps = boundary_steps(transitions, s, seg.frames());
    let hits = steps
        .iter()
        .filter(|&&b| seg.valleys().iter().any(|&v| v.abs_diff(b) <= 2))
        .count();
    BoundaryHits {
        hits,
        total: steps.len(),
    }
}
