use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{boundary_alignment, cer, BoundaryHits, ErrorCounts};
use crate::ctc::{greedy_decode, LogitsSequence, TokenSequence};
use crate::error::Result;
use crate::model::Model;
use crate::numcore::Scalar;
use crate::synthdata::Utterance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub reference: TokenSequence,
    pub hypothesis: TokenSequence,
    pub errors: ErrorCounts,
    /// Encoder steps `T'`.
    pub encoder_len: usize,
    /// Aggregated length `I`.
    pub integrated_len: usize,
    pub interior_valleys: usize,
    pub boundaries: BoundaryHits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub utterances: usize,
    pub errors: ErrorCounts,
    /// Corpus-level `(sub + del + ins) / reference length`.
    pub cer: f64,
    /// Mean of `I / T'` over utterances.
    pub mean_length_ratio: f64,
    pub boundaries: BoundaryHits,
    pub boundary_hit_rate: Option<f64>,
    /// Share of utterances whose weights show at least `U - 1` interior valleys.
    pub valley_coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub records: Vec<UtteranceRecord>,
}

/// Greedy-decodes every utterance and aggregates error counts, the length
/// ratio, boundary hits and valley coverage. Records keep dataset order.
pub fn evaluate<T: Scalar>(model: &Model<T>, utts: &[Utterance]) -> Result<EvalReport> {
    let s = model.config().subsample;
    let mut records = Vec::with_capacity(utts.len());
    for u in utts {
        let trace = model.forward(&u.features.cast())?;
        let hyp = greedy_decode(&LogitsSequence::new(trace.logits.clone())?);
        let errors = cer(&u.tokens, &hyp)?;
        let seg = &trace.segmentation;
        records.push(UtteranceRecord {
            id: u.id.clone(),
            reference: u.tokens.clone(),
            hypothesis: hyp,
            errors,
            encoder_len: trace.encoder_len(),
            integrated_len: trace.integrated_len(),
            interior_valleys: seg.interior_valleys(),
            boundaries: boundary_alignment(seg, &u.transition_frames(), s),
        });
    }
    Ok(EvalReport::from_records(records))
}

impl EvalReport {
    pub fn from_records(records: Vec<UtteranceRecord>) -> Self {
        let mut errors = ErrorCounts::default();
        let mut boundaries = BoundaryHits::default();
        let mut ratio = 0.0;
        let mut covered = 0;
        for r in &records {
            errors += r.errors;
            boundaries += r.boundaries;
            ratio += r.integrated_len as f64 / r.encoder_len as f64;
            if r.interior_valleys + 1 >= r.reference.len() {
                covered += 1;
            }
        }
        let n = records.len();
        let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        Self {
            summary: EvalSummary {
                utterances: n,
                errors,
                cer: errors.rate(),
                mean_length_ratio: mean(ratio),
                boundaries,
                boundary_hit_rate: boundaries.rate(),
                valley_coverage: mean(covered as f64),
            },
            records,
        }
    }

    /// Human-readable report: summary table, then one line per utterance.
    pub fn to_text(&self) -> String {
        let s = &self.summary;
        let e = &s.errors;
        let mut out = String::new();
        writeln!(out, "utterances {}", s.utterances).unwrap();
        writeln!(out, "{:>8} {:>8} {:>8} {:>8} {:>8}", "ref", "sub", "del", "ins", "CER%").unwrap();
        writeln!(
            out,
            "{:>8} {:>8} {:>8} {:>8} {:>8.2}",
            e.reference_len,
            e.substitutions,
            e.deletions,
            e.insertions,
            100.0 * s.cer
        )
        .unwrap();
        writeln!(out, "mean I/T' {:.3}", s.mean_length_ratio).unwrap();
        match s.boundary_hit_rate {
            Some(r) => writeln!(out, "boundary hit rate {r:.3} ({}/{})", s.boundaries.hits, s.boundaries.total),
            None => writeln!(out, "boundary hit rate n/a"),
        }
        .unwrap();
        writeln!(out, "valley coverage {:.3}", s.valley_coverage).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "id sub del ins T' I ref | hyp").unwrap();
        let join = |t: &TokenSequence| t.as_slice().iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        for r in &self.records {
            writeln!(
                out,
                "{} {} {} {} {} {} {} | {}",
                r.id,
                r.errors.substitutions,
                r.errors.deletions,
                r.errors.insertions,
                r.encoder_len,
                r.integrated_len,
                join(&r.reference),
                join(&r.hypothesis)
            )
            .unwrap();
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}
