use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::numcore::{Array, Scalar};
use crate::synthdata::Utterance;
use crate::uma;

pub const TIMER_NOTE: &str = "wall-clock via std::time::Instant on one thread; inputs (encoder output and aggregated sequence) are prepared untimed; each utterance is timed `repeats` times after one warm-up call and the median is kept; per-utterance figures are means of those medians";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub utterances: usize,
    pub repeats: usize,
    pub scalar: String,
    /// Mean of `I / T'`.
    pub mean_length_ratio: f64,
    /// Mean `T'` and `I`.
    pub mean_encoder_len: f64,
    pub mean_integrated_len: f64,
    /// Seconds per utterance: full model (encoder, weights, aggregation, decoder).
    pub full_seconds: f64,
    /// Seconds per utterance: encoder then decoder on the `T'`-length encoder output.
    pub full_bypass_seconds: f64,
    /// Seconds per utterance: decoder on the aggregated sequence.
    pub decoder_seconds: f64,
    /// Seconds per utterance: decoder on the un-aggregated encoder output.
    pub decoder_bypass_seconds: f64,
    /// `decoder_seconds / decoder_bypass_seconds`.
    pub decoder_ratio: f64,
    /// `full_seconds / full_bypass_seconds`.
    pub full_ratio: f64,
    pub methodology: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time<R>(repeats: usize, mut f: impl FnMut() -> Result<R>) -> Result<f64> {
    std::hint::black_box(f()?);
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(f()?);
        runs.push(t.elapsed().as_secs_f64());
    }
    Ok(median(runs))
}

/// Times the decoder with and without aggregation on each utterance.
pub fn bench<T: Scalar>(model: &Model<T>, utts: &[Utterance], repeats: usize) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    let (mut full, mut full_bypass, mut dec, mut dec_bypass) = (0.0, 0.0, 0.0, 0.0);
    let (mut ratio, mut enc_len, mut int_len) = (0.0, 0.0, 0.0);
    for u in utts {
        let x: Array<T> = u.features.cast();
        let h = model.encoder_forward(&x)?;
        let alpha = model.weight_head(&h)?;
        let (c, seg) = uma::uma_forward(&h, &alpha)?;
        ratio += seg.len() as f64 / h.rows() as f64;
        enc_len += h.rows() as f64;
        int_len += seg.len() as f64;
        dec += time(repeats, || model.decoder_forward(&c))?;
        dec_bypass += time(repeats, || model.decoder_forward(&h))?;
        full += time(repeats, || model.forward(&x))?;
        full_bypass += time(repeats, || {
            let h = model.encoder_forward(&x)?;
            model.decoder_forward(&h)
        })?;
    }
    let n = utts.len().max(1) as f64;
    Ok(BenchReport {
        utterances: utts.len(),
        repeats,
        scalar: std::any::type_name::<T>().to_string(),
        mean_length_ratio: ratio / n,
        mean_encoder_len: enc_len / n,
        mean_integrated_len: int_len / n,
        full_seconds: full / n,
        full_bypass_seconds: full_bypass / n,
        decoder_seconds: dec / n,
        decoder_bypass_seconds: dec_bypass / n,
        decoder_ratio: dec / dec_bypass,
        full_ratio: full / full_bypass,
        methodology: TIMER_NOTE.to_string(),
    })
}
