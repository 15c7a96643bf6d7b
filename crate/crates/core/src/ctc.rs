//! Connectionist temporal classification over the token alphabet plus blank.
//!
//! The blank symbol is always the last score column, so token ids stay
//! contiguous in `0..K`. The loss runs the forward-backward recursion over the
//! blank-interleaved label sequence entirely in log space.

use crate::error::{Error, Result};
use crate::numcore::kernels::{log_softmax_row, softmax_row};
use crate::numcore::{log_add_exp, log_sum_exp, Array, CustomOp, Graph, Scalar, VarId};

/// Unnormalized per-step scores, `L × (K+1)`, blank in the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsSequence<T> {
    scores: Array<T>,
}

impl<T: Scalar> LogitsSequence<T> {
    pub fn new(scores: Array<T>) -> Result<Self> {
        if scores.ndim() != 2 || scores.cols() < 2 {
            return Err(Error::shape(
                "logits",
                format!("expected L×(K+1) with K ≥ 1, got {:?}", scores.shape()),
            ));
        }
        if !scores.all_finite() {
            return Err(Error::NonFinite("logits contain NaN or Inf".into()));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Array<T> {
        &self.scores
    }

    pub fn into_scores(self) -> Array<T> {
        self.scores
    }

    /// Number of steps `L`.
    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of non-blank tokens `K`.
    pub fn vocab_size(&self) -> usize {
        self.scores.cols() - 1
    }

    pub fn blank(&self) -> usize {
        self.scores.cols() - 1
    }
}

/// Token ids in `0..K`; never contains the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} is not in 0..{vocab_size} (the blank is {vocab_size})"
            )));
        }
        Ok(Self(tokens))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Minimum number of steps a CTC path needs to emit this sequence: one per
    /// token plus a separating blank between each adjacent duplicate.
    pub fn min_ctc_length(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

#[derive(Clone, Debug)]
pub struct CtcResult<T> {
    /// `-log p(target | logits)` in nats.
    pub loss: T,
    /// `d loss / d logits`, same shape as the scores.
    pub gradient: Array<T>,
}

/// Merges runs of identical symbols, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> TokenSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    TokenSequence(out)
}

fn check_target<T: Scalar>(logits: &LogitsSequence<T>, target: &TokenSequence) -> Result<()> {
    let k = logits.vocab_size();
    if let Some(&bad) = target.as_slice().iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!(
            "target token {bad} is not in 0..{k}"
        )));
    }
    let required = target.min_ctc_length();
    if logits.len() < required {
        return Err(Error::Infeasible {
            input_len: logits.len(),
            target_len: target.len(),
            required,
        });
    }
    Ok(())
}

fn log_probs<T: Scalar>(scores: &Array<T>) -> Vec<T> {
    let c = scores.cols();
    let mut lp = vec![T::zero(); scores.len()];
    for (x, o) in scores.data().chunks_exact(c).zip(lp.chunks_exact_mut(c)) {
        log_softmax_row(x, o);
    }
    lp
}

/// CTC loss and its analytic gradient with respect to the scores.
pub fn ctc_loss<T: Scalar>(logits: &LogitsSequence<T>, target: &TokenSequence) -> Result<CtcResult<T>> {
    check_target(logits, target)?;
    let scores = logits.scores();
    let (steps, c) = (scores.rows(), scores.cols());
    let blank = logits.blank();
    let lp = log_probs(scores);

    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.as_slice().iter().flat_map(|&t| [t, blank]))
        .collect();
    let states = ext.len();
    let ninf = T::neg_infinity();
    // skip transition s-2 -> s allowed only onto a token differing from ext[s-2]
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; steps * states];
    alpha[0] = lp[blank];
    if states > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..steps {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        let cur = &mut cur[..states];
        for s in 0..states {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add_exp(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp[t * c + ext[s]] };
        }
    }

    let last = (steps - 1) * states;
    let mut log_p = alpha[last + states - 1];
    if states > 1 {
        log_p = log_add_exp(log_p, alpha[last + states - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite(format!(
            "log-likelihood underflowed for L={steps}, U={}",
            target.len()
        )));
    }

    // beta[t][s]: log-probability of completing the path from state s at t,
    // excluding the emission at t itself.
    let mut beta = vec![ninf; steps * states];
    beta[last + states - 1] = T::zero();
    if states > 1 {
        beta[last + states - 2] = T::zero();
    }
    for t in (0..steps - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        let next = &next[..states];
        let emit = |s: usize| next[s] + lp[(t + 1) * c + ext[s]];
        for s in 0..states {
            let mut b = emit(s);
            if s + 1 < states {
                b = log_add_exp(b, emit(s + 1));
            }
            if s + 2 < states && can_skip(s + 2) {
                b = log_add_exp(b, emit(s + 2));
            }
            cur[s] = b;
        }
    }

    let mut gradient = vec![T::zero(); steps * c];
    for t in 0..steps {
        let row = &mut gradient[t * c..(t + 1) * c];
        softmax_row(&scores.data()[t * c..(t + 1) * c], row);
        for s in 0..states {
            let ab = alpha[t * states + s] + beta[t * states + s];
            if ab != ninf {
                row[ext[s]] -= (ab - log_p).exp();
            }
        }
    }

    Ok(CtcResult {
        loss: -log_p,
        gradient: Array::from_parts(vec![steps, c], gradient),
    })
}

const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Exhaustive path sum; the independent reference for [`ctc_loss`].
pub fn ctc_brute_force<T: Scalar>(logits: &LogitsSequence<T>, target: &TokenSequence) -> Result<T> {
    let (steps, c) = (logits.len(), logits.scores().cols());
    let paths = (c as u128).checked_pow(steps as u32).unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(paths));
    }
    let k = logits.vocab_size();
    if let Some(&bad) = target.as_slice().iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!("target token {bad} is not in 0..{k}")));
    }
    let blank = logits.blank();
    let mut log_probs = vec![T::zero(); steps * c];
    for t in 0..steps {
        log_softmax_row(
            &logits.scores().data()[t * c..(t + 1) * c],
            &mut log_probs[t * c..(t + 1) * c],
        );
    }

    let mut path = vec![0usize; steps];
    // log-probabilities of the matching paths, summed at the end
    let mut matched = Vec::new();
    loop {
        if collapse(&path, blank) == *target {
            let lp = path
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (t, &s)| acc + log_probs[t * c + s]);
            matched.push(lp);
        }
        // odometer increment
        let mut pos = steps;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < c {
                break;
            }
            path[pos] = 0;
            if pos == 0 {
                pos = usize::MAX;
                break;
            }
        }
        if pos == usize::MAX {
            break;
        }
    }
    if matched.is_empty() {
        return Err(Error::Infeasible {
            input_len: steps,
            target_len: target.len(),
            required: target.min_ctc_length(),
        });
    }
    Ok(-log_sum_exp(&matched))
}

/// Per-step argmax (ties go to the smallest index).
pub fn best_path<T: Scalar>(logits: &LogitsSequence<T>) -> Vec<usize> {
    let s = logits.scores();
    (0..s.rows())
        .map(|t| {
            let row = s.row(t);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Best-path decoding: argmax per step, then [`collapse`].
pub fn greedy_decode<T: Scalar>(logits: &LogitsSequence<T>) -> TokenSequence {
    collapse(&best_path(logits), logits.blank())
}

struct CtcBackward<T> {
    gradient: Array<T>,
}

impl<T: Scalar> CustomOp<T> for CtcBackward<T> {
    fn name(&self) -> &'static str {
        "ctc_loss"
    }

    fn backward(&self, _inputs: &[&Array<T>], _output: &Array<T>, grad_output: &Array<T>) -> Vec<Array<T>> {
        let g = grad_output.item();
        vec![self.gradient.map(|v| v * g)]
    }
}

/// Records the CTC loss of the scores held by `logits` as a scalar node.
pub fn ctc_loss_var<T: Scalar>(g: &mut Graph<T>, logits: VarId, target: &TokenSequence) -> Result<VarId> {
    let seq = LogitsSequence::new(g.value(logits).clone())?;
    let res = ctc_loss(&seq, target)?;
    Ok(g.custom(
        &[logits],
        Array::scalar(res.loss),
        Box::new(CtcBackward {
            gradient: res.gradient,
        }),
    ))
}
