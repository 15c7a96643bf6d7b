//! Unimodal aggregation: split a frame sequence at weight valleys and
//! integrate each segment into one token-level feature.
//!
//! A valley is a step whose weight is no larger than either neighbour; the
//! first and last steps are always valleys. Segment `i` spans from valley
//! `i` to one frame past valley `i+1`, so neighbouring segments share two
//! frames and overlap frames receive gradient from both tokens. Each
//! segment's feature is the weight-normalized mean of its frames.
//!
//! Indices are 0-based in storage. In the 1-based convention the valleys are
//! `τ_1 = 1 < … < τ_M = T'` and segment `i` is `[τ_i, min(τ_{i+1}+1, T')]`.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::numcore::{Array, CustomOp, Graph, Scalar, VarId};

/// Per-frame aggregation weights (sigmoid outputs).
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationWeights<T>(Vec<T>);

impl<T: Scalar> AggregationWeights<T> {
    /// Rejects empty input and weights outside `(0, 1]`. A sigmoid may round
    /// to exactly 1 in finite precision, so the upper end is closed.
    pub fn new(alpha: Vec<T>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::InvalidArgument("aggregation weights are empty".into()));
        }
        if let Some(bad) = alpha
            .iter()
            .find(|a| !a.is_finite() || **a <= T::zero() || **a > T::one())
        {
            return Err(Error::InvalidArgument(format!(
                "aggregation weight {bad} is outside (0, 1]"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Segmentation {
    frames: usize,
    valleys: Vec<usize>,
    segments: Vec<(usize, usize)>,
}

impl Segmentation {
    /// Builds segments from 0-based valley indices. Valleys must be strictly
    /// increasing and include both `0` and `frames - 1`.
    pub fn from_valleys(frames: usize, valleys: Vec<usize>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument("segmentation of zero frames".into()));
        }
        let ok_ends = valleys.first() == Some(&0) && valleys.last() == Some(&(frames - 1));
        let increasing = valleys.windows(2).all(|w| w[0] < w[1]);
        if !ok_ends || !increasing {
            return Err(Error::InvalidArgument(format!(
                "valleys {valleys:?} are not strictly increasing from 0 to {}",
                frames - 1
            )));
        }
        let segments = if valleys.len() == 1 {
            vec![(0, 0)]
        } else {
            valleys
                .windows(2)
                .map(|w| (w[0], (w[1] + 1).min(frames - 1)))
                .collect()
        };
        Ok(Self {
            frames,
            valleys,
            segments,
        })
    }

    /// Number of frames `T'` the segmentation covers.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// 0-based valley indices.
    pub fn valleys(&self) -> &[usize] {
        &self.valleys
    }

    pub fn valleys_one_based(&self) -> Vec<usize> {
        self.valleys.iter().map(|v| v + 1).collect()
    }

    /// Inclusive 0-based frame ranges, one per integrated step.
    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn segment(&self, i: usize) -> RangeInclusive<usize> {
        let (s, e) = self.segments[i];
        s..=e
    }

    /// Integrated length `I`.
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn is_valley(&self, t: usize) -> bool {
        self.valleys.binary_search(&t).is_ok()
    }

    /// Valleys strictly between the forced endpoints.
    pub fn interior_valleys(&self) -> usize {
        self.valleys
            .iter()
            .filter(|&&v| v != 0 && v + 1 != self.frames)
            .count()
    }

    /// Segment whose span `[τ_i, τ_{i+1})` owns frame `t` (the last segment
    /// also owns the final frame).
    pub fn owner(&self, t: usize) -> usize {
        match self.valleys.binary_search(&t) {
            Ok(k) => k.min(self.segments.len() - 1),
            Err(k) => k - 1,
        }
    }
}

/// Finds weight valleys with forced endpoints.
///
/// Interior steps qualify when `α_t ≤ α_{t-1}` and `α_t ≤ α_{t+1}`. Two
/// adjacent interior steps can both qualify only on an exact tie; within
/// such a run only the first is kept. The forced endpoints never join a run.
pub fn detect_valleys<T: Scalar>(alpha: &AggregationWeights<T>) -> Segmentation {
    let a = alpha.as_slice();
    let n = a.len();
    let mut valleys = vec![0];
    let mut prev_interior = false;
    for t in 1..n.saturating_sub(1) {
        let is_valley = a[t] <= a[t - 1] && a[t] <= a[t + 1];
        if is_valley && !prev_interior {
            valleys.push(t);
        }
        prev_interior = is_valley;
    }
    if n > 1 {
        valleys.push(n - 1);
    }
    Segmentation::from_valleys(n, valleys).expect("valleys are built increasing with both ends")
}

fn check_shapes<T: Scalar>(h: &Array<T>, alpha: &[T], seg: &Segmentation) -> Result<()> {
    if h.ndim() != 2 || h.rows() != alpha.len() || seg.frames() != alpha.len() {
        return Err(Error::shape(
            "aggregate",
            format!(
                "h {:?}, alpha [{}], segmentation over {} frames",
                h.shape(),
                alpha.len(),
                seg.frames()
            ),
        ));
    }
    Ok(())
}

fn denominator<T: Scalar>(alpha: &[T], range: RangeInclusive<usize>) -> T {
    // max() rather than + keeps the result exact whenever the sum is positive
    alpha[range].iter().copied().sum::<T>().max(T::of(1e-8))
}

/// `c_i = Σ_{t ∈ seg_i} α_t h_t / Σ_{t ∈ seg_i} α_t` for every segment.
pub fn aggregate<T: Scalar>(h: &Array<T>, alpha: &[T], seg: &Segmentation) -> Result<Array<T>> {
    check_shapes(h, alpha, seg)?;
    let d = h.cols();
    let mut c = vec![T::zero(); seg.len() * d];
    for i in 0..seg.len() {
        let s = denominator(alpha, seg.segment(i));
        let out = &mut c[i * d..(i + 1) * d];
        for t in seg.segment(i) {
            let w = alpha[t] / s;
            for (o, &v) in out.iter_mut().zip(h.row(t)) {
                *o += w * v;
            }
        }
    }
    Array::new(&[seg.len(), d], c)
}

/// Gradients of [`aggregate`] with the segmentation held constant:
/// `∂c_i/∂h_t = α_t / S_i` and `∂c_i/∂α_t = (h_t − c_i) / S_i`, summed over
/// every segment containing `t`.
pub fn aggregate_backward<T: Scalar>(
    grad_c: &Array<T>,
    h: &Array<T>,
    alpha: &[T],
    seg: &Segmentation,
) -> Result<(Array<T>, Vec<T>)> {
    check_shapes(h, alpha, seg)?;
    let d = h.cols();
    if grad_c.rows() != seg.len() || grad_c.cols() != d {
        return Err(Error::shape(
            "aggregate_backward",
            format!("grad_c {:?} for {} segments of width {d}", grad_c.shape(), seg.len()),
        ));
    }
    let c = aggregate(h, alpha, seg)?;
    let mut grad_h = vec![T::zero(); h.len()];
    let mut grad_alpha = vec![T::zero(); alpha.len()];
    for i in 0..seg.len() {
        let s = denominator(alpha, seg.segment(i));
        let gc = grad_c.row(i);
        let ci = c.row(i);
        for t in seg.segment(i) {
            let w = alpha[t] / s;
            let row = &mut grad_h[t * d..(t + 1) * d];
            let mut ga = T::zero();
            for j in 0..d {
                row[j] += w * gc[j];
                ga += gc[j] * (h.at(t, j) - ci[j]);
            }
            grad_alpha[t] += ga / s;
        }
    }
    Ok((Array::new(h.shape(), grad_h)?, grad_alpha))
}

/// Valley detection followed by aggregation.
pub fn uma_forward<T: Scalar>(
    h: &Array<T>,
    alpha: &AggregationWeights<T>,
) -> Result<(Array<T>, Segmentation)> {
    let seg = detect_valleys(alpha);
    let c = aggregate(h, alpha.as_slice(), &seg)?;
    Ok((c, seg))
}

struct AggregateBackward {
    seg: Segmentation,
}

impl<T: Scalar> CustomOp<T> for AggregateBackward {
    fn name(&self) -> &'static str {
        "uma_aggregate"
    }

    fn backward(&self, inputs: &[&Array<T>], _output: &Array<T>, grad_output: &Array<T>) -> Vec<Array<T>> {
        let (h, alpha) = (inputs[0], inputs[1]);
        let (gh, ga) = aggregate_backward(grad_output, h, alpha.data(), &self.seg)
            .expect("shapes were validated on the forward pass");
        let ga = Array::new(alpha.shape(), ga).expect("same length as alpha");
        vec![gh, ga]
    }
}

/// Records [`aggregate`] on the graph. `alpha` may be shaped `[T']` or `[T', 1]`.
pub fn aggregate_var<T: Scalar>(
    g: &mut Graph<T>,
    h: VarId,
    alpha: VarId,
    seg: &Segmentation,
) -> Result<VarId> {
    let c = aggregate(g.value(h), g.value(alpha).data(), seg)?;
    Ok(g.custom(&[h, alpha], c, Box::new(AggregateBackward { seg: seg.clone() })))
}
