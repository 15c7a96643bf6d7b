use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, ctc_loss_var, LogitsSequence, TokenSequence};
use crate::error::Result;
use crate::model::{ForwardTrace, LayerId, TracedForward};
use crate::numcore::{Array, Graph, Scalar, VarId};

/// `final · L_final + inter · Σ_j L_inter_j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub final_weight: f64,
    pub inter_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            final_weight: 0.5,
            inter_weight: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub final_loss: T,
    /// Per conditioning head, in forward order.
    pub intermediate: Vec<(LayerId, T)>,
}

impl<T: Scalar> LossBreakdown<T> {
    fn compose(final_loss: T, intermediate: Vec<(LayerId, T)>, w: LossWeights) -> Self {
        let inter_sum = intermediate.iter().fold(T::zero(), |acc, &(_, l)| acc + l);
        Self {
            total: T::of(w.final_weight) * final_loss + T::of(w.inter_weight) * inter_sum,
            final_loss,
            intermediate,
        }
    }
}

fn ctc_value<T: Scalar>(logits: &Array<T>, target: &TokenSequence) -> Result<T> {
    Ok(ctc_loss(&LogitsSequence::new(logits.clone())?, target)?.loss)
}

/// Composite loss from an already computed forward pass. Encoder-side heads
/// are scored over `T'` steps, decoder-side heads and the final output over `I`.
pub fn total_loss<T: Scalar>(
    trace: &ForwardTrace<T>,
    target: &TokenSequence,
    weights: LossWeights,
) -> Result<LossBreakdown<T>> {
    let final_loss = ctc_value(&trace.logits, target)?;
    let intermediate = trace
        .intermediates
        .iter()
        .map(|il| Ok((il.layer, ctc_value(&il.logits, target)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::compose(final_loss, intermediate, weights))
}

/// Records the composite loss on `g`; the returned handle is differentiable.
pub fn total_loss_on<T: Scalar>(
    g: &mut Graph<T>,
    tr: &TracedForward,
    target: &TokenSequence,
    weights: LossWeights,
) -> Result<(VarId, LossBreakdown<T>)> {
    let final_id = ctc_loss_var(g, tr.logits, target)?;
    let mut inter_ids = Vec::with_capacity(tr.intermediates.len());
    for &(layer, logits) in &tr.intermediates {
        inter_ids.push((layer, ctc_loss_var(g, logits, target)?));
    }
    let breakdown = LossBreakdown::compose(
        g.value(final_id).item(),
        inter_ids.iter().map(|&(l, id)| (l, g.value(id).item())).collect(),
        weights,
    );
    let mut total = g.scale(final_id, T::of(weights.final_weight));
    if let Some((&(_, first), rest)) = inter_ids.split_first() {
        let mut sum = first;
        for &(_, id) in rest {
            sum = g.add(sum, id)?;
        }
        let inter = g.scale(sum, T::of(weights.inter_weight));
        total = g.add(total, inter)?;
    }
    Ok((total, breakdown))
}
