//! Finite-difference verification of taped gradients.

use super::{Array, Graph, Scalar, VarId};
use crate::error::{Error, Result};

/// Position of one scalar inside the list of checked inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub input: usize,
    pub element: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    /// Coordinate with the largest relative error.
    pub worst: Option<Coord>,
    pub taped_at_worst: T,
    pub numeric_at_worst: T,
    pub checked: usize,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    let denom = a.abs().max(b.abs()).max(T::of(1e-8));
    (a - b).abs() / denom
}

fn evaluate<T, F>(f: &F, point: &[Array<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[VarId]) -> Result<VarId>,
{
    let mut g = Graph::untaped();
    let ids: Vec<VarId> = point.iter().map(|a| g.constant(a.clone())).collect();
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Taped gradient of `f` at `point`, one array per input.
pub fn taped_gradient<T, F>(f: &F, point: &[Array<T>]) -> Result<(T, Vec<Array<T>>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[VarId]) -> Result<VarId>,
{
    let mut g = Graph::new();
    let ids: Vec<VarId> = point.iter().map(|a| g.leaf(a.clone())).collect();
    let out = f(&mut g, &ids)?;
    let value = g.value(out).item();
    let grads = g.backward(out)?;
    let per_input = ids
        .iter()
        .map(|&id| grads.get(id).cloned().expect("every leaf has a gradient"))
        .collect();
    Ok((value, per_input))
}

/// Fourth-order central-difference estimate of one partial derivative,
/// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, so an input that
/// does not affect `f` yields exactly zero.
pub fn numerical_partial<T, F>(f: &F, point: &[Array<T>], step: T, at: Coord) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[VarId]) -> Result<VarId>,
{
    let mut p = point.to_vec();
    let x0 = p[at.input].data()[at.element];
    let mut at_offset = |k: f64| -> Result<T> {
        p[at.input].data_mut()[at.element] = x0 + T::of(k) * step;
        let v = evaluate(f, &p)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "f is not finite at perturbed point (input {}, element {})",
                at.input, at.element
            )));
        }
        Ok(v)
    };
    let (m2, m1, p1, p2) = (at_offset(-2.0)?, at_offset(-1.0)?, at_offset(1.0)?, at_offset(2.0)?);
    Ok((T::of(8.0) * (p1 - m1) - (p2 - m2)) / (T::of(12.0) * step))
}

fn check_step<T: Scalar>(step: T) -> Result<()> {
    let s = step.to_f64_lossy();
    if !(1e-7..=1e-4).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {s} outside [1e-7, 1e-4]"
        )));
    }
    Ok(())
}

/// Compares the taped gradient against central differences at every element.
pub fn grad_check<T, F>(f: F, point: &[Array<T>], step: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[VarId]) -> Result<VarId>,
{
    let coords: Vec<Coord> = point
        .iter()
        .enumerate()
        .flat_map(|(input, a)| (0..a.len()).map(move |element| Coord { input, element }))
        .collect();
    grad_check_at(f, point, step, &coords)
}

/// Like [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_at<T, F>(
    f: F,
    point: &[Array<T>],
    step: T,
    coords: &[Coord],
) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[VarId]) -> Result<VarId>,
{
    check_step(step)?;
    let (value, taped) = taped_gradient(&f, point)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("f is not finite at the base point".into()));
    }
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: None,
        taped_at_worst: T::zero(),
        numeric_at_worst: T::zero(),
        checked: 0,
    };
    for &c in coords {
        let numeric = numerical_partial(&f, point, step, c)?;
        let analytic = taped[c.input].data()[c.element];
        let err = relative_error(analytic, numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(c);
            report.taped_at_worst = analytic;
            report.numeric_at_worst = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
