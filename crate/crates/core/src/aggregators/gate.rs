use super::pool::valid_rows;
use crate::error::{ProbeError, Result};
use crate::real::{axpy, dot, softmax_in_place, Real};

/// Per-call state of the scoring gate, indexed like `rows`.
#[derive(Debug, Clone, Default)]
pub(crate) struct GateCache<F> {
    pub scores: Vec<F>,
    pub weights: Vec<F>,
}

/// `s_i = tanh(w . x_i)` over `rows`, `alpha = softmax(s)`, `out = sum alpha_i x_i`.
/// Rows outside `rows` are treated as masked (score minus infinity).
pub(crate) fn gate_forward<F: Real>(
    x: &[F],
    d: usize,
    rows: &[usize],
    w: &[F],
    out: &mut [F],
) -> GateCache<F> {
    let scores: Vec<F> = rows
        .iter()
        .map(|&r| dot(w, &x[r * d..(r + 1) * d]).tanh())
        .collect();
    let mut weights = scores.clone();
    softmax_in_place(&mut weights);
    out.fill(F::zero());
    for (&r, &a) in rows.iter().zip(&weights) {
        axpy(a, &x[r * d..(r + 1) * d], out);
    }
    GateCache { scores, weights }
}

/// Accumulates `dL/dw` into `dw` and, when asked, `dL/dx` into `dx`.
pub(crate) fn gate_backward<F: Real>(
    x: &[F],
    d: usize,
    rows: &[usize],
    w: &[F],
    cache: &GateCache<F>,
    dv: &[F],
    dw: &mut [F],
    dx: Option<&mut [F]>,
) {
    let dalpha: Vec<F> = rows.iter().map(|&r| dot(dv, &x[r * d..(r + 1) * d])).collect();
    let mean: F = cache
        .weights
        .iter()
        .zip(&dalpha)
        .map(|(&a, &g)| a * g)
        .sum();
    // d(pre-tanh score) per row
    let dpre: Vec<F> = cache
        .weights
        .iter()
        .zip(&dalpha)
        .zip(&cache.scores)
        .map(|((&a, &g), &s)| a * (g - mean) * (F::one() - s * s))
        .collect();
    for (&r, &g) in rows.iter().zip(&dpre) {
        axpy(g, &x[r * d..(r + 1) * d], dw);
    }
    if let Some(dx) = dx {
        for ((&r, &g), &a) in rows.iter().zip(&dpre).zip(&cache.weights) {
            let row = &mut dx[r * d..(r + 1) * d];
            axpy(a, dv, row);
            axpy(g, w, row);
        }
    }
}

/// Scoring attention gate over the valid rows of `x` (`[mask.len(), d]`).
/// Returns the pooled vector and the post-softmax weights, exactly zero at
/// masked positions.
pub fn scoring_gate<F: Real>(x: &[F], d: usize, mask: &[bool], w: &[F]) -> Result<(Vec<F>, Vec<F>)> {
    if x.len() != mask.len() * d || w.len() != d {
        return Err(ProbeError::Shape(format!(
            "scoring_gate: x has {} values, mask {} rows, w {} dims, d = {d}",
            x.len(),
            mask.len(),
            w.len()
        )));
    }
    let rows = valid_rows(mask);
    if rows.is_empty() {
        return Err(ProbeError::EmptyMask("scoring_gate".into()));
    }
    let mut out = vec![F::zero(); d];
    let cache = gate_forward(x, d, &rows, w, &mut out);
    let mut weights = vec![F::zero(); mask.len()];
    for (&r, &a) in rows.iter().zip(&cache.weights) {
        weights[r] = a;
    }
    Ok((out, weights))
}
