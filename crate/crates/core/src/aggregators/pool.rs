use super::PoolOp;
use crate::error::{ProbeError, Result};
use crate::real::Real;

/// Pools `rows` of the row-major matrix `x` (`d` columns) into `out`. For max
/// pooling `argmax[j]` receives the winning row per dimension (first on ties).
pub(crate) fn pool_rows<F: Real>(
    x: &[F],
    d: usize,
    rows: &[usize],
    op: PoolOp,
    out: &mut [F],
    argmax: &mut Vec<usize>,
) {
    debug_assert!(!rows.is_empty());
    match op {
        PoolOp::Mean => {
            out.fill(F::zero());
            for &r in rows {
                for (o, &v) in out.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            let n = F::from_usize_lossy(rows.len());
            for o in out.iter_mut() {
                *o /= n;
            }
            argmax.clear();
        }
        PoolOp::Max => {
            argmax.clear();
            argmax.resize(d, rows[0]);
            out.copy_from_slice(&x[rows[0] * d..(rows[0] + 1) * d]);
            for &r in &rows[1..] {
                for j in 0..d {
                    let v = x[r * d + j];
                    if v > out[j] {
                        out[j] = v;
                        argmax[j] = r;
                    }
                }
            }
        }
    }
}

pub(crate) fn valid_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Pools the valid rows of `x` (`[mask.len(), d]`, row-major).
pub fn token_pool<F: Real>(x: &[F], d: usize, mask: &[bool], op: PoolOp) -> Result<Vec<F>> {
    if x.len() != mask.len() * d {
        return Err(ProbeError::Shape(format!(
            "input has {} values, mask implies {}x{}",
            x.len(),
            mask.len(),
            d
        )));
    }
    let rows = valid_rows(mask);
    if rows.is_empty() {
        return Err(ProbeError::EmptyMask("token_pool".into()));
    }
    let mut out = vec![F::zero(); d];
    pool_rows(x, d, &rows, op, &mut out, &mut Vec::new());
    Ok(out)
}
