//! Downcast multi-head self-attention block.
//!
//! Projects `d`-dimensional rows to `d_inner`, runs bidirectional attention per
//! head over the valid rows only, projects back to `d` with `W_O` and pools
//! over rows. For mean pooling the row mean is taken before `W_O` (the two
//! commute); for max pooling each output row is projected and folded into a
//! running max, so no `[n, d]` buffer is ever materialised.

use super::pool::valid_rows;
use super::PoolOp;
use crate::error::{ProbeError, Result};
use crate::real::{axpy, dot, softmax_in_place, Real};

/// Borrowed weights of one attention module. `w_q`, `w_k`, `w_v` are
/// `[d, d_inner]` and `w_o` is `[d_inner, d]`, all row-major.
#[derive(Debug, Clone, Copy)]
pub struct MhaWeights<'a, F> {
    pub w_q: &'a [F],
    pub w_k: &'a [F],
    pub w_v: &'a [F],
    pub w_o: &'a [F],
    pub b_q: Option<&'a [F]>,
    pub b_k: Option<&'a [F]>,
    pub b_v: Option<&'a [F]>,
    pub b_o: Option<&'a [F]>,
    pub d: usize,
    pub d_inner: usize,
    pub n_heads: usize,
}

pub(crate) struct MhaGrads<'a, F> {
    pub w_q: &'a mut [F],
    pub w_k: &'a mut [F],
    pub w_v: &'a mut [F],
    pub w_o: &'a mut [F],
    pub b_q: Option<&'a mut [F]>,
    pub b_k: Option<&'a mut [F]>,
    pub b_v: Option<&'a mut [F]>,
    pub b_o: Option<&'a mut [F]>,
}

impl<'a, F: Real> MhaWeights<'a, F> {
    pub(crate) fn from_region(region: &'a [F], d: usize, di: usize, heads: usize, bias: bool) -> Self {
        let (w_q, rest) = region.split_at(d * di);
        let (w_k, rest) = rest.split_at(d * di);
        let (w_v, rest) = rest.split_at(d * di);
        let (w_o, rest) = rest.split_at(di * d);
        let (b_q, b_k, b_v, b_o) = if bias {
            let (b_q, rest) = rest.split_at(di);
            let (b_k, rest) = rest.split_at(di);
            let (b_v, b_o) = rest.split_at(di);
            (Some(b_q), Some(b_k), Some(b_v), Some(b_o))
        } else {
            (None, None, None, None)
        };
        MhaWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q,
            b_k,
            b_v,
            b_o,
            d,
            d_inner: di,
            n_heads: heads,
        }
    }

    fn check(&self) -> Result<()> {
        let (d, di) = (self.d, self.d_inner);
        let ok = self.w_q.len() == d * di
            && self.w_k.len() == d * di
            && self.w_v.len() == d * di
            && self.w_o.len() == di * d
            && self.b_q.is_none_or(|b| b.len() == di)
            && self.b_k.is_none_or(|b| b.len() == di)
            && self.b_v.is_none_or(|b| b.len() == di)
            && self.b_o.is_none_or(|b| b.len() == d)
            && self.n_heads > 0
            && di % self.n_heads == 0;
        if ok {
            Ok(())
        } else {
            Err(ProbeError::Shape(format!(
                "attention weights inconsistent with d = {d}, d_inner = {di}, heads = {}",
                self.n_heads
            )))
        }
    }
}

impl<'a, F: Real> MhaGrads<'a, F> {
    pub(crate) fn from_region(region: &'a mut [F], d: usize, di: usize, bias: bool) -> Self {
        let (w_q, rest) = region.split_at_mut(d * di);
        let (w_k, rest) = rest.split_at_mut(d * di);
        let (w_v, rest) = rest.split_at_mut(d * di);
        let (w_o, rest) = rest.split_at_mut(di * d);
        let (b_q, b_k, b_v, b_o) = if bias {
            let (b_q, rest) = rest.split_at_mut(di);
            let (b_k, rest) = rest.split_at_mut(di);
            let (b_v, b_o) = rest.split_at_mut(di);
            (Some(b_q), Some(b_k), Some(b_v), Some(b_o))
        } else {
            (None, None, None, None)
        };
        MhaGrads {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q,
            b_k,
            b_v,
            b_o,
        }
    }
}

/// Reusable working buffers for inference. `peak_floats` records the largest
/// simultaneous footprint seen.
#[derive(Debug, Clone, Default)]
pub(crate) struct MhaScratch<F> {
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    row: Vec<F>,
    y_row: Vec<F>,
    o_mean: Vec<F>,
    pub peak_floats: usize,
}

impl<F: Real> MhaScratch<F> {
    fn prepare(&mut self, n: usize, d: usize, di: usize) {
        for buf in [&mut self.q, &mut self.k, &mut self.v] {
            buf.clear();
            buf.resize(n * di, F::zero());
        }
        self.row.clear();
        self.row.resize(n, F::zero());
        self.y_row.clear();
        self.y_row.resize(d, F::zero());
        self.o_mean.clear();
        self.o_mean.resize(di, F::zero());
        let used = 3 * n * di + n + d + di;
        self.peak_floats = self.peak_floats.max(used);
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct MhaCache<F> {
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    attn: Vec<F>,
    o: Vec<F>,
    o_mean: Vec<F>,
    argmax: Vec<usize>,
}

fn project<F: Real>(x: &[F], d: usize, rows: &[usize], w: &[F], b: Option<&[F]>, di: usize, out: &mut [F]) {
    for (ri, &r) in rows.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let orow = &mut out[ri * di..(ri + 1) * di];
        match b {
            Some(b) => orow.copy_from_slice(b),
            None => orow.fill(F::zero()),
        }
        for (p, &xp) in xr.iter().enumerate() {
            axpy(xp, &w[p * di..(p + 1) * di], orow);
        }
    }
}

/// Per-head scaled dot-product attention, one query row at a time. Output rows
/// go to `out` or, when `out` is `None`, overwrite the consumed query slice.
#[allow(clippy::too_many_arguments)]
fn attend<F: Real>(
    q: &mut [F],
    k: &[F],
    v: &[F],
    n: usize,
    di: usize,
    heads: usize,
    row: &mut [F],
    mut out: Option<&mut [F]>,
    mut attn: Option<&mut [F]>,
    mut received: Option<&mut [F]>,
) {
    let dh = di / heads;
    let scale = F::one() / F::from_usize_lossy(dh).sqrt();
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            {
                let qi = &q[i * di + off..i * di + off + dh];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(qi, &k[j * di + off..j * di + off + dh]) * scale;
                }
            }
            softmax_in_place(row);
            if let Some(a) = attn.as_deref_mut() {
                a[(h * n + i) * n..(h * n + i + 1) * n].copy_from_slice(row);
            }
            if let Some(acc) = received.as_deref_mut() {
                for (r, &a) in acc.iter_mut().zip(row.iter()) {
                    *r += a;
                }
            }
            let target: &mut [F] = match out.as_deref_mut() {
                Some(o) => o,
                None => q,
            };
            let tgt = &mut target[i * di + off..i * di + off + dh];
            tgt.fill(F::zero());
            for (j, &a) in row.iter().enumerate() {
                axpy(a, &v[j * di + off..j * di + off + dh], tgt);
            }
        }
    }
}

/// Output projection fused with pooling over the `n` rows of `o`.
#[allow(clippy::too_many_arguments)]
fn project_out_pool<F: Real>(
    w: &MhaWeights<F>,
    o: &[F],
    n: usize,
    op: PoolOp,
    o_mean: &mut [F],
    y_row: &mut [F],
    argmax: Option<&mut Vec<usize>>,
    out: &mut [F],
) {
    let (d, di) = (w.d, w.d_inner);
    match op {
        PoolOp::Mean => {
            o_mean.fill(F::zero());
            for i in 0..n {
                for (m, &x) in o_mean.iter_mut().zip(&o[i * di..(i + 1) * di]) {
                    *m += x;
                }
            }
            let inv = F::one() / F::from_usize_lossy(n);
            for m in o_mean.iter_mut() {
                *m *= inv;
            }
            match w.b_o {
                Some(b) => out.copy_from_slice(b),
                None => out.fill(F::zero()),
            }
            for (kk, &m) in o_mean.iter().enumerate() {
                axpy(m, &w.w_o[kk * d..(kk + 1) * d], out);
            }
        }
        PoolOp::Max => {
            let mut argmax = argmax;
            if let Some(a) = argmax.as_deref_mut() {
                a.clear();
                a.resize(d, 0);
            }
            for i in 0..n {
                match w.b_o {
                    Some(b) => y_row.copy_from_slice(b),
                    None => y_row.fill(F::zero()),
                }
                for (kk, &x) in o[i * di..(i + 1) * di].iter().enumerate() {
                    axpy(x, &w.w_o[kk * d..(kk + 1) * d], y_row);
                }
                if i == 0 {
                    out.copy_from_slice(y_row);
                    continue;
                }
                for j in 0..d {
                    if y_row[j] > out[j] {
                        out[j] = y_row[j];
                        if let Some(a) = argmax.as_deref_mut() {
                            a[j] = i;
                        }
                    }
                }
            }
        }
    }
}

/// Inference forward over `rows` of `x`. `received`, when given (length
/// `rows.len()`), accumulates attention received per key summed over heads and
/// queries.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mha_infer<F: Real>(
    w: &MhaWeights<F>,
    x: &[F],
    rows: &[usize],
    op: PoolOp,
    out: &mut [F],
    scratch: &mut MhaScratch<F>,
    received: Option<&mut [F]>,
) {
    let (d, di, n) = (w.d, w.d_inner, rows.len());
    scratch.prepare(n, d, di);
    let MhaScratch {
        q,
        k,
        v,
        row,
        y_row,
        o_mean,
        ..
    } = scratch;
    project(x, d, rows, w.w_q, w.b_q, di, q);
    project(x, d, rows, w.w_k, w.b_k, di, k);
    project(x, d, rows, w.w_v, w.b_v, di, v);
    attend(q, k, v, n, di, w.n_heads, row, None, None, received);
    project_out_pool(w, q, n, op, o_mean, y_row, None, out);
}

/// Training forward: same arithmetic as [`mha_infer`], keeping activations.
pub(crate) fn mha_train_forward<F: Real>(
    w: &MhaWeights<F>,
    x: &[F],
    rows: &[usize],
    op: PoolOp,
    out: &mut [F],
) -> MhaCache<F> {
    let (d, di, n, heads) = (w.d, w.d_inner, rows.len(), w.n_heads);
    let mut c = MhaCache {
        q: vec![F::zero(); n * di],
        k: vec![F::zero(); n * di],
        v: vec![F::zero(); n * di],
        attn: vec![F::zero(); heads * n * n],
        o: vec![F::zero(); n * di],
        o_mean: vec![F::zero(); di],
        argmax: Vec::new(),
    };
    project(x, d, rows, w.w_q, w.b_q, di, &mut c.q);
    project(x, d, rows, w.w_k, w.b_k, di, &mut c.k);
    project(x, d, rows, w.w_v, w.b_v, di, &mut c.v);
    let mut row = vec![F::zero(); n];
    attend(
        &mut c.q,
        &c.k,
        &c.v,
        n,
        di,
        heads,
        &mut row,
        Some(&mut c.o),
        Some(&mut c.attn),
        None,
    );
    let mut y_row = vec![F::zero(); d];
    project_out_pool(w, &c.o, n, op, &mut c.o_mean, &mut y_row, Some(&mut c.argmax), out);
    c
}

/// Accumulates parameter gradients into `g` and, when asked, the input
/// gradient into `dx` (indexed like `x`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn mha_backward<F: Real>(
    w: &MhaWeights<F>,
    x: &[F],
    rows: &[usize],
    op: PoolOp,
    c: &MhaCache<F>,
    dv: &[F],
    g: &mut MhaGrads<F>,
    dx: Option<&mut [F]>,
) {
    let (d, di, n, heads) = (w.d, w.d_inner, rows.len(), w.n_heads);
    let dh = di / heads;
    let scale = F::one() / F::from_usize_lossy(dh).sqrt();

    if let Some(b) = g.b_o.as_deref_mut() {
        axpy(F::one(), dv, b);
    }
    let mut d_o = vec![F::zero(); n * di];
    match op {
        PoolOp::Mean => {
            let inv = F::one() / F::from_usize_lossy(n);
            for kk in 0..di {
                axpy(c.o_mean[kk], dv, &mut g.w_o[kk * d..(kk + 1) * d]);
                let dm = dot(&w.w_o[kk * d..(kk + 1) * d], dv) * inv;
                for i in 0..n {
                    d_o[i * di + kk] = dm;
                }
            }
        }
        PoolOp::Max => {
            for j in 0..d {
                let i = c.argmax[j];
                let g_j = dv[j];
                for kk in 0..di {
                    g.w_o[kk * d + j] += c.o[i * di + kk] * g_j;
                    d_o[i * di + kk] += w.w_o[kk * d + j] * g_j;
                }
            }
        }
    }

    let mut dq = vec![F::zero(); n * di];
    let mut dk = vec![F::zero(); n * di];
    let mut dvv = vec![F::zero(); n * di];
    let mut da = vec![F::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let a = &c.attn[(h * n + i) * n..(h * n + i + 1) * n];
            let doi = &d_o[i * di + off..i * di + off + dh];
            for j in 0..n {
                da[j] = dot(doi, &c.v[j * di + off..j * di + off + dh]);
                axpy(a[j], doi, &mut dvv[j * di + off..j * di + off + dh]);
            }
            let mean: F = a.iter().zip(&da).map(|(&p, &g)| p * g).sum();
            for j in 0..n {
                let ds = a[j] * (da[j] - mean) * scale;
                axpy(ds, &c.k[j * di + off..j * di + off + dh], &mut dq[i * di + off..i * di + off + dh]);
                axpy(ds, &c.q[i * di + off..i * di + off + dh], &mut dk[j * di + off..j * di + off + dh]);
            }
        }
    }

    for (ri, &r) in rows.iter().enumerate() {
        let xr = &x[r * d..(r + 1) * d];
        let (gq, gk, gv) = (
            &dq[ri * di..(ri + 1) * di],
            &dk[ri * di..(ri + 1) * di],
            &dvv[ri * di..(ri + 1) * di],
        );
        for (p, &xp) in xr.iter().enumerate() {
            axpy(xp, gq, &mut g.w_q[p * di..(p + 1) * di]);
            axpy(xp, gk, &mut g.w_k[p * di..(p + 1) * di]);
            axpy(xp, gv, &mut g.w_v[p * di..(p + 1) * di]);
        }
        if let Some(b) = g.b_q.as_deref_mut() {
            axpy(F::one(), gq, b);
        }
        if let Some(b) = g.b_k.as_deref_mut() {
            axpy(F::one(), gk, b);
        }
        if let Some(b) = g.b_v.as_deref_mut() {
            axpy(F::one(), gv, b);
        }
    }

    if let Some(dx) = dx {
        for (ri, &r) in rows.iter().enumerate() {
            let (gq, gk, gv) = (
                &dq[ri * di..(ri + 1) * di],
                &dk[ri * di..(ri + 1) * di],
                &dvv[ri * di..(ri + 1) * di],
            );
            for p in 0..d {
                let span = p * di..(p + 1) * di;
                dx[r * d + p] += dot(&w.w_q[span.clone()], gq)
                    + dot(&w.w_k[span.clone()], gk)
                    + dot(&w.w_v[span], gv);
            }
        }
    }
}

/// Attention block over the valid rows of `x` (`[mask.len(), d]`), pooled to
/// a `d`-vector.
pub fn mha_block<F: Real>(
    x: &[F],
    mask: &[bool],
    weights: &MhaWeights<F>,
    op: PoolOp,
) -> Result<Vec<F>> {
    weights.check()?;
    let d = weights.d;
    if x.len() != mask.len() * d {
        return Err(ProbeError::Shape(format!(
            "mha_block: x has {} values, mask {} rows, d = {d}",
            x.len(),
            mask.len()
        )));
    }
    let rows = valid_rows(mask);
    if rows.is_empty() {
        return Err(ProbeError::EmptyMask("mha_block".into()));
    }
    let mut out = vec![F::zero(); d];
    mha_infer(weights, x, &rows, op, &mut out, &mut MhaScratch::default(), None);
    Ok(out)
}
