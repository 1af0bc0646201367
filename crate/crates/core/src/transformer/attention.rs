//! Scaled dot-product multi-head attention, eager and recorded on a tape.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, softmax_in_place};
use crate::tensor::{NDArray, Scalar, Tape, Var};

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a, T> {
    pub wq: &'a NDArray<T>,
    pub wk: &'a NDArray<T>,
    pub wv: &'a NDArray<T>,
    pub wo: &'a NDArray<T>,
}

/// Attention over already projected rows, head by head.
///
/// `q` is `nq×d`, `k` and `v` are `nk×d`; the per-head result is written into
/// the matching column block of `out` (`nq×d`), before the output projection.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_projected<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    out: &mut [T],
    scores: &mut Vec<T>,
) {
    let dh = d / heads;
    let scale = T::from_usize(dh).sqrt().recip();
    scores.resize(nk, T::zero());
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..nq {
            let qi = &q[i * d..(i + 1) * d][cols.clone()];
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &k[j * d..(j + 1) * d][cols.clone()];
                let mut acc = T::zero();
                for (&a, &b) in qi.iter().zip(kj) {
                    acc += a * b;
                }
                *s = acc * scale;
            }
            softmax_in_place(&mut scores[..nk]);
            let oi = &mut out[i * d..(i + 1) * d][cols.clone()];
            oi.iter_mut().for_each(|o| *o = T::zero());
            for (j, &p) in scores.iter().enumerate() {
                let vj = &v[j * d..(j + 1) * d][cols.clone()];
                for (o, &x) in oi.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
    }
}

/// Multi-head attention of `nq×d` query embeddings over `nk×d` key and value
/// embeddings: per head `softmax(Q_h K_hᵀ / √(d/heads)) V_h`, heads
/// concatenated and projected by `Wo`.
///
/// Positional or temporal terms must already be added to `queries` and
/// `keys` by the caller.
pub fn multi_head_attention<T: Scalar>(
    queries: &NDArray<T>,
    keys: &NDArray<T>,
    values: &NDArray<T>,
    weights: AttentionWeights<'_, T>,
    heads: usize,
) -> Result<NDArray<T>> {
    if queries.ndim() != 2 || keys.ndim() != 2 || values.ndim() != 2 {
        return Err(Error::shape(
            "multi_head_attention",
            queries.dims(),
            keys.dims(),
        ));
    }
    if keys.dims() != values.dims() {
        return Err(Error::shape(
            "multi_head_attention",
            keys.dims(),
            values.dims(),
        ));
    }
    let d = queries.dims()[1];
    if keys.dims()[1] != d || heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(
            "multi_head_attention",
            queries.dims(),
            keys.dims(),
        ));
    }
    let q = kernels::matmul(queries, weights.wq)?;
    let k = kernels::matmul(keys, weights.wk)?;
    let v = kernels::matmul(values, weights.wv)?;
    let (nq, nk) = (queries.dims()[0], keys.dims()[0]);
    let mut mixed = NDArray::zeros(&[nq, d]);
    attend_projected(
        q.data(),
        k.data(),
        v.data(),
        nq,
        nk,
        d,
        heads,
        mixed.data_mut(),
        &mut Vec::new(),
    );
    kernels::matmul(&mixed, weights.wo)
}

/// Parameters of one attention layer as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Recorded multi-head attention over `[batch, n, d]` inputs.
pub fn attention_tape<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: Var,
    values: Var,
    w: AttentionVars,
    heads: usize,
) -> Result<Var> {
    let qd = tape.value(queries).dims().to_vec();
    let kd = tape.value(keys).dims().to_vec();
    if qd.len() != 3 || kd.len() != 3 || tape.value(values).dims() != kd.as_slice() {
        return Err(Error::shape("attention", &qd, &kd));
    }
    let (batch, nq, d) = (qd[0], qd[1], qd[2]);
    let nk = kd[1];
    if kd[0] != batch || kd[2] != d || d % heads != 0 {
        return Err(Error::shape("attention", &qd, &kd));
    }
    let dh = d / heads;

    let q = tape.matmul(queries, w.wq)?;
    let k = tape.matmul(keys, w.wk)?;
    let v = tape.matmul(values, w.wv)?;

    let q = tape.reshape(q, &[batch, nq, heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[batch, nk, heads, dh])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[batch, nk, heads, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::from_usize(dh).sqrt().recip());
    let probs = tape.softmax(scores)?;
    let mixed = tape.matmul(probs, v)?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[batch, nq, d])?;
    tape.matmul(mixed, w.wo)
}
