//! Eager forward kernels shared by the tape and the streaming inference path.

use crate::error::{Error, Result};
use crate::tensor::array::{strides_of, NDArray, Scalar};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Layout of a (possibly batched) matrix product.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulShape {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single 2-D matrix shared across the batch.
    pub shared_rhs: bool,
}

pub(crate) fn matmul_shape(a: &[usize], b: &[usize]) -> Result<MatmulShape> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_rhs = b_batch.is_empty();
    if k != k2 || (!shared_rhs && a_batch != b_batch) {
        return Err(Error::shape("matmul", a, b));
    }
    Ok(MatmulShape {
        batch: a_batch.iter().product(),
        m,
        k,
        n,
        shared_rhs,
    })
}

/// Matrix product over the last two axes. Leading axes are batch axes and
/// must agree, unless `b` is 2-D in which case it is shared across the batch.
pub fn matmul<T: Scalar>(a: &NDArray<T>, b: &NDArray<T>) -> Result<NDArray<T>> {
    let s = matmul_shape(a.dims(), b.dims())?;
    let mut dims = a.dims()[..a.ndim() - 2].to_vec();
    dims.extend([s.m, s.n]);
    let mut out = NDArray::zeros(&dims);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for bi in 0..s.batch {
        let boff = if s.shared_rhs { 0 } else { bi * s.k * s.n };
        gemm(
            &ad[bi * s.m * s.k..(bi + 1) * s.m * s.k],
            &bd[boff..boff + s.k * s.n],
            &mut od[bi * s.m * s.n..(bi + 1) * s.m * s.n],
            s.m,
            s.k,
            s.n,
        );
    }
    Ok(out)
}

/// `a · bᵀ` over the last two axes, with the same batching rule as [`matmul`].
pub fn matmul_nt<T: Scalar>(a: &NDArray<T>, b: &NDArray<T>) -> Result<NDArray<T>> {
    let ad = a.dims();
    let bd = b.dims();
    if bd.len() < 2 {
        return Err(Error::shape("matmul_nt", ad, bd));
    }
    let mut bt = bd.to_vec();
    let r = bt.len();
    bt.swap(r - 2, r - 1);
    let s = matmul_shape(ad, &bt).map_err(|_| Error::shape("matmul_nt", ad, bd))?;
    let mut dims = ad[..ad.len() - 2].to_vec();
    dims.extend([s.m, s.n]);
    let mut out = NDArray::zeros(&dims);
    let od = out.data_mut();
    for bi in 0..s.batch {
        let boff = if s.shared_rhs { 0 } else { bi * s.k * s.n };
        gemm_nt(
            &a.data()[bi * s.m * s.k..(bi + 1) * s.m * s.k],
            &b.data()[boff..boff + s.k * s.n],
            &mut od[bi * s.m * s.n..(bi + 1) * s.m * s.n],
            s.m,
            s.k,
            s.n,
        );
    }
    Ok(out)
}

/// Softmax over the last axis with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(x: &NDArray<T>) -> Result<NDArray<T>> {
    if !x.is_finite() {
        return Err(Error::Numeric(
            "softmax input contains non-finite values".into(),
        ));
    }
    let c = *x.dims().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = total.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-token statistics saved by [`layer_norm_with_stats`] for the backward pass.
pub(crate) struct LayerNormStats<T> {
    pub xhat: NDArray<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &NDArray<T>,
    gamma: &NDArray<T>,
    beta: &NDArray<T>,
    eps: T,
) -> Result<(NDArray<T>, LayerNormStats<T>)> {
    let d = *x.dims().last().unwrap();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layer_norm", x.dims(), gamma.dims()));
    }
    let inv_d = T::from_usize(d).recip();
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for tok in xhat.data_mut().chunks_mut(d) {
        let mean = tok.iter().copied().sum::<T>() * inv_d;
        let var = tok.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let istd = (var + eps).sqrt().recip();
        for v in tok.iter_mut() {
            *v = (*v - mean) * istd;
        }
        inv_std.push(istd);
    }
    let mut out = xhat.clone();
    for tok in out.data_mut().chunks_mut(d) {
        for ((v, &g), &b) in tok.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok((out, LayerNormStats { xhat, inv_std }))
}

/// Layer normalization over the last axis followed by the affine `gamma·x̂ + beta`.
pub fn layer_norm<T: Scalar>(
    x: &NDArray<T>,
    gamma: &NDArray<T>,
    beta: &NDArray<T>,
    eps: T,
) -> Result<NDArray<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Exact GeLU, `x·Φ(x)` with the Gaussian CDF in erf form.
pub fn gelu<T: Scalar>(x: &NDArray<T>) -> NDArray<T> {
    x.map(gelu_scalar)
}

pub fn relu<T: Scalar>(x: &NDArray<T>) -> NDArray<T> {
    x.map(|v| v.max(T::zero()))
}

/// Elementwise `a + b` where `b` is broadcast against the trailing axes of
/// `a`. Each axis of `b` must equal the matching axis of `a` or be 1.
pub fn add_broadcast<T: Scalar>(a: &NDArray<T>, b: &NDArray<T>) -> Result<NDArray<T>> {
    let map = BroadcastMap::new(a.dims(), b.dims())?;
    let mut out = a.clone();
    let bd = b.data();
    map.for_each(|oi, bi| out.data_mut()[oi] += bd[bi]);
    Ok(out)
}

/// Index mapping from an output array to a right-aligned broadcast operand.
pub(crate) struct BroadcastMap {
    out_dims: Vec<usize>,
    // stride into the operand for every output axis (0 where broadcast)
    strides: Vec<usize>,
    pub identical: bool,
}

impl BroadcastMap {
    pub fn new(out: &[usize], operand: &[usize]) -> Result<Self> {
        if operand.len() > out.len() {
            return Err(Error::shape("broadcast", out, operand));
        }
        let lead = out.len() - operand.len();
        let ostrides = strides_of(operand);
        let mut strides = vec![0; out.len()];
        for (j, (&od, &s)) in operand.iter().zip(&ostrides).enumerate() {
            let target = out[lead + j];
            if od == target {
                strides[lead + j] = s;
            } else if od != 1 {
                return Err(Error::shape("broadcast", out, operand));
            }
        }
        Ok(Self {
            out_dims: out.to_vec(),
            strides,
            identical: out == operand,
        })
    }

    /// Calls `f(out_index, operand_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.out_dims.iter().product();
        if self.identical {
            (0..n).for_each(|i| f(i, i));
            return;
        }
        let nd = self.out_dims.len();
        let mut idx = vec![0usize; nd];
        let mut boff = 0usize;
        for oi in 0..n {
            f(oi, boff);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                boff += self.strides[ax];
                if idx[ax] < self.out_dims[ax] {
                    break;
                }
                boff -= self.strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

/// Axis permutation; output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(x: &NDArray<T>, axes: &[usize]) -> Result<NDArray<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd
        || axes
            .iter()
            .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::shape("permute", x.dims(), axes));
    }
    let in_strides = x.strides();
    let out_dims: Vec<usize> = axes.iter().map(|&a| x.dims()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let data = x.data();
    for _ in 0..x.len() {
        out.push(data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    NDArray::new(out_dims, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// 1×1 convolution over a channels-last map: a per-pixel affine map
/// `[..×Cin] → [..×Cout]`.
pub fn pointwise_conv<T: Scalar>(
    f: &NDArray<T>,
    w: &NDArray<T>,
    b: &NDArray<T>,
) -> Result<NDArray<T>> {
    let cin = *f.dims().last().unwrap();
    if w.ndim() != 2 || w.dims()[0] != cin {
        return Err(Error::shape("pointwise_conv", f.dims(), w.dims()));
    }
    let cout = w.dims()[1];
    if b.len() != cout {
        return Err(Error::shape("pointwise_conv", w.dims(), b.dims()));
    }
    let pixels = f.len() / cin;
    let mut out = vec![T::zero(); pixels * cout];
    gemm(f.data(), w.data(), &mut out, pixels, cin, cout);
    for px in out.chunks_mut(cout) {
        for (v, &bv) in px.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    let mut dims = f.dims().to_vec();
    *dims.last_mut().unwrap() = cout;
    NDArray::new(dims, out)
}

/// Nearest-neighbour upsampling of a `[.., h, w, c]` map by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &NDArray<T>, factor: usize) -> Result<NDArray<T>> {
    if x.ndim() < 3 || factor == 0 {
        return Err(Error::shape("upsample_nearest", x.dims(), &[factor]));
    }
    let nd = x.ndim();
    let (h, w, c) = (x.dims()[nd - 3], x.dims()[nd - 2], x.dims()[nd - 1]);
    let lead: usize = x.dims()[..nd - 3].iter().product();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(lead * oh * ow * c);
    for bi in 0..lead {
        let base = bi * h * w * c;
        for y in 0..oh {
            for xx in 0..ow {
                let src = base + ((y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    let mut dims = x.dims().to_vec();
    dims[nd - 3] = oh;
    dims[nd - 2] = ow;
    NDArray::new(dims, out)
}
