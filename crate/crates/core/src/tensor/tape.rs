//! Reverse-mode differentiation over a linear record of executed operations.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::array::{NDArray, Scalar};
use crate::tensor::kernels::{self, BroadcastMap, MatmulShape};
use crate::tensor::param::{ParamId, ParamStore};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op<T> {
    Leaf(Option<ParamId>),
    Matmul(usize, usize, MatmulShape),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: NDArray<T>,
        inv_std: Vec<T>,
    },
    Gelu(usize),
    Relu(usize),
    Sum(usize),
    Mse(usize, NDArray<T>),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: NDArray<T>,
    },
    Upsample(usize, usize),
    GatherRows(usize, Vec<usize>),
}

struct Node<T> {
    value: NDArray<T>,
    op: Op<T>,
}

/// Ordered record of forward operations. Backward visits the nodes in exact
/// reverse order of execution. A tape belongs to one thread of execution.
pub struct Tape<T = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NDArray<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    pub fn value(&self, v: Var) -> &NDArray<T> {
        &self.nodes[self.idx(v)].value
    }

    /// Constant input. Gradients are still computed for it.
    pub fn input(&mut self, value: NDArray<T>) -> Var {
        self.push(value, Op::Leaf(None))
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf(Some(id)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let shape =
            kernels::matmul_shape(self.nodes[ia].value.dims(), self.nodes[ib].value.dims())?;
        let out = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Matmul(ia, ib, shape)))
    }

    /// `a + b` with `b` broadcast against the trailing axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let out = kernels::add_broadcast(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::Add(ia, ib)))
    }

    /// Elementwise product of equally shaped arrays.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.dims() != bv.dims() {
            return Err(Error::shape("mul", av.dims(), bv.dims()));
        }
        let out = NDArray::new(
            av.dims().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push(out, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.map(|v| v * s);
        self.push(out, Op::Scale(ia, s))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let out = kernels::permute(&self.nodes[ia].value, axes)?;
        Ok(self.push(out, Op::Permute(ia, axes.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let out = self.nodes[ia].value.clone().reshape(dims)?;
        Ok(self.push(out, Op::Reshape(ia)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a);
        let out = kernels::softmax_rows(&self.nodes[ia].value)?;
        Ok(self.push(out, Op::Softmax(ia)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (out, stats) = kernels::layer_norm_with_stats(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
            eps,
        )?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat: stats.xhat,
                inv_std: stats.inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = kernels::gelu(&self.nodes[ia].value);
        self.push(out, Op::Gelu(ia))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = kernels::relu(&self.nodes[ia].value);
        self.push(out, Op::Relu(ia))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let out = NDArray::scalar(self.nodes[ia].value.sum());
        self.push(out, Op::Sum(ia))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &NDArray<T>) -> Result<Var> {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        if v.dims() != target.dims() {
            return Err(Error::shape("mse", v.dims(), target.dims()));
        }
        let n = T::from_usize(v.len());
        let total: T = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (x - t) * (x - t))
            .sum();
        Ok(self.push(NDArray::scalar(total / n), Op::Mse(ia, target.clone())))
    }

    /// Mean softmax cross-entropy of `[.., classes]` logits against class
    /// indices, one per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits);
        let v = &self.nodes[il].value;
        let k = *v.dims().last().unwrap();
        if v.len() / k != targets.len() || targets.iter().any(|&t| t >= k) {
            return Err(Error::shape("cross_entropy", v.dims(), &[targets.len()]));
        }
        let probs = kernels::softmax_rows(v)?;
        let mut total = T::zero();
        for (row, &t) in probs.data().chunks(k).zip(targets) {
            total -= row[t].max(T::min_positive_value()).ln();
        }
        let loss = total / T::from_usize(targets.len());
        Ok(self.push(
            NDArray::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let ia = self.idx(a);
        let out = kernels::upsample_nearest(&self.nodes[ia].value, factor)?;
        Ok(self.push(out, Op::Upsample(ia, factor)))
    }

    /// Selects rows of a 2-D array.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.idx(a);
        let v = &self.nodes[ia].value;
        if v.ndim() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= v.dims()[0]) {
            return Err(Error::shape("gather_rows", v.dims(), rows));
        }
        let w = v.dims()[1];
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
        let out = NDArray::new(vec![rows.len(), w], data)?;
        Ok(self.push(out, Op::GatherRows(ia, rows.to_vec())))
    }

    /// Backpropagates from a scalar `loss` seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with(loss, T::one())
    }

    /// Backpropagates from a scalar `loss` seeded with `seed` (the upstream
    /// gradient of the loss).
    pub fn backward_with(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage(
                "backward called before any forward operation".into(),
            ));
        }
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Usage("loss was not recorded on this tape".into()));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.nodes[loss.idx].value.dims()
            )));
        }
        let mut grads: Vec<Option<NDArray<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(NDArray::filled(self.nodes[loss.idx].value.dims(), seed));

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            params: self
                .nodes
                .iter()
                .map(|n| match n.op {
                    Op::Leaf(p) => p,
                    _ => None,
                })
                .collect(),
        })
    }

    /// Backpropagates and adds the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate(store);
        Ok(())
    }

    fn backward_node(
        &self,
        i: usize,
        g: &NDArray<T>,
        grads: &mut [Option<NDArray<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf(_) => {}
            Op::Matmul(a, b, s) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut ga = NDArray::zeros(av.dims());
                let mut gb = NDArray::zeros(bv.dims());
                for bi in 0..s.batch {
                    let boff = if s.shared_rhs { 0 } else { bi * s.k * s.n };
                    let gslice = &g.data()[bi * s.m * s.n..(bi + 1) * s.m * s.n];
                    kernels::gemm_nt(
                        gslice,
                        &bv.data()[boff..boff + s.k * s.n],
                        &mut ga.data_mut()[bi * s.m * s.k..(bi + 1) * s.m * s.k],
                        s.m,
                        s.n,
                        s.k,
                    );
                    kernels::gemm_tn(
                        &av.data()[bi * s.m * s.k..(bi + 1) * s.m * s.k],
                        gslice,
                        &mut gb.data_mut()[boff..boff + s.k * s.n],
                        s.m,
                        s.k,
                        s.n,
                    );
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                let bdims = self.nodes[*b].value.dims();
                let map = BroadcastMap::new(g.dims(), bdims)?;
                let mut gb = NDArray::zeros(bdims);
                let gd = g.data();
                map.for_each(|oi, bi| gb.data_mut()[bi] += gd[oi]);
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut ga = g.clone();
                ga.data_mut()
                    .iter_mut()
                    .zip(bv.data())
                    .for_each(|(o, &y)| *o *= y);
                let mut gb = g.clone();
                gb.data_mut()
                    .iter_mut()
                    .zip(av.data())
                    .for_each(|(o, &x)| *o *= x);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * *s)),
            Op::Permute(a, axes) => {
                let back = kernels::permute(g, &kernels::inverse_axes(axes))?;
                accumulate(grads, *a, back);
            }
            Op::Reshape(a) => {
                let back = g.clone().reshape(self.nodes[*a].value.dims())?;
                accumulate(grads, *a, back);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = *y.dims().last().unwrap();
                let mut ga = NDArray::zeros(y.dims());
                for ((gr, yr), out) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(ga.data_mut().chunks_mut(c))
                {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = &self.nodes[*gamma].value;
                let d = gam.len();
                let inv_d = T::from_usize(d).recip();
                let mut gx = NDArray::zeros(xhat.dims());
                let mut gg = NDArray::zeros(gam.dims());
                let mut gbeta = NDArray::zeros(gam.dims());
                for (t, ((gr, xr), out)) in g
                    .data()
                    .chunks(d)
                    .zip(xhat.data().chunks(d))
                    .zip(gx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gam.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xr[j];
                        gg.data_mut()[j] += gr[j] * xr[j];
                        gbeta.data_mut()[j] += gr[j];
                    }
                    let istd = inv_std[t];
                    for j in 0..d {
                        let dxh = gr[j] * gam.data()[j];
                        out[j] = istd * (dxh - inv_d * sum_dxh - xr[j] * inv_d * sum_dxh_xh);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gbeta);
            }
            Op::Gelu(a) => {
                let x = &self.nodes[*a].value;
                let mut ga = g.clone();
                for (o, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    *o *= kernels::gelu_grad_scalar(xv);
                }
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let mut ga = g.clone();
                for (o, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *o = T::zero();
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let dims = self.nodes[*a].value.dims();
                accumulate(grads, *a, NDArray::filled(dims, g.data()[0]));
            }
            Op::Mse(a, target) => {
                let x = &self.nodes[*a].value;
                let k = T::from_f64(2.0) * g.data()[0] / T::from_usize(x.len());
                let ga = NDArray::new(
                    x.dims().to_vec(),
                    x.data()
                        .iter()
                        .zip(target.data())
                        .map(|(&v, &t)| k * (v - t))
                        .collect(),
                )?;
                accumulate(grads, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = *probs.dims().last().unwrap();
                let scale = g.data()[0] / T::from_usize(targets.len());
                let mut ga = probs.clone();
                for (row, &t) in ga.data_mut().chunks_mut(k).zip(targets) {
                    row[t] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, ga);
            }
            Op::Upsample(a, f) => {
                let x = &self.nodes[*a].value;
                let nd = x.ndim();
                let (h, w, c) = (x.dims()[nd - 3], x.dims()[nd - 2], x.dims()[nd - 1]);
                let lead = x.len() / (h * w * c);
                let (oh, ow) = (h * f, w * f);
                let mut ga = NDArray::zeros(x.dims());
                for bi in 0..lead {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let src = ((bi * oh + y) * ow + xx) * c;
                            let dst = ((bi * h + y / f) * w + xx / f) * c;
                            for ch in 0..c {
                                ga.data_mut()[dst + ch] += g.data()[src + ch];
                            }
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, rows) => {
                let x = &self.nodes[*a].value;
                let w = x.dims()[1];
                let mut ga = NDArray::zeros(x.dims());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..w {
                        ga.data_mut()[r * w + j] += g.data()[i * w + j];
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<NDArray<T>>], idx: usize, g: NDArray<T>) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward pass, indexed by tape variable.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<NDArray<T>>>,
    params: Vec<Option<ParamId>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&NDArray<T>> {
        assert_eq!(v.tape, self.tape, "variable recorded on a different tape");
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter leaf owned by `store` into the
    /// matching `Param.grad`.
    pub fn accumulate(&self, store: &mut ParamStore<T>) {
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(id)) = (g, p) {
                if !store.owns(*id) {
                    continue;
                }
                let dst = &mut store.get_mut(*id).grad;
                for (a, &b) in dst.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}
