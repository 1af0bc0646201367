//! The video module: channel reduction, a factorized attention block, channel
//! expansion, residual and ReLU.
//!
//! Two forward paths exist. [`VideoModule::forward`] evaluates eagerly with
//! the shared kernels and is what streaming inference uses;
//! [`VideoModule::forward_tape`] records the same computation on a [`Tape`]
//! for training and gradient checks.
//!
//! Block layout (post-norm):
//!
//! ```text
//! x  = flatten(reduce(F))                       [B, HW, d]
//! x1 = LN1(x + SelfAttn(q,k = x + pos; v = x))
//! x2 = LN2(x1 + TimeAttn(q = x1 + pos; k = m + pos + temb; v = m))   time variants
//! x3 = LN3(x2 + W2·gelu(W1·x2 + b1) + b2)
//! y  = ReLU(F + expand(unflatten(x3)))
//! ```
//!
//! `m` are the reduced memory tokens. The time stage is skipped while the
//! memory is still empty (first frame of a stream).

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, LN_EPS};
use crate::tensor::{NDArray, ParamId, ParamStore, Rng, Scalar, Tape, Var};
use crate::transformer::attention::{attend_projected, attention_tape, AttentionVars};
use crate::transformer::config::{AttentionVariant, VideoModuleConfig};

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct TimeIds {
    attn: AttnIds,
    norm: NormIds,
    temb: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ModuleIds {
    reduce_w: ParamId,
    reduce_b: ParamId,
    expand_w: ParamId,
    expand_b: ParamId,
    pos_emb: ParamId,
    space: AttnIds,
    norm1: NormIds,
    time: Option<TimeIds>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    norm3: NormIds,
}

/// Expected parameter names and dims for a configuration, in creation order.
pub fn parameter_layout(config: &VideoModuleConfig) -> Vec<(String, Vec<usize>)> {
    let (c, d, p) = (config.channels, config.dim, config.tokens());
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("reduce.weight".into(), vec![c, d]),
        ("reduce.bias".into(), vec![d]),
        ("pos_emb".into(), vec![p, d]),
    ];
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("space_attn.{w}"), vec![d, d]));
    }
    out.push(("norm1.gamma".into(), vec![d]));
    out.push(("norm1.beta".into(), vec![d]));
    if config.variant.uses_memory() {
        out.push(("temporal_emb".into(), vec![config.memory, d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("time_attn.{w}"), vec![d, d]));
        }
        out.push(("norm2.gamma".into(), vec![d]));
        out.push(("norm2.beta".into(), vec![d]));
    }
    out.extend([
        ("mlp.fc1.weight".into(), vec![d, d]),
        ("mlp.fc1.bias".into(), vec![d]),
        ("mlp.fc2.weight".into(), vec![d, d]),
        ("mlp.fc2.bias".into(), vec![d]),
        ("norm3.gamma".into(), vec![d]),
        ("norm3.beta".into(), vec![d]),
        ("expand.weight".into(), vec![d, c]),
        ("expand.bias".into(), vec![c]),
    ]);
    out
}

/// Reduced and projected memory frame, cached so each frame is projected
/// once when it enters the memory.
#[derive(Clone, Debug)]
pub struct ProjectedFrame<T> {
    /// `reduce(M)·Wk` without positional or temporal terms, `[B, HW, d]`.
    pub keys: NDArray<T>,
    /// `reduce(M)·Wv`, `[B, HW, d]`.
    pub values: NDArray<T>,
}

/// Projected key offsets that depend on parameters only: `pos·Wk` and
/// `temb·Wk` of the time attention.
#[derive(Clone, Debug)]
pub struct KeyBias<T> {
    pos: NDArray<T>,
    temporal: NDArray<T>,
}

/// Transformer video module with its parameters.
#[derive(Clone, Debug)]
pub struct VideoModule<T = f32> {
    config: VideoModuleConfig,
    store: ParamStore<T>,
    ids: ModuleIds,
}

/// Reshapes `[B, H, W, d]` features into a `[B, H·W, d]` token sequence in
/// raster order.
pub fn flatten_tokens<T: Scalar>(features: NDArray<T>) -> Result<NDArray<T>> {
    let dims = features.dims().to_vec();
    if dims.len() != 4 {
        return Err(Error::shape("flatten_tokens", &dims, &[4]));
    }
    features.reshape(&[dims[0], dims[1] * dims[2], dims[3]])
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens<T: Scalar>(
    tokens: NDArray<T>,
    height: usize,
    width: usize,
) -> Result<NDArray<T>> {
    let dims = tokens.dims().to_vec();
    if dims.len() != 3 || dims[1] != height * width {
        return Err(Error::shape("unflatten_tokens", &dims, &[height, width]));
    }
    tokens.reshape(&[dims[0], height, width, dims[2]])
}

/// Stacks `T` frames of `[B, H, W, C]` into frame-major tokens
/// `[B, T·H·W, C]`.
pub fn flatten_memory<T: Scalar>(frames: &[NDArray<T>]) -> Result<NDArray<T>> {
    let stacked = stack_frames(frames)?;
    let d = stacked.dims().to_vec();
    stacked.reshape(&[d[0], d[1] * d[2] * d[3], d[4]])
}

// [B, H, W, C] × T → [B, T, H, W, C]
fn stack_frames<T: Scalar>(frames: &[NDArray<T>]) -> Result<NDArray<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::EmptyMemory("no memory frames to stack".into()))?;
    let dims = first.dims().to_vec();
    if dims.len() != 4 {
        return Err(Error::shape("stack_frames", &dims, &[4]));
    }
    let per = first.len() / dims[0];
    let mut data = Vec::with_capacity(first.len() * frames.len());
    for b in 0..dims[0] {
        for f in frames {
            if f.dims() != dims.as_slice() {
                return Err(Error::shape("stack_frames", &dims, f.dims()));
            }
            data.extend_from_slice(&f.data()[b * per..(b + 1) * per]);
        }
    }
    NDArray::new(vec![dims[0], frames.len(), dims[1], dims[2], dims[3]], data)
}

fn add_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<NormIds> {
    Ok(NormIds {
        gamma: store.add(format!("{name}.gamma"), NDArray::ones(&[d]))?,
        beta: store.add(format!("{name}.beta"), NDArray::zeros(&[d]))?,
    })
}

fn add_attn<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    name: &str,
    d: usize,
) -> Result<AttnIds> {
    let mut w = |s: &str| store.add(format!("{name}.{s}"), rng.xavier_uniform(d, d));
    Ok(AttnIds {
        wq: w("wq")?,
        wk: w("wk")?,
        wv: w("wv")?,
        wo: w("wo")?,
    })
}

impl<T: Scalar> VideoModule<T> {
    /// Fresh parameters: Xavier-uniform linear weights, zero biases, unit
    /// layer-norm gains and `N(0, 0.02²)` embeddings, all from `seed`.
    pub fn new(config: VideoModuleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, d, p) = (config.channels, config.dim, config.tokens());
        let mut rng = Rng::new(seed);
        let mut s = ParamStore::new();
        let reduce_w = s.add("reduce.weight", rng.xavier_uniform(c, d))?;
        let reduce_b = s.add("reduce.bias", NDArray::zeros(&[d]))?;
        let pos_emb = s.add("pos_emb", rng.normal_array(&[p, d], 0.0, EMBED_STD))?;
        let space = add_attn(&mut s, &mut rng, "space_attn", d)?;
        let norm1 = add_norm(&mut s, "norm1", d)?;
        let time = if config.variant.uses_memory() {
            let temb = s.add(
                "temporal_emb",
                rng.normal_array(&[config.memory, d], 0.0, EMBED_STD),
            )?;
            let attn = add_attn(&mut s, &mut rng, "time_attn", d)?;
            let norm = add_norm(&mut s, "norm2", d)?;
            Some(TimeIds { attn, norm, temb })
        } else {
            None
        };
        let fc1_w = s.add("mlp.fc1.weight", rng.xavier_uniform(d, d))?;
        let fc1_b = s.add("mlp.fc1.bias", NDArray::zeros(&[d]))?;
        let fc2_w = s.add("mlp.fc2.weight", rng.xavier_uniform(d, d))?;
        let fc2_b = s.add("mlp.fc2.bias", NDArray::zeros(&[d]))?;
        let norm3 = add_norm(&mut s, "norm3", d)?;
        let expand_w = s.add("expand.weight", rng.xavier_uniform(d, c))?;
        let expand_b = s.add("expand.bias", NDArray::zeros(&[c]))?;
        Ok(Self {
            config,
            store: s,
            ids: ModuleIds {
                reduce_w,
                reduce_b,
                expand_w,
                expand_b,
                pos_emb,
                space,
                norm1,
                time,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
                norm3,
            },
        })
    }

    /// Rebuilds a module from named parameters, checking every name and dims
    /// against [`parameter_layout`].
    pub fn from_store(config: VideoModuleConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != store.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                layout.len(),
                store.len()
            )));
        }
        for (name, dims) in &layout {
            let p = store
                .by_name(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if p.value.dims() != dims.as_slice() {
                return Err(Error::shape("from_store", p.value.dims(), dims));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let attn = |prefix: &str| AttnIds {
            wq: id(&format!("{prefix}.wq")),
            wk: id(&format!("{prefix}.wk")),
            wv: id(&format!("{prefix}.wv")),
            wo: id(&format!("{prefix}.wo")),
        };
        let norm = |prefix: &str| NormIds {
            gamma: id(&format!("{prefix}.gamma")),
            beta: id(&format!("{prefix}.beta")),
        };
        let ids = ModuleIds {
            reduce_w: id("reduce.weight"),
            reduce_b: id("reduce.bias"),
            expand_w: id("expand.weight"),
            expand_b: id("expand.bias"),
            pos_emb: id("pos_emb"),
            space: attn("space_attn"),
            norm1: norm("norm1"),
            time: config.variant.uses_memory().then(|| TimeIds {
                attn: attn("time_attn"),
                norm: norm("norm2"),
                temb: id("temporal_emb"),
            }),
            fc1_w: id("mlp.fc1.weight"),
            fc1_b: id("mlp.fc1.bias"),
            fc2_w: id("mlp.fc2.weight"),
            fc2_b: id("mlp.fc2.bias"),
            norm3: norm("norm3"),
        };
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &VideoModuleConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.store
    }

    /// Sets a named parameter to `value` (same dims).
    pub fn set_param(&mut self, name: &str, value: NDArray<T>) -> Result<()> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        let p = self.store.get_mut(id);
        if p.value.dims() != value.dims() {
            return Err(Error::shape("set_param", p.value.dims(), value.dims()));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> VideoModule<U> {
        VideoModule {
            config: self.config.clone(),
            store: self.store.cast(),
            ids: self.ids,
        }
    }

    fn v(&self, id: ParamId) -> &NDArray<T> {
        self.store.value(id)
    }

    fn check_frame(&self, f: &NDArray<T>) -> Result<()> {
        let c = &self.config;
        let d = f.dims();
        if d.len() != 4 || d[1] != c.height || d[2] != c.width || d[3] != c.channels {
            return Err(Error::shape(
                "video_module",
                d,
                &[
                    d.first().copied().unwrap_or(1),
                    c.height,
                    c.width,
                    c.channels,
                ],
            ));
        }
        Ok(())
    }

    fn time_ids(&self) -> Result<TimeIds> {
        self.ids.time.ok_or_else(|| {
            Error::Config(format!(
                "variant {} has no time attention; use a time-space variant",
                self.config.variant
            ))
        })
    }

    /// Channel reduction of `[B, H, W, C]` backbone features to `[B, HW, d]`
    /// tokens.
    pub fn reduce(&self, features: &NDArray<T>) -> Result<NDArray<T>> {
        self.check_frame(features)?;
        let r = kernels::pointwise_conv(
            features,
            self.v(self.ids.reduce_w),
            self.v(self.ids.reduce_b),
        )?;
        flatten_tokens(r)
    }

    /// Spatial multi-head self-attention output before the residual.
    pub(crate) fn space_attention(&self, x: &NDArray<T>) -> Result<NDArray<T>> {
        let a = self.ids.space;
        let qk = kernels::add_broadcast(x, self.v(self.ids.pos_emb))?;
        let q = kernels::matmul(&qk, self.v(a.wq))?;
        let k = kernels::matmul(&qk, self.v(a.wk))?;
        let v = kernels::matmul(x, self.v(a.wv))?;
        let (b, n, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let mut mixed = NDArray::zeros(x.dims());
        let mut scratch = Vec::new();
        for bi in 0..b {
            let r = bi * n * d..(bi + 1) * n * d;
            attend_projected(
                &q.data()[r.clone()],
                &k.data()[r.clone()],
                &v.data()[r.clone()],
                n,
                n,
                d,
                self.config.heads,
                &mut mixed.data_mut()[r],
                &mut scratch,
            );
        }
        kernels::matmul(&mixed, self.v(a.wo))
    }

    fn check_tokens(&self, x: &NDArray<T>) -> Result<()> {
        let c = &self.config;
        if x.ndim() != 3 || x.dims()[1] != c.tokens() || x.dims()[2] != c.dim {
            return Err(Error::shape(
                "tokens",
                x.dims(),
                &[x.dims()[0], c.tokens(), c.dim],
            ));
        }
        Ok(())
    }

    /// Stage 1: `LN1(x + SelfAttn(x))` on `[B, HW, d]` tokens.
    pub fn spatial_stage(&self, x: &NDArray<T>) -> Result<NDArray<T>> {
        self.check_tokens(x)?;
        let a = self.space_attention(x)?;
        let n = self.ids.norm1;
        let sum = kernels::add_broadcast(x, &a)?;
        kernels::layer_norm(&sum, self.v(n.gamma), self.v(n.beta), T::from_f64(LN_EPS))
    }

    /// Projects one reduced memory frame (`[B, HW, d]`) for the time stage.
    pub fn project_memory_frame(&self, reduced: &NDArray<T>) -> Result<ProjectedFrame<T>> {
        let t = self.time_ids()?;
        self.check_tokens(reduced)?;
        Ok(ProjectedFrame {
            keys: kernels::matmul(reduced, self.v(t.attn.wk))?,
            values: kernels::matmul(reduced, self.v(t.attn.wv))?,
        })
    }

    pub fn key_bias(&self) -> Result<KeyBias<T>> {
        let t = self.time_ids()?;
        Ok(KeyBias {
            pos: kernels::matmul(self.v(self.ids.pos_emb), self.v(t.attn.wk))?,
            temporal: kernels::matmul(self.v(t.temb), self.v(t.attn.wk))?,
        })
    }

    /// Time attention output before the residual, over projected memory
    /// frames ordered oldest first. The most recent frame uses temporal
    /// embedding row 0, the one before it row 1, and so on.
    pub(crate) fn time_attention(
        &self,
        x1: &NDArray<T>,
        memory: &[ProjectedFrame<T>],
        bias: &KeyBias<T>,
    ) -> Result<NDArray<T>> {
        let t = self.time_ids()?;
        if memory.is_empty() {
            return Err(Error::EmptyMemory(
                "time attention needs at least one memory frame; use the space variant".into(),
            ));
        }
        let frames = memory.len();
        if frames > self.config.memory {
            return Err(Error::Invalid(format!(
                "{frames} memory frames exceed capacity {}",
                self.config.memory
            )));
        }
        for f in memory {
            if f.keys.dims() != x1.dims() || f.values.dims() != x1.dims() {
                return Err(Error::shape("time_attention", x1.dims(), f.keys.dims()));
            }
        }
        let q_in = kernels::add_broadcast(x1, self.v(self.ids.pos_emb))?;
        let q = kernels::matmul(&q_in, self.v(t.attn.wq))?;
        let (b, p, d) = (x1.dims()[0], x1.dims()[1], x1.dims()[2]);
        let heads = self.config.heads;
        let mut mixed = NDArray::zeros(x1.dims());
        let mut scratch = Vec::new();
        let pos = bias.pos.data();
        let temb_row = |slot: usize| {
            let row = frames - 1 - slot;
            &bias.temporal.data()[row * d..(row + 1) * d]
        };

        match self.config.variant {
            AttentionVariant::GlobalTimeSpace => {
                let mut keys = vec![T::zero(); frames * p * d];
                let mut values = vec![T::zero(); frames * p * d];
                for bi in 0..b {
                    let tok = bi * p * d..(bi + 1) * p * d;
                    for (s, f) in memory.iter().enumerate() {
                        let dst = s * p * d..(s + 1) * p * d;
                        let tr = temb_row(s);
                        for ((k, &raw), &pb) in keys[dst.clone()]
                            .iter_mut()
                            .zip(&f.keys.data()[tok.clone()])
                            .zip(pos)
                        {
                            *k = raw + pb;
                        }
                        for row in keys[dst.clone()].chunks_mut(d) {
                            row.iter_mut().zip(tr).for_each(|(k, &e)| *k += e);
                        }
                        values[dst].copy_from_slice(&f.values.data()[tok.clone()]);
                    }
                    attend_projected(
                        &q.data()[tok.clone()],
                        &keys,
                        &values,
                        p,
                        frames * p,
                        d,
                        heads,
                        &mut mixed.data_mut()[tok],
                        &mut scratch,
                    );
                }
            }
            AttentionVariant::LocalTimeSpace => {
                let mut keys = vec![T::zero(); frames * d];
                let mut values = vec![T::zero(); frames * d];
                for bi in 0..b {
                    for pi in 0..p {
                        let at = (bi * p + pi) * d..(bi * p + pi + 1) * d;
                        let pb = &pos[pi * d..(pi + 1) * d];
                        for (s, f) in memory.iter().enumerate() {
                            let tr = temb_row(s);
                            let kr = &mut keys[s * d..(s + 1) * d];
                            for (((k, &raw), &pv), &e) in kr
                                .iter_mut()
                                .zip(&f.keys.data()[at.clone()])
                                .zip(pb)
                                .zip(tr)
                            {
                                *k = raw + pv + e;
                            }
                            values[s * d..(s + 1) * d]
                                .copy_from_slice(&f.values.data()[at.clone()]);
                        }
                        attend_projected(
                            &q.data()[at.clone()],
                            &keys,
                            &values,
                            1,
                            frames,
                            d,
                            heads,
                            &mut mixed.data_mut()[at],
                            &mut scratch,
                        );
                    }
                }
            }
            AttentionVariant::Space => unreachable!("time ids exist only for time variants"),
        }
        kernels::matmul(&mixed, self.v(t.attn.wo))
    }

    /// Stage 2: `LN2(x1 + TimeAttn(x1, memory))`.
    pub fn temporal_stage(
        &self,
        x1: &NDArray<T>,
        memory: &[ProjectedFrame<T>],
        bias: &KeyBias<T>,
    ) -> Result<NDArray<T>> {
        let t = self.time_ids()?;
        let a = self.time_attention(x1, memory, bias)?;
        let sum = kernels::add_broadcast(x1, &a)?;
        kernels::layer_norm(
            &sum,
            self.v(t.norm.gamma),
            self.v(t.norm.beta),
            T::from_f64(LN_EPS),
        )
    }

    /// MLP sub-block: `LN3(x + W2·gelu(W1·x + b1) + b2)`.
    pub fn mlp_stage(&self, x: &NDArray<T>) -> Result<NDArray<T>> {
        let h = kernels::matmul(x, self.v(self.ids.fc1_w))?;
        let h = kernels::gelu(&kernels::add_broadcast(&h, self.v(self.ids.fc1_b))?);
        let o = kernels::matmul(&h, self.v(self.ids.fc2_w))?;
        let o = kernels::add_broadcast(&o, self.v(self.ids.fc2_b))?;
        let sum = kernels::add_broadcast(x, &o)?;
        let n = self.ids.norm3;
        kernels::layer_norm(&sum, self.v(n.gamma), self.v(n.beta), T::from_f64(LN_EPS))
    }

    /// Expansion back to `C` channels, residual with the backbone features
    /// and ReLU.
    pub fn expand_residual(&self, x3: &NDArray<T>, features: &NDArray<T>) -> Result<NDArray<T>> {
        let grid = unflatten_tokens(x3.clone(), self.config.height, self.config.width)?;
        let e =
            kernels::pointwise_conv(&grid, self.v(self.ids.expand_w), self.v(self.ids.expand_b))?;
        if e.dims() != features.dims() {
            return Err(Error::shape("expand_residual", e.dims(), features.dims()));
        }
        Ok(kernels::relu(&kernels::add_broadcast(features, &e)?))
    }

    /// Space attention block on `[B, HW, d]` tokens: self-attention stage
    /// then the MLP sub-block.
    pub fn space_attention_block(&self, tokens: &NDArray<T>) -> Result<NDArray<T>> {
        let x1 = self.spatial_stage(tokens)?;
        self.mlp_stage(&x1)
    }

    fn time_block(
        &self,
        tokens: &NDArray<T>,
        memory: &[NDArray<T>],
        want: AttentionVariant,
    ) -> Result<NDArray<T>> {
        if self.config.variant != want {
            return Err(Error::Config(format!(
                "module is configured for {}, not {want}",
                self.config.variant
            )));
        }
        if memory.is_empty() {
            return Err(Error::EmptyMemory(format!(
                "{want} needs past frames; use the space variant for single frames"
            )));
        }
        let projected = memory
            .iter()
            .map(|m| self.reduce(m).and_then(|r| self.project_memory_frame(&r)))
            .collect::<Result<Vec<_>>>()?;
        let x1 = self.spatial_stage(tokens)?;
        let x2 = self.temporal_stage(&x1, &projected, &self.key_bias()?)?;
        self.mlp_stage(&x2)
    }

    /// Global time-space block: spatial self-attention, cross-attention from
    /// the query tokens to all `T·HW` memory tokens, then the MLP sub-block.
    /// `memory` holds backbone frames `[B, H, W, C]`, oldest first.
    pub fn global_time_space_block(
        &self,
        tokens: &NDArray<T>,
        memory: &[NDArray<T>],
    ) -> Result<NDArray<T>> {
        self.time_block(tokens, memory, AttentionVariant::GlobalTimeSpace)
    }

    /// Local time-space block: spatial self-attention, then per-position
    /// cross-attention to the `T` memory tokens at the same location.
    pub fn local_time_space_block(
        &self,
        tokens: &NDArray<T>,
        memory: &[NDArray<T>],
    ) -> Result<NDArray<T>> {
        self.time_block(tokens, memory, AttentionVariant::LocalTimeSpace)
    }

    /// Full eager forward of `[B, H, W, C]` backbone features with a memory
    /// of past backbone frames (oldest first). Time variants skip the time
    /// stage when `memory` is empty.
    pub fn forward(&self, features: &NDArray<T>, memory: &[NDArray<T>]) -> Result<NDArray<T>> {
        self.check_frame(features)?;
        for m in memory {
            if m.dims() != features.dims() {
                return Err(Error::shape(
                    "video_module_forward",
                    features.dims(),
                    m.dims(),
                ));
            }
        }
        let projected = if self.config.variant.uses_memory() {
            memory
                .iter()
                .map(|m| self.reduce(m).and_then(|r| self.project_memory_frame(&r)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let bias = if projected.is_empty() {
            None
        } else {
            Some(self.key_bias()?)
        };
        self.forward_projected(features, &projected, bias.as_ref())
    }

    /// Forward with memory frames already reduced and projected.
    pub fn forward_projected(
        &self,
        features: &NDArray<T>,
        memory: &[ProjectedFrame<T>],
        bias: Option<&KeyBias<T>>,
    ) -> Result<NDArray<T>> {
        let x = self.reduce(features)?;
        let x1 = self.spatial_stage(&x)?;
        let x2 = match (
            self.config.variant.uses_memory() && !memory.is_empty(),
            bias,
        ) {
            (true, Some(bias)) => self.temporal_stage(&x1, memory, bias)?,
            (true, None) => self.temporal_stage(&x1, memory, &self.key_bias()?)?,
            (false, _) => x1,
        };
        let x3 = self.mlp_stage(&x2)?;
        self.expand_residual(&x3, features)
    }

    /// Records the forward pass on `tape`. `features` is a `[B, H, W, C]`
    /// variable; memory frames enter as constants.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        features: Var,
        memory: &[NDArray<T>],
    ) -> Result<Var> {
        let f = tape.value(features).clone();
        self.check_frame(&f)?;
        let c = &self.config;
        let (b, p, d) = (f.dims()[0], c.tokens(), c.dim);
        let pv = |tape: &mut Tape<T>, id: ParamId| tape.param(&self.store, id);

        let reduce_w = pv(tape, self.ids.reduce_w);
        let reduce_b = pv(tape, self.ids.reduce_b);
        let pos = pv(tape, self.ids.pos_emb);

        let x = tape.matmul(features, reduce_w)?;
        let x = tape.add(x, reduce_b)?;
        let x = tape.reshape(x, &[b, p, d])?;

        let sa = self.ids.space;
        let space = AttentionVars {
            wq: pv(tape, sa.wq),
            wk: pv(tape, sa.wk),
            wv: pv(tape, sa.wv),
            wo: pv(tape, sa.wo),
        };
        let qk = tape.add(x, pos)?;
        let a = attention_tape(tape, qk, qk, x, space, c.heads)?;
        let x1 = tape.add(x, a)?;
        let (g1, b1) = (
            pv(tape, self.ids.norm1.gamma),
            pv(tape, self.ids.norm1.beta),
        );
        let x1 = tape.layer_norm(x1, g1, b1, T::from_f64(LN_EPS))?;

        let use_time = c.variant.uses_memory() && !memory.is_empty();
        let x2 = if use_time {
            let t = self.time_ids()?;
            let frames = memory.len();
            if frames > c.memory {
                return Err(Error::Invalid(format!(
                    "{frames} memory frames exceed capacity {}",
                    c.memory
                )));
            }
            for m in memory {
                if m.dims() != f.dims() {
                    return Err(Error::shape("video_module_forward", f.dims(), m.dims()));
                }
            }
            let stacked = tape.input(stack_frames(memory)?);
            let m = tape.matmul(stacked, reduce_w)?;
            let m = tape.add(m, reduce_b)?;
            let m = tape.reshape(m, &[b, frames, p, d])?;
            let temb = pv(tape, t.temb);
            let rows: Vec<usize> = (0..frames).map(|s| frames - 1 - s).collect();
            let temb = tape.gather_rows(temb, &rows)?;
            let temb = tape.reshape(temb, &[frames, 1, d])?;
            let keys = tape.add(m, pos)?;
            let keys = tape.add(keys, temb)?;
            let time = AttentionVars {
                wq: pv(tape, t.attn.wq),
                wk: pv(tape, t.attn.wk),
                wv: pv(tape, t.attn.wv),
                wo: pv(tape, t.attn.wo),
            };
            let q = tape.add(x1, pos)?;
            let a = match c.variant {
                AttentionVariant::GlobalTimeSpace => {
                    let keys = tape.reshape(keys, &[b, frames * p, d])?;
                    let values = tape.reshape(m, &[b, frames * p, d])?;
                    attention_tape(tape, q, keys, values, time, c.heads)?
                }
                AttentionVariant::LocalTimeSpace => {
                    let q = tape.reshape(q, &[b * p, 1, d])?;
                    let keys = tape.permute(keys, &[0, 2, 1, 3])?;
                    let keys = tape.reshape(keys, &[b * p, frames, d])?;
                    let values = tape.permute(m, &[0, 2, 1, 3])?;
                    let values = tape.reshape(values, &[b * p, frames, d])?;
                    let a = attention_tape(tape, q, keys, values, time, c.heads)?;
                    tape.reshape(a, &[b, p, d])?
                }
                AttentionVariant::Space => unreachable!(),
            };
            let x2 = tape.add(x1, a)?;
            let (g2, b2) = (pv(tape, t.norm.gamma), pv(tape, t.norm.beta));
            tape.layer_norm(x2, g2, b2, T::from_f64(LN_EPS))?
        } else {
            x1
        };

        let (w1, bb1) = (pv(tape, self.ids.fc1_w), pv(tape, self.ids.fc1_b));
        let (w2, bb2) = (pv(tape, self.ids.fc2_w), pv(tape, self.ids.fc2_b));
        let h = tape.matmul(x2, w1)?;
        let h = tape.add(h, bb1)?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add(o, bb2)?;
        let x3 = tape.add(x2, o)?;
        let (g3, b3) = (
            pv(tape, self.ids.norm3.gamma),
            pv(tape, self.ids.norm3.beta),
        );
        let x3 = tape.layer_norm(x3, g3, b3, T::from_f64(LN_EPS))?;

        let grid = tape.reshape(x3, &[b, c.height, c.width, d])?;
        let (ew, eb) = (pv(tape, self.ids.expand_w), pv(tape, self.ids.expand_b));
        let e = tape.matmul(grid, ew)?;
        let e = tape.add(e, eb)?;
        let y = tape.add(features, e)?;
        Ok(tape.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(variant: AttentionVariant, memory: usize, heads: usize) -> VideoModuleConfig {
        VideoModuleConfig {
            channels: 6,
            dim: 4,
            memory,
            heads,
            variant,
            height: 3,
            width: 2,
        }
    }

    fn frame(rng: &mut Rng, c: &VideoModuleConfig) -> NDArray<f64> {
        rng.normal_array(&[1, c.height, c.width, c.channels], 0.0, 1.0)
    }

    #[test]
    fn flatten_is_raster_order_and_invertible() {
        let f = NDArray::<f32>::from_f64_slice(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = flatten_tokens(f.clone()).unwrap();
        assert_eq!(t.dims(), &[1, 4, 1]);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unflatten_tokens(t, 2, 2).unwrap(), f);
    }

    #[test]
    fn memory_flattening_is_frame_major() {
        let a = NDArray::<f32>::from_fn(&[1, 2, 2, 1], |i| i as f32);
        let b = NDArray::<f32>::from_fn(&[1, 2, 2, 1], |i| 10.0 + i as f32);
        let m = flatten_memory(&[a, b]).unwrap();
        assert_eq!(m.dims(), &[1, 8, 1]);
        assert_eq!(m.data(), &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn tape_matches_eager_for_all_variants() {
        for variant in AttentionVariant::ALL {
            for heads in [1, 2] {
                let mem = if variant.uses_memory() { 3 } else { 0 };
                let cfg = toy(variant, mem, heads);
                let module = VideoModule::<f64>::new(cfg.clone(), 17).unwrap();
                let mut rng = Rng::new(4);
                let q = frame(&mut rng, &cfg);
                let memory: Vec<_> = (0..mem).map(|_| frame(&mut rng, &cfg)).collect();
                for used in 0..=mem {
                    let eager = module.forward(&q, &memory[..used]).unwrap();
                    let mut tape = Tape::new();
                    let fv = tape.input(q.clone());
                    let out = module.forward_tape(&mut tape, fv, &memory[..used]).unwrap();
                    let diff = tape.value(out).max_abs_diff(&eager);
                    assert!(diff < 1e-12, "{variant} heads {heads} T {used}: {diff}");
                }
            }
        }
    }

    #[test]
    fn zero_expansion_leaves_relu_of_input() {
        let cfg = toy(AttentionVariant::GlobalTimeSpace, 2, 1);
        let mut m = VideoModule::<f64>::new(cfg.clone(), 1).unwrap();
        m.set_param("expand.weight", NDArray::zeros(&[4, 6]))
            .unwrap();
        let mut rng = Rng::new(2);
        let q = frame(&mut rng, &cfg);
        let out = m.forward(&q, &[frame(&mut rng, &cfg)]).unwrap();
        assert_eq!(out, kernels::relu(&q));
    }

    #[test]
    fn output_shape_preserved_and_non_negative() {
        for variant in AttentionVariant::ALL {
            for s in 1..=4 {
                let cfg = toy(variant, s, 1);
                let m = VideoModule::<f32>::new(cfg.clone(), s as u64).unwrap();
                let mut rng = Rng::new(9);
                let q: NDArray<f32> = rng.normal_array(&[2, 3, 2, 6], 0.0, 1.0);
                let mem: Vec<NDArray<f32>> = (0..s)
                    .map(|_| rng.normal_array(&[2, 3, 2, 6], 0.0, 1.0))
                    .collect();
                let out = m.forward(&q, &mem).unwrap();
                assert_eq!(out.dims(), q.dims());
                assert!(out.data().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn mismatched_memory_frame_is_shape_error() {
        let cfg = toy(AttentionVariant::LocalTimeSpace, 2, 1);
        let m = VideoModule::<f32>::new(cfg, 0).unwrap();
        let q = NDArray::<f32>::zeros(&[1, 3, 2, 6]);
        let bad = NDArray::<f32>::zeros(&[2, 3, 2, 6]);
        assert!(matches!(m.forward(&q, &[bad]), Err(Error::Shape { .. })));
    }

    #[test]
    fn time_blocks_reject_empty_memory() {
        let cfg = toy(AttentionVariant::GlobalTimeSpace, 2, 1);
        let m = VideoModule::<f32>::new(cfg, 0).unwrap();
        let x = NDArray::<f32>::zeros(&[1, 6, 4]);
        assert!(matches!(
            m.global_time_space_block(&x, &[]),
            Err(Error::EmptyMemory(_))
        ));
        let cfg = toy(AttentionVariant::LocalTimeSpace, 2, 1);
        let m = VideoModule::<f32>::new(cfg, 0).unwrap();
        assert!(matches!(
            m.local_time_space_block(&x, &[]),
            Err(Error::EmptyMemory(_))
        ));
    }

    #[test]
    fn zero_weights_reduce_block_to_layer_norm() {
        let cfg = toy(AttentionVariant::Space, 0, 1);
        let mut m = VideoModule::<f64>::new(cfg, 3).unwrap();
        for name in [
            "space_attn.wq",
            "space_attn.wk",
            "space_attn.wv",
            "space_attn.wo",
            "mlp.fc1.weight",
            "mlp.fc2.weight",
        ] {
            m.set_param(name, NDArray::zeros(&[4, 4])).unwrap();
        }
        let x: NDArray<f64> = Rng::new(8).normal_array(&[1, 6, 4], 0.0, 1.0);
        let out = m.space_attention_block(&x).unwrap();
        let norm = |a: &NDArray<f64>| {
            kernels::layer_norm(a, &NDArray::ones(&[4]), &NDArray::zeros(&[4]), LN_EPS).unwrap()
        };
        assert!(out.max_abs_diff(&norm(&norm(&x))) < 1e-12);
        assert!(out.max_abs_diff(&norm(&x)) < 1e-3);
    }

    #[test]
    fn from_store_round_trip_and_validation() {
        let cfg = toy(AttentionVariant::LocalTimeSpace, 2, 2);
        let m = VideoModule::<f32>::new(cfg.clone(), 5).unwrap();
        let layout = parameter_layout(&cfg);
        let names: Vec<_> = m.params().iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(
            names,
            layout.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>()
        );
        let rebuilt = VideoModule::from_store(cfg.clone(), m.params().clone()).unwrap();
        let q = NDArray::<f32>::ones(&[1, 3, 2, 6]);
        assert_eq!(
            rebuilt.forward(&q, &[]).unwrap(),
            m.forward(&q, &[]).unwrap()
        );
        let space = toy(AttentionVariant::Space, 0, 2);
        assert!(VideoModule::from_store(space, m.params().clone()).is_err());
    }
}
