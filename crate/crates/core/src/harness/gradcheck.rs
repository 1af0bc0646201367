//! Reverse-mode gradients of the video module against central differences.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::gradcheck::{finite_diff_grad, relative_error};
use crate::tensor::{NDArray, Rng, Tape};
use crate::transformer::{AttentionVariant, VideoModule, VideoModuleConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub variant: AttentionVariant,
    pub memory: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::GlobalTimeSpace,
            memory: 2,
            height: 4,
            width: 4,
            channels: 8,
            dim: 8,
            heads: 2,
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

impl GradcheckConfig {
    pub fn for_variant(variant: AttentionVariant) -> Self {
        let memory = match variant {
            AttentionVariant::Space => 0,
            AttentionVariant::GlobalTimeSpace => 2,
            AttentionVariant::LocalTimeSpace => 3,
        };
        Self {
            variant,
            memory,
            ..Self::default()
        }
    }

    fn module_config(&self) -> VideoModuleConfig {
        VideoModuleConfig {
            channels: self.channels,
            dim: self.dim,
            memory: self.memory,
            heads: self.heads,
            variant: self.variant,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub variant: AttentionVariant,
    pub memory: usize,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Checks every parameter tensor with the scalar loss `sum(y ⊙ R)` for a fixed
/// random `R`. Parameters are perturbed away from their initial values first
/// so that zero-initialized tensors get generic gradients.
pub fn gradcheck(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    let mc = cfg.module_config();
    let mut module = VideoModule::<f64>::new(mc, seed)?;
    let mut rng = Rng::fork(seed, 13);
    let names: Vec<String> = module
        .params()
        .iter()
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in &names {
        let v = module.params().by_name(name).unwrap().value.clone();
        let noise: NDArray<f64> = rng.normal_array(v.dims(), 0.0, 0.3);
        let perturbed = NDArray::new(
            v.dims().to_vec(),
            v.data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        module.set_param(name, perturbed)?;
    }
    let dims = [1, cfg.height, cfg.width, cfg.channels];
    let features: NDArray<f64> = rng.normal_array(&dims, 0.0, 1.0);
    let memory: Vec<NDArray<f64>> = (0..cfg.memory)
        .map(|_| rng.normal_array(&dims, 0.0, 1.0))
        .collect();
    let weights: NDArray<f64> = rng.normal_array(&dims, 0.0, 1.0);

    let loss_of = |m: &VideoModule<f64>| -> f64 {
        let y = m
            .forward(&features, &memory)
            .expect("forward on a validated module");
        y.data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut tape = Tape::new();
    let fv = tape.input(features.clone());
    let y = module.forward_tape(&mut tape, fv, &memory)?;
    let wv = tape.input(weights.clone());
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod);
    module.params_mut().zero_grad();
    tape.backward_into(loss, module.params_mut())?;

    let mut params = Vec::with_capacity(names.len());
    for name in &names {
        let p = module.params().by_name(name).unwrap();
        let analytic = p.grad.clone();
        let x0 = p.value.clone();
        let mut probe = module.clone();
        let numeric = finite_diff_grad(
            |x| {
                probe.set_param(name, x.clone()).expect("same dims");
                loss_of(&probe)
            },
            &x0,
            cfg.eps,
        );
        let rel = relative_error(&analytic, &numeric);
        params.push(ParamCheck {
            name: name.clone(),
            numel: x0.len(),
            rel_error: rel,
            max_abs_error: analytic.max_abs_diff(&numeric),
            pass: rel < cfg.tolerance,
        });
    }
    let max_rel_error = params.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        variant: cfg.variant,
        memory: cfg.memory,
        pass: params.iter().all(|p| p.pass),
        max_rel_error,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_variant_passes_and_covers_embeddings() {
        let r = gradcheck(
            &GradcheckConfig::for_variant(AttentionVariant::LocalTimeSpace),
            1,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        for name in ["pos_emb", "temporal_emb", "time_attn.wq"] {
            assert!(r.params.iter().any(|p| p.name == name), "{name}");
        }
    }

    #[test]
    fn broken_tolerance_fails() {
        let cfg = GradcheckConfig {
            tolerance: 0.0,
            ..GradcheckConfig::for_variant(AttentionVariant::Space)
        };
        let r = gradcheck(&cfg, 2).unwrap();
        assert!(!r.pass);
        assert!(r.max_rel_error < 1e-4);
    }
}
