//! Parameter checkpoints: one `.tsr` file per tensor, a `manifest.json`
//! mapping names to files, and the module configuration in `config.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::{read_tsr, write_tsr, TsrTensor};
use crate::tensor::{ParamStore, Scalar};
use crate::transformer::config::VideoModuleConfig;
use crate::transformer::module::{parameter_layout, VideoModule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub dims: Vec<usize>,
    pub dtype: String,
}

pub type Manifest = BTreeMap<String, ManifestEntry>;

fn file_name(param: &str) -> String {
    format!("{}.tsr", param.replace('.', "_"))
}

/// Writes `module` under `dir`, creating the directory if needed.
pub fn save_checkpoint<T: Scalar>(module: &VideoModule<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest::new();
    for (_, p) in module.params().iter() {
        let file = file_name(&p.name);
        write_tsr(dir.join(&file), &TsrTensor::from(&p.value))?;
        manifest.insert(
            p.name.clone(),
            ManifestEntry {
                file,
                dims: p.value.dims().to_vec(),
                dtype: T::DTYPE.name().to_string(),
            },
        );
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(module.config())?,
    )?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Tensors stored in a
/// different float type are converted.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<VideoModule<T>> {
    let dir = dir.as_ref();
    let config: VideoModuleConfig =
        serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut store = ParamStore::new();
    for (name, dims) in parameter_layout(&config) {
        let entry = manifest.get(&name).ok_or_else(|| Error::Format {
            path: dir.join("manifest.json"),
            reason: format!("missing parameter {name}"),
        })?;
        let path = dir.join(&entry.file);
        let value = read_tsr(&path)?
            .into_float::<T>()
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: "expected a float tensor".into(),
            })?;
        if value.dims() != dims.as_slice() || entry.dims != dims {
            return Err(Error::shape("load_checkpoint", value.dims(), &dims));
        }
        store.add(name, value)?;
    }
    VideoModule::from_store(config, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NDArray;
    use crate::transformer::config::AttentionVariant;

    #[test]
    fn round_trip_preserves_outputs() {
        let cfg = VideoModuleConfig {
            channels: 6,
            dim: 4,
            memory: 2,
            heads: 2,
            variant: AttentionVariant::GlobalTimeSpace,
            height: 2,
            width: 2,
        };
        let m = VideoModule::<f32>::new(cfg, 13).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let back: VideoModule<f32> = load_checkpoint(dir.path()).unwrap();
        let f = NDArray::<f32>::from_fn(&[1, 2, 2, 6], |i| (i as f32 * 0.37).sin());
        let mem = [f.map(|v| v * 0.5)];
        assert_eq!(
            back.forward(&f, &mem).unwrap(),
            m.forward(&f, &mem).unwrap()
        );

        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["pos_emb"].dims, vec![4, 4]);
        assert_eq!(manifest["pos_emb"].dtype, "f32");
    }

    #[test]
    fn missing_tensor_is_reported() {
        let cfg = VideoModuleConfig {
            channels: 3,
            dim: 2,
            memory: 0,
            heads: 1,
            variant: AttentionVariant::Space,
            height: 1,
            width: 2,
        };
        let m = VideoModule::<f32>::new(cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        fs::remove_file(dir.path().join("norm3_gamma.tsr")).unwrap();
        assert!(load_checkpoint::<f32>(dir.path()).is_err());
    }
}
