//! Sequences on disk: PPM (P6) frames, `.tsr` panoptic maps, flows and
//! visibility masks, and a JSON manifest.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::panoptic::{ClassPartition, PanopticMap};
use crate::synth::scene::{SceneConfig, SceneObject, SyntheticSequence};
use crate::tensor::io::{read_tsr, write_tsr, TsrTensor};
use crate::tensor::NDArray;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub frames: Vec<String>,
    pub panoptic: Vec<String>,
    pub flow: Vec<String>,
    pub visibility: Vec<String>,
    pub partition: ClassPartition,
    pub config: SceneConfig,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
}

pub fn write_ppm(path: impl AsRef<Path>, image: &NDArray<u8>) -> Result<()> {
    let d = image.dims();
    if d.len() != 3 || d[2] != 3 {
        return Err(Error::shape("write_ppm", d, &[0, 0, 3]));
    }
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            image.data(),
            d[1] as u32,
            d[0] as u32,
            ExtendedColorType::Rgb8,
        )?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<NDArray<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    NDArray::new(vec![h as usize, w as usize, 3], img.into_raw())
}

fn name(kind: &str, t: usize, ext: &str) -> String {
    format!("{kind}_{t:04}.{ext}")
}

pub fn save_sequence(seq: &SyntheticSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let n = seq.len();
    let manifest = SequenceManifest {
        frames: (0..n).map(|t| name("frame", t, "ppm")).collect(),
        panoptic: (0..n).map(|t| name("panoptic", t, "tsr")).collect(),
        flow: (0..n).map(|t| name("flow", t, "tsr")).collect(),
        visibility: (0..n).map(|t| name("visibility", t, "tsr")).collect(),
        partition: seq.partition.clone(),
        config: seq.config.clone(),
        seed: seq.seed,
        objects: seq.objects.clone(),
    };
    let (h, w) = (seq.config.height, seq.config.width);
    for t in 0..n {
        write_ppm(dir.join(&manifest.frames[t]), &seq.frames[t])?;
        seq.gt_panoptic[t].save(dir.join(&manifest.panoptic[t]))?;
        seq.gt_flow[t].save(dir.join(&manifest.flow[t]))?;
        let vis = NDArray::new(
            vec![h, w],
            seq.visibility[t].iter().map(|&v| v as u32).collect(),
        )?;
        write_tsr(dir.join(&manifest.visibility[t]), &TsrTensor::U32(vis))?;
    }
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_sequence(dir: impl AsRef<Path>) -> Result<SyntheticSequence> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let manifest: SequenceManifest = serde_json::from_str(&fs::read_to_string(&mpath)?)?;
    let n = manifest.frames.len();
    if [
        manifest.panoptic.len(),
        manifest.flow.len(),
        manifest.visibility.len(),
    ]
    .iter()
    .any(|&k| k != n)
        || n == 0
    {
        return Err(Error::Format {
            path: mpath,
            reason: "frame, panoptic, flow and visibility lists must be non-empty and equally long"
                .into(),
        });
    }
    manifest.partition.validate()?;
    let mut seq = SyntheticSequence {
        config: manifest.config.clone(),
        seed: manifest.seed,
        partition: manifest.partition.clone(),
        objects: manifest.objects.clone(),
        frames: Vec::with_capacity(n),
        gt_panoptic: Vec::with_capacity(n),
        gt_flow: Vec::with_capacity(n),
        visibility: Vec::with_capacity(n),
    };
    for t in 0..n {
        let frame = read_ppm(dir.join(&manifest.frames[t]))?;
        let pan = PanopticMap::load(dir.join(&manifest.panoptic[t]))?;
        let flow = FlowField::load(dir.join(&manifest.flow[t]))?;
        let vpath = dir.join(&manifest.visibility[t]);
        let vis = read_tsr(&vpath)?.into_u32().ok_or_else(|| Error::Format {
            path: vpath.clone(),
            reason: "visibility must be u32".into(),
        })?;
        let (h, w) = (frame.dims()[0], frame.dims()[1]);
        if (pan.height, pan.width) != (h, w)
            || (flow.height(), flow.width()) != (h, w)
            || vis.dims() != [h, w]
        {
            return Err(Error::Format {
                path: dir.join(&manifest.frames[t]),
                reason: format!("frame {t} annotations do not match the image size"),
            });
        }
        seq.frames.push(frame);
        seq.gt_panoptic.push(pan);
        seq.gt_flow.push(flow);
        seq.visibility
            .push(vis.data().iter().map(|&v| v != 0).collect());
    }
    Ok(seq)
}
