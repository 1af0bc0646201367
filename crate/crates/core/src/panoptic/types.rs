use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::{read_tsr, write_tsr, TsrTensor};
use crate::tensor::NDArray;

/// Multiplier of the class id in the `u32` panoptic encoding.
pub const LABEL_DIVISOR: u32 = 10_000;

/// Split of class ids into countable things and amorphous stuff.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub things: BTreeSet<u32>,
    pub stuff: BTreeSet<u32>,
    pub void_id: u32,
}

impl ClassPartition {
    pub fn new(
        things: impl IntoIterator<Item = u32>,
        stuff: impl IntoIterator<Item = u32>,
        void_id: u32,
    ) -> Result<Self> {
        let p = Self {
            things: things.into_iter().collect(),
            stuff: stuff.into_iter().collect(),
            void_id,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.things.intersection(&self.stuff).next() {
            return Err(Error::Config(format!("class {c} is both thing and stuff")));
        }
        if self.things.contains(&self.void_id) || self.stuff.contains(&self.void_id) {
            return Err(Error::Config(format!(
                "void id {} is also a class",
                self.void_id
            )));
        }
        if self.void_id >= u32::MAX / LABEL_DIVISOR {
            return Err(Error::Config(
                "void id too large for the panoptic encoding".into(),
            ));
        }
        Ok(())
    }

    pub fn is_thing(&self, class: u32) -> bool {
        self.things.contains(&class)
    }

    pub fn is_stuff(&self, class: u32) -> bool {
        self.stuff.contains(&class)
    }

    pub fn is_valid_label(&self, class: u32) -> bool {
        class == self.void_id || self.is_thing(class) || self.is_stuff(class)
    }

    /// All non-void classes in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.things.union(&self.stuff).copied().collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                "semantic_map",
                &[height, width],
                &[labels.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixels whose class is a thing class.
    pub fn foreground(&self, partition: &ClassPartition) -> Vec<bool> {
        self.labels.iter().map(|&c| partition.is_thing(c)).collect()
    }
}

/// Per-pixel `(class, instance)` labels. Instance 0 marks stuff and void.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u32>,
    pub instances: Vec<u32>,
}

impl PanopticMap {
    pub fn new(
        height: usize,
        width: usize,
        classes: Vec<u32>,
        instances: Vec<u32>,
    ) -> Result<Self> {
        let n = height * width;
        if classes.len() != n || instances.len() != n {
            return Err(Error::shape(
                "panoptic_map",
                &[height, width],
                &[classes.len(), instances.len()],
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
            instances,
        })
    }

    pub fn void(height: usize, width: usize, void_id: u32) -> Self {
        Self {
            height,
            width,
            classes: vec![void_id; height * width],
            instances: vec![0; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn label(&self, i: usize) -> (u32, u32) {
        (self.classes[i], self.instances[i])
    }

    pub fn semantic(&self) -> SemanticMap {
        SemanticMap {
            height: self.height,
            width: self.width,
            labels: self.classes.clone(),
        }
    }

    /// Pixel count of every `(class, instance)` segment, void excluded.
    pub fn segment_areas(&self, void_id: u32) -> BTreeMap<(u32, u32), usize> {
        let mut out = BTreeMap::new();
        for (&c, &i) in self.classes.iter().zip(&self.instances) {
            if c != void_id {
                *out.entry((c, i)).or_insert(0) += 1;
            }
        }
        out
    }

    /// Checks the class/instance invariants against a partition.
    pub fn validate(&self, partition: &ClassPartition) -> Result<()> {
        for (&c, &i) in self.classes.iter().zip(&self.instances) {
            if !partition.is_valid_label(c) {
                return Err(Error::Invariant(format!("unknown class id {c}")));
            }
            if i > 0 && !partition.is_thing(c) {
                return Err(Error::Invariant(format!(
                    "instance {i} on non-thing class {c}"
                )));
            }
            if i >= LABEL_DIVISOR {
                return Err(Error::Invariant(format!(
                    "instance id {i} exceeds the encoding range"
                )));
            }
        }
        Ok(())
    }

    /// `class × 10000 + instance` per pixel.
    pub fn encode(&self) -> NDArray<u32> {
        let data = self
            .classes
            .iter()
            .zip(&self.instances)
            .map(|(&c, &i)| c * LABEL_DIVISOR + i)
            .collect();
        NDArray::new(vec![self.height, self.width], data).expect("dims match")
    }

    pub fn decode(encoded: &NDArray<u32>) -> Result<Self> {
        if encoded.ndim() != 2 {
            return Err(Error::shape("panoptic_decode", encoded.dims(), &[2]));
        }
        let (h, w) = (encoded.dims()[0], encoded.dims()[1]);
        let classes = encoded.data().iter().map(|&v| v / LABEL_DIVISOR).collect();
        let instances = encoded.data().iter().map(|&v| v % LABEL_DIVISOR).collect();
        Self::new(h, w, classes, instances)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tsr(path, &TsrTensor::U32(self.encode()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t = read_tsr(path)?.into_u32().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "panoptic map must be u32".into(),
        })?;
        Self::decode(&t)
    }

    /// Renumbers thing instances to `1..=N` in order of first appearance.
    pub fn compact(&self) -> Self {
        let mut remap = BTreeMap::new();
        let mut next = 1;
        let instances = self
            .instances
            .iter()
            .map(|&i| {
                if i == 0 {
                    0
                } else {
                    *remap.entry(i).or_insert_with(|| {
                        next += 1;
                        next - 1
                    })
                }
            })
            .collect();
        Self {
            instances,
            ..self.clone()
        }
    }
}
