use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BoundingBox, ModelConfig, PreparedInput};
use crate::synth::{ConditionTag, DatasetSplit, RgbImage, Sample, SizeBin};

/// A labeled image held as 8-bit pixels; converted to network input on use.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: RgbImage,
    pub bbox: BoundingBox,
    pub label: usize,
    pub condition: ConditionTag,
    pub size_bin: SizeBin,
}

impl Example {
    pub fn prepare(&self, config: &ModelConfig) -> Result<PreparedInput> {
        PreparedInput::new(&self.image.to_tensor(), &self.bbox, config)
    }
}

impl From<Sample> for Example {
    fn from(s: Sample) -> Self {
        Example {
            image: s.image,
            bbox: s.bbox,
            label: s.class_id,
            condition: s.condition,
            size_bin: s.size_bin,
        }
    }
}

/// Reads every image of the split in `dir`.
pub fn load_examples(dir: &Path) -> Result<Vec<Example>> {
    let split = DatasetSplit::open(dir)?;
    split
        .manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(Example {
                image: split.image(i)?,
                bbox: r.bbox,
                label: r.class_id,
                condition: r.condition,
                size_bin: r.size_bin,
            })
        })
        .collect()
}

/// Rejects labels the model cannot output.
pub fn check_labels(examples: &[Example], num_classes: usize) -> Result<()> {
    match examples.iter().find(|e| e.label >= num_classes) {
        Some(e) => Err(Error::Config(format!(
            "label {} does not fit a {num_classes}-class model",
            e.label
        ))),
        None => Ok(()),
    }
}
