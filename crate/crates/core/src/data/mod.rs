//! Synthetic detection data, dataset splits and COCO interchange.

mod coco;
mod scene;
mod split;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use coco::{
    load_png, read_coco, round2, save_png, write_coco, CocoAnnotation, CocoCategory, CocoDocument,
    CocoImage,
};
pub use scene::{generate_scene, FrequencyProfile, SceneSpec, LONG_TAIL_COUNTS, SHAPE_NAMES};
pub use split::{
    labeled_count, sample_label_fraction, split_dataset, split_sizes, DatasetSplit, DEFAULT_RATIOS,
};

use crate::boxes::BBox;
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// One annotated image (`H x W x 3`, values in `[0, 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub file_name: String,
    pub image: Tensor,
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// Map from image id to sample position.
    pub fn index(&self) -> HashMap<u64, usize> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect()
    }

    /// Samples for `ids`, in that order.
    pub fn select(&self, ids: &[u64]) -> Result<Vec<&Sample>> {
        let index = self.index();
        ids.iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|&i| &self.samples[i])
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown image id {id}")))
            })
            .collect()
    }

    /// Per-channel pixel mean over `ids`.
    pub fn channel_mean(&self, ids: &[u64]) -> Result<[f64; 3]> {
        let samples = self.select(ids)?;
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for s in samples {
            for px in s.image.data().chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyData("no pixels for channel mean".into()));
        }
        Ok(sum.map(|v| v / count as f64))
    }
}

/// Generates `count` scenes with ids `1..=count`. Image `i` draws from its
/// own ChaCha stream, so any image can be regenerated independently.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (image, boxes) = generate_scene(spec, &mut rng)?;
        let id = i as u64 + 1;
        samples.push(Sample {
            id,
            file_name: format!("{id:06}.png"),
            image,
            boxes,
        });
    }
    Ok(Dataset {
        class_names: spec.class_names(),
        samples,
    })
}
