//! COCO-format annotation documents.
//!
//! Category and image ids are written 1-based. On read, categories are
//! mapped to contiguous class indices in ascending id order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::boxes::BBox;
use crate::diff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// Rounds to two decimals, the fixed precision of stored boxes.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

impl CocoDocument {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let categories = dataset
            .class_names
            .iter()
            .enumerate()
            .map(|(i, name)| CocoCategory {
                id: i as u64 + 1,
                name: name.clone(),
            })
            .collect();
        let mut images = Vec::with_capacity(dataset.samples.len());
        let mut annotations = Vec::new();
        for s in &dataset.samples {
            let shape = s.image.shape();
            images.push(CocoImage {
                id: s.id,
                file_name: s.file_name.clone(),
                width: shape[1],
                height: shape[0],
            });
            for b in &s.boxes {
                let bbox = b.to_xywh().map(round2);
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: s.id,
                    category_id: b.class_id as u64 + 1,
                    bbox,
                    area: round2(bbox[2] * bbox[3]),
                    iscrowd: 0,
                });
            }
        }
        Self {
            images,
            annotations,
            categories,
        }
    }

    /// Checks referential integrity and box extents.
    pub fn validate(&self) -> Result<()> {
        let mut image_ids = HashSet::new();
        for img in &self.images {
            if !image_ids.insert(img.id) {
                return Err(Error::Coco(format!("duplicate image id {}", img.id)));
            }
        }
        let mut cat_ids = HashSet::new();
        for c in &self.categories {
            if !cat_ids.insert(c.id) {
                return Err(Error::Coco(format!("duplicate category id {}", c.id)));
            }
        }
        for a in &self.annotations {
            if !image_ids.contains(&a.image_id) {
                return Err(Error::Coco(format!(
                    "annotation {} references missing image id {}",
                    a.id, a.image_id
                )));
            }
            if !cat_ids.contains(&a.category_id) {
                return Err(Error::Coco(format!(
                    "annotation {} references missing category id {}",
                    a.id, a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            if !(w > 0.0
                && h > 0.0
                && x.is_finite()
                && y.is_finite()
                && w.is_finite()
                && h.is_finite())
            {
                return Err(Error::Coco(format!(
                    "annotation {} has non-positive extent {:?}",
                    a.id, a.bbox
                )));
            }
        }
        Ok(())
    }

    /// Category id to contiguous class index.
    pub fn class_index(&self) -> BTreeMap<u64, usize> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    }

    /// Class names in class-index order.
    pub fn class_names(&self) -> Vec<String> {
        let mut cats = self.categories.clone();
        cats.sort_by_key(|c| c.id);
        cats.into_iter().map(|c| c.name).collect()
    }

    /// Ground-truth boxes per image id, in annotation order.
    pub fn boxes_by_image(&self) -> BTreeMap<u64, Vec<BBox>> {
        let classes = self.class_index();
        let mut out: BTreeMap<u64, Vec<BBox>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            let class = classes[&a.category_id];
            out.entry(a.image_id)
                .or_default()
                .push(BBox::from_xywh(a.bbox, class));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Writes `annotations.json` and one PNG per image under `dir/images`.
pub fn write_coco(dataset: &Dataset, dir: &Path) -> Result<()> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for s in &dataset.samples {
        save_png(&s.image, &image_dir.join(&s.file_name))?;
    }
    CocoDocument::from_dataset(dataset).write(&dir.join("annotations.json"))
}

/// Reads a dataset written by [`write_coco`] (or any COCO document whose
/// images live in `dir/images`).
pub fn read_coco(dir: &Path) -> Result<Dataset> {
    let doc = CocoDocument::read(&dir.join("annotations.json"))?;
    let mut boxes = doc.boxes_by_image();
    let mut samples = Vec::with_capacity(doc.images.len());
    for img in &doc.images {
        let image = load_png(&dir.join("images").join(&img.file_name))?;
        if image.shape()[..2] != [img.height, img.width] {
            return Err(Error::Coco(format!(
                "image {} is {:?}, document says {}x{}",
                img.id,
                &image.shape()[..2],
                img.height,
                img.width
            )));
        }
        samples.push(Sample {
            id: img.id,
            file_name: img.file_name.clone(),
            image,
            boxes: boxes.remove(&img.id).unwrap_or_default(),
        });
    }
    Ok(Dataset {
        class_names: doc.class_names(),
        samples,
    })
}

/// Saves an `H x W x 3` image with values in `[0, 1]` as 8-bit PNG.
pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(
            "save_png",
            format!("expected HxWx3, got {s:?}"),
        ));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes)
        .expect("buffer length matches shape");
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> CocoDocument {
        CocoDocument {
            images: vec![CocoImage {
                id: 1,
                file_name: "a.png".into(),
                width: 64,
                height: 64,
            }],
            annotations: vec![CocoAnnotation {
                id: 1,
                image_id: 1,
                category_id: 1,
                bbox: [26.0, 26.0, 20.0, 20.0],
                area: 400.0,
                iscrowd: 0,
            }],
            categories: vec![CocoCategory {
                id: 1,
                name: "disc".into(),
            }],
        }
    }

    #[test]
    fn xyxy_to_coco_bbox() {
        let b = BBox::new(26.0, 26.0, 46.0, 46.0, 0);
        assert_eq!(b.to_xywh().map(round2), [26.0, 26.0, 20.0, 20.0]);
    }

    #[test]
    fn dangling_image_reference_names_the_id() {
        let mut d = doc();
        d.annotations[0].image_id = 42;
        let err = d.validate().unwrap_err().to_string();
        assert!(err.contains("42"), "{err}");
    }

    #[test]
    fn non_positive_extent_rejected() {
        let mut d = doc();
        d.annotations[0].bbox[2] = 0.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn malformed_json_rejected() {
        assert!(CocoDocument::from_json("{\"images\": [").is_err());
    }

    #[test]
    fn json_rewrite_is_byte_identical() {
        let mut d = doc();
        d.annotations[0].bbox = [0.1, 12.35, 7.77, 3.3];
        let a = d.to_json().unwrap();
        let b = CocoDocument::from_json(&a).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }
}
