//! Procedural weed-proxy scenes: parametric shapes over a soil-coloured
//! background with small distractor marks and unlabeled leaf-coloured
//! decoy blobs. Both kinds of clutter vanish at zero clutter density.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Instance counts of the long-tail profile, largest class first.
pub const LONG_TAIL_COUNTS: [f64; 12] = [
    352.0, 201.0, 161.0, 122.0, 137.0, 144.0, 117.0, 60.0, 42.0, 31.0, 31.0, 15.0,
];

/// Shape families, in class order.
pub const SHAPE_NAMES: [&str; 12] = [
    "disc",
    "ring",
    "cross",
    "triangle",
    "bar",
    "star",
    "square",
    "diamond",
    "frame",
    "saltire",
    "half-disc",
    "crescent",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyProfile {
    Uniform,
    /// Proportional to [`LONG_TAIL_COUNTS`], truncated to the class count.
    LongTail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub instances: (usize, usize),
    pub profile: FrequencyProfile,
    /// Expected number of distractor marks per 64x64 area.
    pub clutter_density: f64,
    /// Amplitude of per-pixel background texture noise.
    pub texture_noise: f64,
    /// Inclusive range of the object half-extent in pixels.
    pub object_radius: (f64, f64),
    /// Per-channel jitter of object and background colours.
    pub color_jitter: f64,
    /// Maximum relative stretch of an object along each of its axes.
    pub aspect_jitter: f64,
    /// Unlabeled leaf-coloured blobs per distractor mark; these are the hard
    /// negatives of a scene.
    pub decoy_ratio: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::three_class()
    }
}

impl SceneSpec {
    pub fn three_class() -> Self {
        Self {
            image_size: 64,
            num_classes: 3,
            instances: (1, 6),
            profile: FrequencyProfile::Uniform,
            clutter_density: 6.0,
            texture_noise: 0.04,
            object_radius: (6.0, 11.0),
            color_jitter: 0.12,
            aspect_jitter: 0.35,
            decoy_ratio: 0.5,
        }
    }

    pub fn twelve_class() -> Self {
        Self {
            num_classes: 12,
            profile: FrequencyProfile::LongTail,
            ..Self::three_class()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return bad(format!(
                "num_classes must be in 1..={}, got {}",
                SHAPE_NAMES.len(),
                self.num_classes
            ));
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        let (lo, hi) = self.instances;
        if lo == 0 || lo > hi {
            return bad(format!("instances range {lo}..={hi} is empty or zero"));
        }
        let (rlo, rhi) = self.object_radius;
        if !(rlo >= 2.0 && rlo <= rhi && 2.0 * rhi + 4.0 < self.image_size as f64) {
            return bad(format!(
                "object_radius {rlo}..={rhi} does not fit the image"
            ));
        }
        for (name, v) in [
            ("clutter_density", self.clutter_density),
            ("texture_noise", self.texture_noise),
            ("color_jitter", self.color_jitter),
            ("decoy_ratio", self.decoy_ratio),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..0.9).contains(&self.aspect_jitter) {
            return bad(format!(
                "aspect_jitter must be in [0, 0.9), got {}",
                self.aspect_jitter
            ));
        }
        Ok(())
    }

    /// Normalised class probabilities.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let raw: Vec<f64> = match self.profile {
            FrequencyProfile::Uniform => vec![1.0; self.num_classes],
            FrequencyProfile::LongTail => LONG_TAIL_COUNTS[..self.num_classes].to_vec(),
        };
        let total: f64 = raw.iter().sum();
        raw.iter().map(|v| v / total).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.num_classes]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// Membership test of a shape family in its local frame, extent about `[-1, 1]`.
fn inside(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => (0.3..=1.0).contains(&r2),
        2 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        3 => v <= 0.8 && v >= -1.0 + 2.0 * u.abs() * 0.95,
        4 => u.abs() <= 1.0 && v.abs() <= 0.32,
        5 => {
            let phi = v.atan2(u);
            r2.sqrt() <= 0.45 + 0.55 * (2.5 * phi).cos().abs().powi(3)
        }
        6 => u.abs() <= 0.8 && v.abs() <= 0.8,
        7 => u.abs() + v.abs() <= 1.0,
        8 => (0.5..=0.85).contains(&u.abs().max(v.abs())),
        9 => r2 <= 1.0 && ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4),
        10 => r2 <= 1.0 && v >= 0.0,
        _ => r2 <= 1.0 && (u - 0.5).powi(2) + v * v > 0.55,
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn jittered(rng: &mut impl Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| {
        if amount > 0.0 {
            c + rng.random_range(-amount..=amount)
        } else {
            c
        }
    })
}

const SOIL: [f64; 3] = [0.46, 0.36, 0.26];
const LEAF: [f64; 3] = [0.24, 0.56, 0.22];

/// Pixel mask of one placed object, with its tight box.
struct Placement {
    pixels: Vec<(usize, usize)>,
    bbox: BBox,
}

/// Object pose: centre, half-extent, rotation and per-axis stretch.
#[derive(Clone, Copy)]
struct Pose {
    center: (f64, f64),
    radius: f64,
    angle: f64,
    stretch: (f64, f64),
}

fn rasterize(
    shape: impl Fn(f64, f64) -> bool,
    pose: Pose,
    class: usize,
    size: usize,
) -> Option<Placement> {
    let Pose {
        center,
        radius,
        angle,
        stretch,
    } = pose;
    let (s, c) = angle.sin_cos();
    let reach = radius * 1.5 * stretch.0.max(stretch.1);
    let lo = |m: f64| ((m - reach).floor().max(0.0)) as usize;
    let hi = |m: f64| ((m + reach).ceil().min(size as f64)) as usize;
    let mut pixels = Vec::new();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for row in lo(center.1)..hi(center.1) {
        for col in lo(center.0)..hi(center.0) {
            let dx = col as f64 + 0.5 - center.0;
            let dy = row as f64 + 0.5 - center.1;
            let u = (c * dx + s * dy) / (radius * stretch.0);
            let v = (-s * dx + c * dy) / (radius * stretch.1);
            if shape(u, v) {
                pixels.push((row, col));
                x0 = x0.min(col);
                y0 = y0.min(row);
                x1 = x1.max(col + 1);
                y1 = y1.max(row + 1);
            }
        }
    }
    if pixels.len() < 6 || x1 - x0 < 2 || y1 - y0 < 2 {
        return None;
    }
    let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64, class);
    Some(Placement { pixels, bbox })
}

fn separated(a: &BBox, b: &BBox) -> bool {
    a.x_max + 1.0 <= b.x_min
        || b.x_max + 1.0 <= a.x_min
        || a.y_max + 1.0 <= b.y_min
        || b.y_max + 1.0 <= a.y_min
}

fn sample_pose(spec: &SceneSpec, rng: &mut impl Rng, radius_scale: f64) -> Pose {
    let size = spec.image_size as f64;
    let (rlo, rhi) = spec.object_radius;
    let radius = rng.random_range(rlo..=rhi) * radius_scale;
    let margin = radius + 1.0;
    let center = (
        rng.random_range(margin..=size - margin),
        rng.random_range(margin..=size - margin),
    );
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let a = spec.aspect_jitter;
    let stretch = if a > 0.0 {
        (
            rng.random_range(1.0 - a..=1.0 + a),
            rng.random_range(1.0 - a..=1.0 + a),
        )
    } else {
        (1.0, 1.0)
    };
    Pose {
        center,
        radius,
        angle,
        stretch,
    }
}

/// Fills `pixels` with one jittered leaf colour plus per-pixel shading.
fn paint(
    img: &mut [f64],
    size: usize,
    pixels: &[(usize, usize)],
    spec: &SceneSpec,
    rng: &mut impl Rng,
) {
    let color = jittered(rng, LEAF, spec.color_jitter);
    for &(row, col) in pixels {
        let shade = if spec.texture_noise > 0.0 {
            rng.random_range(-spec.texture_noise..=spec.texture_noise)
        } else {
            0.0
        };
        let i = (row * size + col) * 3;
        for ch in 0..3 {
            img[i + ch] = color[ch] + shade;
        }
    }
}

/// Integer count with the given expectation: the floor plus one Bernoulli draw.
fn draw_count(expected: f64, rng: &mut impl Rng) -> usize {
    if expected <= 0.0 {
        return 0;
    }
    let whole = expected.floor() as usize;
    whole + usize::from(rng.random_bool(expected - whole as f64))
}

/// Renders one scene; returns an `S x S x 3` image in `[0, 1]` (multiples of
/// 1/255) and tight boxes, one per object. Objects never touch, so every box
/// side borders a pixel of its own shape.
pub fn generate_scene(spec: &SceneSpec, rng: &mut impl Rng) -> Result<(Tensor, Vec<BBox>)> {
    spec.validate()?;
    let size = spec.image_size;
    let classes = WeightedIndex::new(spec.class_frequencies())
        .map_err(|e| Error::InvalidArgument(format!("class profile: {e}")))?;

    let bg = jittered(rng, SOIL, spec.color_jitter * 0.5);
    let mut img = vec![0.0; size * size * 3];
    for px in img.chunks_exact_mut(3) {
        let n = if spec.texture_noise > 0.0 {
            rng.random_range(-spec.texture_noise..=spec.texture_noise)
        } else {
            0.0
        };
        for ch in 0..3 {
            px[ch] = bg[ch] + n;
        }
    }

    // distractor marks: short strokes and specks in leaf or dark soil tones
    let area_scale = (size * size) as f64 / 4096.0;
    let expected = spec.clutter_density * area_scale;
    let marks = draw_count(expected, rng);
    for _ in 0..marks {
        let color = if rng.random_bool(0.5) {
            jittered(rng, LEAF, spec.color_jitter)
        } else {
            jittered(rng, [0.3, 0.24, 0.18], spec.color_jitter * 0.5)
        };
        let (x, y) = (
            rng.random_range(0.0..size as f64),
            rng.random_range(0.0..size as f64),
        );
        let len = rng.random_range(2.0..7.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let steps = (len * 2.0) as usize + 1;
        for k in 0..steps {
            let t = k as f64 / 2.0;
            let (px, py) = (x + t * angle.cos(), y + t * angle.sin());
            if px >= 0.0 && py >= 0.0 && (px as usize) < size && (py as usize) < size {
                let i = (py as usize * size + px as usize) * 3;
                img[i..i + 3].copy_from_slice(&color);
            }
        }
    }

    let count = rng.random_range(spec.instances.0..=spec.instances.1);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut radius_scale: f64 = 1.0;
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts % 200 == 0 {
            // crowded: shrink remaining objects rather than give up
            radius_scale = (radius_scale * 0.9).max(0.5);
        }
        if attempts > 50_000 {
            return Err(Error::InvalidArgument(format!(
                "could not place {count} separated objects in a {size}px image"
            )));
        }
        let class = classes.sample(rng);
        let pose = sample_pose(spec, rng, radius_scale);
        let Some(p) = rasterize(|u, v| inside(class, u, v), pose, class, size) else {
            continue;
        };
        if !boxes.iter().all(|b| separated(b, &p.bbox)) {
            continue;
        }
        paint(&mut img, size, &p.pixels, spec, rng);
        boxes.push(p.bbox);
    }

    // decoys: irregular leaf blobs that belong to no class, kept apart from
    // objects so that object boxes stay tight
    let decoys = draw_count(expected * spec.decoy_ratio, rng);
    let mut placed: Vec<BBox> = Vec::new();
    for _ in 0..decoys {
        for _ in 0..50 {
            let pose = sample_pose(spec, rng, radius_scale * 0.8);
            let lobes: [(f64, f64); 3] = std::array::from_fn(|_| {
                (
                    rng.random_range(0.15..0.4),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            });
            let blob = |u: f64, v: f64| {
                let phi = v.atan2(u);
                let r: f64 = lobes
                    .iter()
                    .enumerate()
                    .map(|(k, (a, p))| a * ((k as f64 + 2.0) * phi + p).cos())
                    .sum();
                (u * u + v * v).sqrt() <= 0.75 * (1.0 + r)
            };
            let Some(p) = rasterize(blob, pose, 0, size) else {
                continue;
            };
            if boxes.iter().chain(&placed).all(|b| separated(b, &p.bbox)) {
                paint(&mut img, size, &p.pixels, spec, rng);
                placed.push(p.bbox);
                break;
            }
        }
    }
    img.iter_mut().for_each(|v| *v = quantize(*v));
    Ok((Tensor::new(vec![size, size, 3], img)?, boxes))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn plain_single_instance_scene() {
        let spec = SceneSpec {
            instances: (1, 1),
            clutter_density: 0.0,
            texture_noise: 0.0,
            ..SceneSpec::three_class()
        };
        let (img, boxes) = generate_scene(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(boxes.len(), 1);
        let b = boxes[0];
        let d = img.data();
        let corner = &d[0..3];
        for row in 0..64 {
            for col in 0..64 {
                let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
                if !b.contains_point(x, y) {
                    assert_eq!(&d[(row * 64 + col) * 3..(row * 64 + col) * 3 + 3], corner);
                }
            }
        }
    }

    #[test]
    fn fixed_instance_count() {
        let spec = SceneSpec {
            instances: (4, 4),
            ..SceneSpec::three_class()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let (_, boxes) = generate_scene(&spec, &mut rng).unwrap();
            assert_eq!(boxes.len(), 4);
            assert!(boxes
                .iter()
                .all(|b| b.is_valid() && b.x_max <= 64.0 && b.y_max <= 64.0));
        }
    }

    #[test]
    fn pixels_are_quantised() {
        let (img, _) = generate_scene(
            &SceneSpec::twelve_class(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        for &v in img.data() {
            assert_eq!(v, (v * 255.0).round() / 255.0);
        }
    }

    #[test]
    fn frequencies_normalised() {
        let f = SceneSpec::twelve_class().class_frequencies();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(f.iter().all(|&p| p > 0.0));
        assert!((f[0] / f[11] - 352.0 / 15.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = SceneSpec::three_class();
        s.num_classes = 13;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::three_class();
        s.instances = (3, 2);
        assert!(s.validate().is_err());
        let mut s = SceneSpec::three_class();
        s.aspect_jitter = 0.9;
        assert!(s.validate().is_err());
        let mut s = SceneSpec::three_class();
        s.decoy_ratio = -0.1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn decoys_paint_outside_boxes() {
        let spec = SceneSpec {
            instances: (1, 1),
            clutter_density: 4.0,
            decoy_ratio: 1.0,
            texture_noise: 0.0,
            ..SceneSpec::three_class()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut off_box = 0;
        for _ in 0..5 {
            let (img, boxes) = generate_scene(&spec, &mut rng).unwrap();
            assert_eq!(boxes.len(), 1);
            let d = img.data();
            let corner = &d[0..3];
            off_box += (0..64 * 64)
                .filter(|i| {
                    let (x, y) = ((i % 64) as f64 + 0.5, (i / 64) as f64 + 0.5);
                    !boxes[0].contains_point(x, y) && &d[i * 3..i * 3 + 3] != corner
                })
                .count();
        }
        assert!(off_box > 50, "{off_box}");
    }
}
