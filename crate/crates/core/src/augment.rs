//! Weak (geometric) and strong (photometric) augmentation.
//!
//! Strong views are built from the weak view with photometric operations
//! only, so a box valid on the weak view is valid on the strong view as is.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Multiple that view sizes are rounded to (the detector stride).
const SIZE_MULTIPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugPolicy {
    pub flip_prob: f64,
    /// Inclusive range of the resized short side; sizes are multiples of 8.
    pub short_side_range: (usize, usize),
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub cutout_prob: f64,
    /// Inclusive range of the number of cutouts.
    pub cutout_count: (usize, usize),
    /// Cutout side as a fraction of the image side.
    pub cutout_size: (f64, f64),
    /// Fill colour of cutouts, usually the dataset channel mean.
    pub cutout_fill: [f64; 3],
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Boxes narrower or shorter than this after resizing are dropped.
    pub min_box_size: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            short_side_range: (48, 96),
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.5, 1.5),
            cutout_prob: 0.7,
            cutout_count: (1, 2),
            cutout_size: (0.10, 0.25),
            cutout_fill: [0.5; 3],
            jitter_prob: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            min_box_size: 1.0,
        }
    }
}

impl AugPolicy {
    /// No geometric or photometric change at all.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            short_side_range: (0, usize::MAX),
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            cutout_prob: 0.0,
            jitter_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("cutout_prob", self.cutout_prob),
            ("jitter_prob", self.jitter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        let (lo, hi) = self.short_side_range;
        if lo > hi || short_side_choices(lo, hi).is_empty() && !self.keeps_size() {
            return bad(format!(
                "short_side_range {lo}..={hi} holds no multiple of 8"
            ));
        }
        let (s0, s1) = self.blur_sigma;
        if !(s0 > 0.0 && s0 <= s1) {
            return bad(format!(
                "blur_sigma {s0}..={s1} must be positive and ordered"
            ));
        }
        let (c0, c1) = self.cutout_count;
        if c0 > c1 {
            return bad(format!("cutout_count {c0}..={c1} is empty"));
        }
        let (f0, f1) = self.cutout_size;
        if !(f0 > 0.0 && f0 <= f1 && f1 <= 1.0) {
            return bad(format!("cutout_size {f0}..={f1} must lie in (0, 1]"));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.min_box_size >= 0.0) {
            return bad(format!(
                "min_box_size must be non-negative, got {}",
                self.min_box_size
            ));
        }
        Ok(())
    }

    /// Whether the resize step is disabled (full `usize` range).
    fn keeps_size(&self) -> bool {
        self.short_side_range == (0, usize::MAX)
    }
}

fn short_side_choices(lo: usize, hi: usize) -> Vec<usize> {
    let first = lo.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE;
    (first..=hi.min(4096)).step_by(SIZE_MULTIPLE).collect()
}

/// Horizontal flip (applied first, in the source frame) and per-axis scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub flip: bool,
    pub src_width: usize,
    pub src_height: usize,
    pub width: usize,
    pub height: usize,
}

impl Geometry {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            flip: false,
            src_width: width,
            src_height: height,
            width,
            height,
        }
    }

    pub fn scale_x(&self) -> f64 {
        self.width as f64 / self.src_width as f64
    }

    pub fn scale_y(&self) -> f64 {
        self.height as f64 / self.src_height as f64
    }

    /// Maps a source-image box into view coordinates.
    pub fn apply(&self, b: &BBox) -> BBox {
        let (x0, x1) = if self.flip {
            (
                self.src_width as f64 - b.x_max,
                self.src_width as f64 - b.x_min,
            )
        } else {
            (b.x_min, b.x_max)
        };
        let (sx, sy) = (self.scale_x(), self.scale_y());
        BBox {
            x_min: x0 * sx,
            y_min: b.y_min * sy,
            x_max: x1 * sx,
            y_max: b.y_max * sy,
            ..*b
        }
    }

    /// Maps a view box back into source-image coordinates.
    pub fn invert(&self, b: &BBox) -> BBox {
        let (sx, sy) = (self.scale_x(), self.scale_y());
        let (x0, x1) = (b.x_min / sx, b.x_max / sx);
        let (x0, x1) = if self.flip {
            (self.src_width as f64 - x1, self.src_width as f64 - x0)
        } else {
            (x0, x1)
        };
        BBox {
            x_min: x0,
            y_min: b.y_min / sy,
            x_max: x1,
            y_max: b.y_max / sy,
            ..*b
        }
    }
}

/// Weak view of a source image together with its photometric counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub weak: Tensor,
    pub strong: Tensor,
    pub geometry: Geometry,
    /// Boxes in view coordinates (empty for unlabeled images).
    pub boxes: Vec<BBox>,
    pub source_id: u64,
}

fn dims(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(
            "augment",
            format!("expected HxWx3, got {s:?}"),
        ));
    }
    Ok((s[0], s[1]))
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("resize to {out_h}x{out_w}")));
    }
    let src = image.data();
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let (rows, cols) = (axis(out_h, h), axis(out_w, w));
    let mut out = vec![0.0; out_h * out_w * 3];
    for (r, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (c, &(x0, x1, fx)) in cols.iter().enumerate() {
            for ch in 0..3 {
                let p = |y: usize, x: usize| src[(y * w + x) * 3 + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(r * out_w + c) * 3 + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, 3], out)
}

pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            let (d, s) = ((r * w + c) * 3, (r * w + (w - 1 - c)) * 3);
            out[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Applies `geometry` to an image and its boxes; boxes that end up smaller
/// than `min_box_size` on either side are dropped.
pub fn apply_geometry(
    image: &Tensor,
    boxes: &[BBox],
    geometry: &Geometry,
    min_box_size: f64,
) -> Result<(Tensor, Vec<BBox>)> {
    let (h, w) = dims(image)?;
    if (h, w) != (geometry.src_height, geometry.src_width) {
        return Err(Error::shape(
            "apply_geometry",
            format!(
                "image {h}x{w}, geometry expects {}x{}",
                geometry.src_height, geometry.src_width
            ),
        ));
    }
    let flipped = if geometry.flip {
        flip_horizontal(image)?
    } else {
        image.clone()
    };
    let view = resize_bilinear(&flipped, geometry.height, geometry.width)?;
    let mut out = Vec::with_capacity(boxes.len());
    for b in boxes {
        let t = geometry.apply(b);
        if t.width() < min_box_size || t.height() < min_box_size || !t.is_valid() {
            log::debug!("dropping degenerate box {t:?} after resize");
            continue;
        }
        out.push(t);
    }
    Ok((view, out))
}

/// Samples a flip and a short-side size from `policy`.
pub fn sample_geometry(
    width: usize,
    height: usize,
    policy: &AugPolicy,
    rng: &mut impl Rng,
) -> Geometry {
    let flip = policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob);
    if policy.keeps_size() {
        return Geometry {
            flip,
            ..Geometry::identity(width, height)
        };
    }
    let choices = short_side_choices(policy.short_side_range.0, policy.short_side_range.1);
    let short = choices[rng.random_range(0..choices.len())];
    let (src_short, src_long) = (width.min(height), width.max(height));
    let long_exact = src_long as f64 * short as f64 / src_short as f64;
    let long = ((long_exact / SIZE_MULTIPLE as f64).round() as usize).max(1) * SIZE_MULTIPLE;
    let (out_w, out_h) = if width <= height {
        (short, long)
    } else {
        (long, short)
    };
    Geometry {
        flip,
        src_width: width,
        src_height: height,
        width: out_w,
        height: out_h,
    }
}

/// Random flip and multi-scale resize.
pub fn weak_augment(
    image: &Tensor,
    boxes: &[BBox],
    policy: &AugPolicy,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<BBox>, Geometry)> {
    let (h, w) = dims(image)?;
    let geometry = sample_geometry(w, h, policy, rng);
    let (view, boxes) = apply_geometry(image, boxes, &geometry, policy.min_box_size)?;
    Ok((view, boxes, geometry))
}

fn luma(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

pub fn grayscale(image: &Tensor) -> Tensor {
    let mut out = image.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let g = luma(px);
        px.fill(g);
    }
    out
}

/// Brightness, contrast and saturation factors, each applied as is.
pub fn color_jitter(image: &Tensor, brightness: f64, contrast: f64, saturation: f64) -> Tensor {
    let mut out = image.clone();
    let data = out.data_mut();
    for v in data.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let n = (data.len() / 3) as f64;
    let mean = data.chunks_exact(3).map(luma).sum::<f64>() / n;
    for v in data.iter_mut() {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for px in data.chunks_exact_mut(3) {
        let g = luma(px);
        for v in px.iter_mut() {
            *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
        }
    }
    out
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and clamped edges.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for (k, &wgt) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let (rr, cc) = if horizontal {
                            (r as isize, (c as isize + off).clamp(0, w as isize - 1))
                        } else {
                            ((r as isize + off).clamp(0, h as isize - 1), c as isize)
                        };
                        acc += wgt * src[(rr as usize * w + cc as usize) * 3 + ch];
                    }
                    out[(r * w + c) * 3 + ch] = acc;
                }
            }
        }
        out
    };
    let tmp = pass(image.data(), true);
    Tensor::new(vec![h, w, 3], pass(&tmp, false))
}

/// Fills the `width x height` rectangle at `(x, y)` (clipped to the image).
pub fn cutout(
    image: &Tensor,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
    fill: [f64; 3],
) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = image.clone();
    let data = out.data_mut();
    for r in y.min(h)..(y + height).min(h) {
        for c in x.min(w)..(x + width).min(w) {
            let i = (r * w + c) * 3;
            data[i..i + 3].copy_from_slice(&fill);
        }
    }
    out
}

fn jitter_factor(amount: f64, rng: &mut impl Rng) -> f64 {
    if amount > 0.0 {
        rng.random_range(1.0 - amount..=1.0 + amount)
    } else {
        1.0
    }
}

/// Photometric-only augmentation of a weak view: colour jitter, grayscale,
/// Gaussian blur and cutout, each with its own probability.
pub fn strong_augment(weak: &Tensor, policy: &AugPolicy, rng: &mut impl Rng) -> Result<Tensor> {
    let (h, w) = dims(weak)?;
    let mut img = weak.clone();
    if policy.jitter_prob > 0.0 && rng.random_bool(policy.jitter_prob) {
        let b = jitter_factor(policy.brightness, rng);
        let c = jitter_factor(policy.contrast, rng);
        let s = jitter_factor(policy.saturation, rng);
        img = color_jitter(&img, b, c, s);
    }
    if policy.grayscale_prob > 0.0 && rng.random_bool(policy.grayscale_prob) {
        img = grayscale(&img);
    }
    if policy.blur_prob > 0.0 && rng.random_bool(policy.blur_prob) {
        let (lo, hi) = policy.blur_sigma;
        img = gaussian_blur(&img, rng.random_range(lo..=hi))?;
    }
    if policy.cutout_prob > 0.0 && rng.random_bool(policy.cutout_prob) {
        let (n0, n1) = policy.cutout_count;
        let (f0, f1) = policy.cutout_size;
        for _ in 0..rng.random_range(n0..=n1) {
            let cw = ((rng.random_range(f0..=f1) * w as f64).round() as usize).clamp(1, w);
            let ch = ((rng.random_range(f0..=f1) * h as f64).round() as usize).clamp(1, h);
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            img = cutout(&img, x, y, cw, ch, policy.cutout_fill);
        }
    }
    Ok(img)
}

/// Weak view, then a strong view derived from it.
pub fn make_view_pair(
    image: &Tensor,
    boxes: &[BBox],
    source_id: u64,
    policy: &AugPolicy,
    rng: &mut impl Rng,
) -> Result<ViewPair> {
    let (weak, boxes, geometry) = weak_augment(image, boxes, policy, rng)?;
    let strong = strong_augment(&weak, policy, rng)?;
    Ok(ViewPair {
        weak,
        strong,
        geometry,
        boxes,
        source_id,
    })
}
