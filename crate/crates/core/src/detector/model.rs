//! Backbone and prediction branches.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Total downsampling of the backbone.
pub const STRIDE: usize = 8;

/// Lower bound of the predicted per-side uncertainty, in stride units.
pub const DELTA_FLOOR: f64 = 0.05;

/// Focal-loss prior for the initial foreground probability.
const PRIOR_PROB: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// Output channels of the three stride-2 backbone convolutions.
    pub backbone_widths: [usize; 3],
    /// Width of the shared 3x3 head tower; 0 disables the tower.
    pub tower_width: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            backbone_widths: [16, 32, 32],
            tower_width: 32,
        }
    }
}

/// Feature-map geometry of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Grid {
    /// Grid for an `image_h x image_w` input; both must be multiples of [`STRIDE`].
    pub fn for_image(image_h: usize, image_w: usize) -> Result<Self> {
        if image_h == 0 || image_w == 0 || image_h % STRIDE != 0 || image_w % STRIDE != 0 {
            return Err(Error::InvalidArgument(format!(
                "image {image_h}x{image_w} is not divisible by stride {STRIDE}"
            )));
        }
        Ok(Self {
            height: image_h / STRIDE,
            width: image_w / STRIDE,
            stride: STRIDE,
        })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel center of location `idx` (row-major).
    pub fn center(&self, idx: usize) -> (f64, f64) {
        let (row, col) = (idx / self.width, idx % self.width);
        (
            (col as f64 + 0.5) * self.stride as f64,
            (row as f64 + 0.5) * self.stride as f64,
        )
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height * self.stride, self.width * self.stride)
    }
}

/// Parameters of the full detector (backbone plus four head branches).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub config: DetectorConfig,
    pub params: ParamSet,
}

const HEAD_BRANCHES: [&str; 4] = ["cls", "ctr", "reg", "unc"];

impl DetectorParams {
    pub fn init(config: &DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.num_classes == 0 || config.backbone_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "degenerate detector config {config:?}"
            )));
        }
        let mut params = ParamSet::new();
        let mut c_in = 3;
        for (i, &c_out) in config.backbone_widths.iter().enumerate() {
            push_conv(&mut params, &format!("backbone.{i}"), c_out, c_in, rng);
            c_in = c_out;
        }
        if config.tower_width > 0 {
            push_conv(&mut params, "tower", config.tower_width, c_in, rng);
            c_in = config.tower_width;
        }
        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        for branch in HEAD_BRANCHES {
            let c_out = branch_channels(config, branch);
            let w = (0..c_out * c_in * 9).map(|_| normal.sample(rng)).collect();
            params.push(
                format!("{branch}.weight"),
                Tensor::new(vec![c_out, c_in, 3, 3], w)?,
            );
            let bias = if branch == "cls" { prior_bias } else { 0.0 };
            params.push(format!("{branch}.bias"), Tensor::full(&[c_out], bias));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Sets all four branches' weights and biases to zero.
    pub fn zero_heads(&mut self) {
        for p in self.params.iter_mut() {
            if HEAD_BRANCHES
                .iter()
                .any(|b| p.name.starts_with(&format!("{b}.")))
            {
                p.value.data_mut().fill(0.0);
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Registers every parameter as a gradient-requiring leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars(
            (0..self.params.len())
                .map(|i| tape.param(&self.params, i))
                .collect(),
        )
    }

    /// Registers every parameter as a constant (inference, teacher).
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelVars {
        ModelVars(
            self.params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        )
    }

    /// Runs the detector on one image without recording gradients.
    pub fn predict(&self, image: &Tensor) -> Result<HeadValues> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let out = forward(&mut tape, self, &vars, image)?;
        Ok(out.values(&tape))
    }
}

fn branch_channels(config: &DetectorConfig, branch: &str) -> usize {
    match branch {
        "cls" => config.num_classes,
        "ctr" => 1,
        _ => 4,
    }
}

fn push_conv(params: &mut ParamSet, name: &str, c_out: usize, c_in: usize, rng: &mut impl Rng) {
    let fan_in = (c_in * 9) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
    let w = (0..c_out * c_in * 9).map(|_| normal.sample(rng)).collect();
    params.push(
        format!("{name}.weight"),
        Tensor::new(vec![c_out, c_in, 3, 3], w).expect("consistent shape"),
    );
    params.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
}

/// Tape handles of a [`DetectorParams`], in parameter order.
#[derive(Debug, Clone)]
pub struct ModelVars(pub Vec<Var>);

/// Head outputs recorded on a tape. All maps are `[1, channels, h, w]`.
///
/// `ltrb` and `delta` are in stride units and strictly positive.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub grid: Grid,
    pub cls_logits: Var,
    pub ctr_logits: Var,
    pub ltrb: Var,
    pub delta: Var,
}

impl HeadOutputs {
    pub fn values(&self, tape: &Tape) -> HeadValues {
        HeadValues {
            grid: self.grid,
            cls_logits: tape.value(self.cls_logits).clone(),
            ctr_logits: tape.value(self.ctr_logits).clone(),
            ltrb: tape.value(self.ltrb).clone(),
            delta: tape.value(self.delta).clone(),
        }
    }
}

/// Plain-value head outputs, channel-major per location (`[c * len + loc]`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    pub grid: Grid,
    pub cls_logits: Tensor,
    pub ctr_logits: Tensor,
    pub ltrb: Tensor,
    pub delta: Tensor,
}

impl HeadValues {
    pub fn num_classes(&self) -> usize {
        self.cls_logits.len() / self.grid.len()
    }

    pub fn cls_logit(&self, class: usize, loc: usize) -> f64 {
        self.cls_logits.data()[class * self.grid.len() + loc]
    }

    pub fn ctr_logit(&self, loc: usize) -> f64 {
        self.ctr_logits.data()[loc]
    }

    /// Distances `[l, t, r, b]` in stride units.
    pub fn ltrb_at(&self, loc: usize) -> [f64; 4] {
        side_values(&self.ltrb, self.grid.len(), loc)
    }

    pub fn delta_at(&self, loc: usize) -> [f64; 4] {
        side_values(&self.delta, self.grid.len(), loc)
    }
}

fn side_values(t: &Tensor, n: usize, loc: usize) -> [f64; 4] {
    let d = t.data();
    [d[loc], d[n + loc], d[2 * n + loc], d[3 * n + loc]]
}

/// Converts an `H x W x 3` image into a normalised `[1, 3, H, W]` input.
fn to_input(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(
            "detector",
            format!("expected HxWx3, got {s:?}"),
        ));
    }
    let (h, w) = (s[0], s[1]);
    let src = image.data();
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            data[c * h * w + i] = (src[i * 3 + c] - 0.5) * 4.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Forward pass for one `H x W x 3` image; `H` and `W` must be multiples of 8.
pub fn forward(
    tape: &mut Tape,
    model: &DetectorParams,
    vars: &ModelVars,
    image: &Tensor,
) -> Result<HeadOutputs> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape(
            "detector",
            format!("expected HxWx3, got {s:?}"),
        ));
    }
    let grid = Grid::for_image(s[0], s[1])?;
    let v = &vars.0;
    let mut x = tape.constant(to_input(image)?);
    let mut k = 0;
    for _ in 0..3 {
        x = tape.conv2d(x, v[k], Some(v[k + 1]), 2, 1)?;
        x = tape.relu(x)?;
        k += 2;
    }
    if model.config.tower_width > 0 {
        x = tape.conv2d(x, v[k], Some(v[k + 1]), 1, 1)?;
        x = tape.relu(x)?;
        k += 2;
    }
    // The four branches share one convolution over concatenated weights.
    let weights: Vec<Var> = (0..4).map(|b| v[k + 2 * b]).collect();
    let biases: Vec<Var> = (0..4).map(|b| v[k + 2 * b + 1]).collect();
    let w = tape.concat(&weights, 0)?;
    let b = tape.concat(&biases, 0)?;
    let heads = tape.conv2d(x, w, Some(b), 1, 1)?;

    let c = model.config.num_classes;
    let cls_logits = tape.slice(heads, 1, 0, c)?;
    let ctr_logits = tape.slice(heads, 1, c, c + 1)?;
    let reg_raw = tape.slice(heads, 1, c + 1, c + 5)?;
    let unc_raw = tape.slice(heads, 1, c + 5, c + 9)?;
    let ltrb = tape.softplus(reg_raw)?;
    let delta = tape.softplus(unc_raw)?;
    let delta = tape.shift(delta, DELTA_FLOOR)?;
    Ok(HeadOutputs {
        grid,
        cls_logits,
        ctr_logits,
        ltrb,
        delta,
    })
}
