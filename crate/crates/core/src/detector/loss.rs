//! Supervised detection losses.
//!
//! * classification: sigmoid focal loss over every location and class
//! * regression: `-ln IoU` of the predicted and target `ltrb` at foreground
//! * centerness: binary cross-entropy at foreground
//! * uncertainty: Laplace negative log-likelihood of the regression error,
//!   shifted by `ln DELTA_FLOOR` so that its infimum is zero, averaged over
//!   the four sides
//!
//! Every term is summed per image and normalised by the number of foreground
//! locations over the whole batch.

use serde::{Deserialize, Serialize};

use super::assign::LocationTargets;
use super::model::{HeadOutputs, DELTA_FLOOR};
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Per-element sigmoid focal loss, the scalar reference formula.
pub fn focal_loss_value(logit: f64, target: bool, p: FocalParams) -> f64 {
    let prob = crate::diff::sigmoid(logit);
    let (p_t, alpha_t) = if target {
        (prob, p.alpha)
    } else {
        (1.0 - prob, 1.0 - p.alpha)
    };
    -alpha_t * (1.0 - p_t).powf(p.gamma) * p_t.ln()
}

/// Weighted focal loss summed over every element of `logits`.
///
/// `targets` holds 0/1 labels and `weights` per-element weights, both laid
/// out like `logits`.
pub fn focal_loss_sum(
    tape: &mut Tape,
    logits: Var,
    targets: &[f64],
    weights: &[f64],
    p: FocalParams,
) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let n = tape.value(logits).len();
    if targets.len() != n || weights.len() != n {
        return Err(Error::shape(
            "focal_loss",
            format!(
                "{n} logits, {} targets, {} weights",
                targets.len(),
                weights.len()
            ),
        ));
    }
    let pos_w: Vec<f64> = (0..n).map(|i| weights[i] * targets[i] * p.alpha).collect();
    let neg_w: Vec<f64> = (0..n)
        .map(|i| weights[i] * (1.0 - targets[i]) * (1.0 - p.alpha))
        .collect();

    // -ln p = softplus(-z), -ln(1-p) = softplus(z), (1-p)^g = exp(-g softplus(z))
    let neg_z = tape.neg(logits)?;
    let sp_z = tape.softplus(logits)?;
    let sp_neg_z = tape.softplus(neg_z)?;
    let pos_mod = tape.scale(sp_z, -p.gamma)?;
    let pos_mod = tape.exp(pos_mod)?;
    let neg_mod = tape.scale(sp_neg_z, -p.gamma)?;
    let neg_mod = tape.exp(neg_mod)?;
    let pos = tape.mul(pos_mod, sp_neg_z)?;
    let neg = tape.mul(neg_mod, sp_z)?;
    let pos_w = tape.constant(Tensor::new(shape.clone(), pos_w)?);
    let neg_w = tape.constant(Tensor::new(shape, neg_w)?);
    let pos = tape.mul(pos, pos_w)?;
    let neg = tape.mul(neg, neg_w)?;
    let all = tape.add(pos, neg)?;
    tape.sum(all)
}

/// Unnormalised per-image loss sums.
#[derive(Debug, Clone, Copy)]
pub struct SupervisedTerms {
    pub cls: Var,
    pub reg: Var,
    pub ctr: Var,
    pub unc: Var,
    pub num_foreground: usize,
}

/// Normalised supervised loss and its components.
#[derive(Debug, Clone, Copy)]
pub struct SupervisedLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
    pub ctr: Var,
    pub unc: Var,
}

/// Scalar values of a [`SupervisedLoss`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub unc: f64,
}

impl SupervisedLoss {
    pub fn breakdown(&self, tape: &Tape) -> SupervisedBreakdown {
        let v = |x: Var| tape.value(x).item();
        SupervisedBreakdown {
            total: v(self.total),
            cls: v(self.cls),
            reg: v(self.reg),
            ctr: v(self.ctr),
            unc: v(self.unc),
        }
    }
}

pub(crate) fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Builds one-hot class targets laid out as `[C, h*w]`.
pub(crate) fn one_hot(targets: &LocationTargets, num_classes: usize) -> Vec<f64> {
    let n = targets.grid.len();
    let mut y = vec![0.0; num_classes * n];
    for (loc, c) in targets.class.iter().enumerate() {
        if let Some(c) = c {
            y[c * n + loc] = 1.0;
        }
    }
    y
}

fn check_grid(tape: &Tape, out: &HeadOutputs, targets: &LocationTargets) -> Result<usize> {
    if out.grid != targets.grid {
        return Err(Error::shape(
            "supervised_loss",
            format!("outputs on {:?}, targets on {:?}", out.grid, targets.grid),
        ));
    }
    let n = out.grid.len();
    Ok(tape.value(out.cls_logits).len() / n)
}

pub fn supervised_terms(
    tape: &mut Tape,
    out: &HeadOutputs,
    targets: &LocationTargets,
    focal: FocalParams,
) -> Result<SupervisedTerms> {
    supervised_terms_with(tape, out, targets, focal, true)
}

/// [`supervised_terms`] with a choice of whether the regression error inside
/// the uncertainty term is a constant (`detach_error`) or differentiated.
pub fn supervised_terms_with(
    tape: &mut Tape,
    out: &HeadOutputs,
    targets: &LocationTargets,
    focal: FocalParams,
    detach_error: bool,
) -> Result<SupervisedTerms> {
    let num_classes = check_grid(tape, out, targets)?;
    let n = out.grid.len();
    let y = one_hot(targets, num_classes);
    let cls = focal_loss_sum(tape, out.cls_logits, &y, &vec![1.0; y.len()], focal)?;

    let num_fg = targets.num_foreground();
    if num_fg == 0 {
        let (reg, ctr, unc) = (zero(tape), zero(tape), zero(tape));
        return Ok(SupervisedTerms {
            cls,
            reg,
            ctr,
            unc,
            num_foreground: 0,
        });
    }

    let stride = out.grid.stride as f64;
    let mask: Vec<f64> = (0..n)
        .map(|l| if targets.is_foreground(l) { 1.0 } else { 0.0 })
        .collect();
    // targets in stride units, 1.0 at background to keep the IoU finite
    let side_target = |side: usize| -> Vec<f64> {
        (0..n)
            .map(|l| {
                if targets.is_foreground(l) {
                    targets.ltrb[l][side] / stride
                } else {
                    1.0
                }
            })
            .collect()
    };
    let map_shape = vec![1, 1, out.grid.height, out.grid.width];
    let tgt: Vec<Vec<f64>> = (0..4).map(side_target).collect();

    // regression: -ln IoU
    let mut pred = Vec::with_capacity(4);
    let mut tv = Vec::with_capacity(4);
    for (side, t) in tgt.iter().enumerate() {
        pred.push(tape.slice(out.ltrb, 1, side, side + 1)?);
        tv.push(tape.constant(Tensor::new(map_shape.clone(), t.clone())?));
    }
    let pred_w = tape.add(pred[0], pred[2])?;
    let pred_h = tape.add(pred[1], pred[3])?;
    let pred_area = tape.mul(pred_w, pred_h)?;
    let tgt_area: Vec<f64> = (0..n)
        .map(|l| (tgt[0][l] + tgt[2][l]) * (tgt[1][l] + tgt[3][l]))
        .collect();
    let tgt_area = tape.constant(Tensor::new(map_shape.clone(), tgt_area)?);
    let mins: Vec<Var> = (0..4)
        .map(|s| tape.minimum(pred[s], tv[s]))
        .collect::<Result<_>>()?;
    let iw = tape.add(mins[0], mins[2])?;
    let ih = tape.add(mins[1], mins[3])?;
    let inter = tape.mul(iw, ih)?;
    let union = tape.add(pred_area, tgt_area)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let log_iou = tape.log(iou)?;
    let mask_v = tape.constant(Tensor::new(map_shape.clone(), mask.clone())?);
    let reg = tape.mul(log_iou, mask_v)?;
    let reg = tape.sum(reg)?;
    let reg = tape.neg(reg)?;

    // centerness BCE
    let ctr_t = &targets.centerness;
    let pos_w: Vec<f64> = (0..n).map(|l| mask[l] * ctr_t[l]).collect();
    let neg_w: Vec<f64> = (0..n).map(|l| mask[l] * (1.0 - ctr_t[l])).collect();
    let neg_c = tape.neg(out.ctr_logits)?;
    let sp_neg = tape.softplus(neg_c)?;
    let sp_pos = tape.softplus(out.ctr_logits)?;
    let pos_w = tape.constant(Tensor::new(map_shape.clone(), pos_w)?);
    let neg_w = tape.constant(Tensor::new(map_shape, neg_w)?);
    let a = tape.mul(sp_neg, pos_w)?;
    let b = tape.mul(sp_pos, neg_w)?;
    let ctr = tape.add(a, b)?;
    let ctr = tape.sum(ctr)?;

    // uncertainty: mean over sides of |e|/delta + ln(delta / floor)
    let mut mask4 = vec![0.0; 4 * n];
    for side in 0..4 {
        for l in 0..n {
            if targets.is_foreground(l) {
                mask4[side * n + l] = 1.0;
            }
        }
    }
    let shape4 = tape.value(out.delta).shape().to_vec();
    let tgt4 = tape.constant(Tensor::new(shape4.clone(), tgt.concat())?);
    let err = if detach_error {
        let e: Vec<f64> = tape
            .value(out.ltrb)
            .data()
            .iter()
            .zip(tape.value(tgt4).data())
            .map(|(p, t)| (p - t).abs())
            .collect();
        tape.constant(Tensor::new(shape4.clone(), e)?)
    } else {
        let e = tape.sub(out.ltrb, tgt4)?;
        tape.abs(e)?
    };
    let ratio = tape.div(err, out.delta)?;
    let rel = tape.scale(out.delta, 1.0 / DELTA_FLOOR)?;
    let log_rel = tape.log(rel)?;
    let nll = tape.add(ratio, log_rel)?;
    let mask4 = tape.constant(Tensor::new(shape4, mask4)?);
    let unc = tape.mul(nll, mask4)?;
    let unc = tape.sum(unc)?;
    let unc = tape.scale(unc, 0.25)?;

    Ok(SupervisedTerms {
        cls,
        reg,
        ctr,
        unc,
        num_foreground: num_fg,
    })
}

/// Sums per-image terms and normalises by the batch foreground count.
pub fn combine_supervised(tape: &mut Tape, terms: &[SupervisedTerms]) -> Result<SupervisedLoss> {
    if terms.is_empty() {
        return Err(Error::EmptyData("no images in supervised batch".into()));
    }
    let norm = 1.0 / terms.iter().map(|t| t.num_foreground).sum::<usize>().max(1) as f64;
    let total_of = |tape: &mut Tape, pick: fn(&SupervisedTerms) -> Var| -> Result<Var> {
        let mut acc = pick(&terms[0]);
        for t in &terms[1..] {
            acc = tape.add(acc, pick(t))?;
        }
        tape.scale(acc, norm)
    };
    let cls = total_of(tape, |t| t.cls)?;
    let reg = total_of(tape, |t| t.reg)?;
    let ctr = total_of(tape, |t| t.ctr)?;
    let unc = total_of(tape, |t| t.unc)?;
    let total = tape.add(cls, reg)?;
    let total = tape.add(total, ctr)?;
    let total = tape.add(total, unc)?;
    let loss = SupervisedLoss {
        total,
        cls,
        reg,
        ctr,
        unc,
    };
    let b = loss.breakdown(tape);
    if ![b.total, b.cls, b.reg, b.ctr, b.unc]
        .iter()
        .all(|v| v.is_finite())
    {
        return Err(Error::NonFinite("supervised_loss"));
    }
    Ok(loss)
}

/// Supervised loss of a single image.
pub fn supervised_loss(
    tape: &mut Tape,
    out: &HeadOutputs,
    targets: &LocationTargets,
    focal: FocalParams,
) -> Result<SupervisedLoss> {
    let terms = supervised_terms(tape, out, targets, focal)?;
    combine_supervised(tape, &[terms])
}
