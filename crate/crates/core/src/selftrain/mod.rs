//! Teacher-student self-training: burn-in, EMA teacher, pseudo-labels and
//! the unsupervised classification and regression losses.

mod trainer;

pub use trainer::{
    evaluate, train_loop, BatchSampler, Checkpoint, EvalPoint, Schedule, TrainData, Trainer,
};

use serde::{Deserialize, Serialize};

use crate::augment::ViewPair;
use crate::boxes::BBox;
use crate::detector::{
    assign_targets, combine_supervised, decode_detections, focal_loss_sum, forward, one_hot,
    supervised_terms, zero, DecodeParams, DetectorParams, FocalParams, HeadOutputs, HeadValues,
    LocationTargets, ScoreMode, SupervisedBreakdown,
};
use crate::diff::{ParamSet, Sgd, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfTrainParams {
    /// EMA keep rate of the teacher.
    pub alpha: f64,
    /// Minimum classification score of a pseudo-label.
    pub tau: f64,
    /// Uncertainty margin of the regression gate.
    pub sigma: f64,
    /// Weight of the unsupervised losses.
    pub lambda_u: f64,
    /// Weight of locations outside every pseudo-box; 0 ignores them.
    pub background_weight: f64,
    pub pseudo_nms_iou: f64,
    pub focal: FocalParams,
}

impl Default for SelfTrainParams {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            tau: 0.7,
            sigma: 0.1,
            lambda_u: 2.0,
            background_weight: 0.5,
            pseudo_nms_iou: 0.6,
            focal: FocalParams::default(),
        }
    }
}

impl SelfTrainParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            return bad(format!(
                "lambda_u must be non-negative, got {}",
                self.lambda_u
            ));
        }
        if !(self.background_weight >= 0.0 && self.background_weight.is_finite()) {
            return bad(format!(
                "background_weight must be non-negative, got {}",
                self.background_weight
            ));
        }
        if !(0.0..=1.0).contains(&self.pseudo_nms_iou) {
            return bad(format!(
                "pseudo_nms_iou must be in [0, 1], got {}",
                self.pseudo_nms_iou
            ));
        }
        Ok(())
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    teacher.check_same_layout(student)?;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (a, &b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

/// Teacher, student and the optimiser driving the student.
#[derive(Debug, Clone)]
pub struct TeacherStudentState {
    pub teacher: DetectorParams,
    pub student: DetectorParams,
    pub optimizer: Sgd,
    pub params: SelfTrainParams,
    /// Completed training steps (burn-in included).
    pub iteration: usize,
    pub burn_in_iters: usize,
}

impl TeacherStudentState {
    /// Both roles start from `initial`.
    pub fn new(
        initial: DetectorParams,
        optimizer: Sgd,
        params: SelfTrainParams,
        burn_in_iters: usize,
    ) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            teacher: initial.clone(),
            student: initial,
            optimizer,
            params,
            iteration: 0,
            burn_in_iters,
        })
    }

    pub fn in_burn_in(&self) -> bool {
        self.iteration < self.burn_in_iters
    }

    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(
            &mut self.teacher.params,
            &self.student.params,
            self.params.alpha,
        )
    }
}

/// A teacher box on an unlabeled image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub bbox: BBox,
    /// Teacher uncertainty `[l, t, r, b]` at the box's source location.
    pub delta_t: [f64; 4],
    pub source_view: u64,
}

fn pseudo_decode(tau: f64, nms_iou: f64) -> DecodeParams {
    DecodeParams {
        score_mode: ScoreMode::ClsOnly,
        score_threshold: tau,
        nms_iou,
        ..DecodeParams::default()
    }
}

/// Pseudo-labels from already computed teacher outputs.
pub fn pseudo_labels_from(
    values: &HeadValues,
    tau: f64,
    nms_iou: f64,
    source_view: u64,
) -> Vec<PseudoLabel> {
    decode_detections(values, &pseudo_decode(tau, nms_iou))
        .into_iter()
        .map(|d| PseudoLabel {
            bbox: d.bbox,
            delta_t: d.delta,
            source_view,
        })
        .collect()
}

/// Runs the teacher on a weak view and keeps boxes scoring at least `tau`
/// (classification score only). The teacher is evaluated on constants, so
/// no gradient can reach it.
pub fn generate_pseudo_labels(
    teacher: &DetectorParams,
    weak_view: &Tensor,
    tau: f64,
    nms_iou: f64,
    source_view: u64,
) -> Result<Vec<PseudoLabel>> {
    let values = teacher.predict(weak_view)?;
    Ok(pseudo_labels_from(&values, tau, nms_iou, source_view))
}

/// Classification weight of a pseudo-box: `exp(-mean(delta_t))` in `[0, 1]`.
pub fn box_weight(delta_t: &[f64; 4]) -> f64 {
    let mean = delta_t.iter().sum::<f64>() / 4.0;
    (-mean).exp().clamp(0.0, 1.0)
}

/// Unnormalised unsupervised losses of one image.
#[derive(Debug, Clone, Copy)]
pub struct UnsupTerms {
    pub cls: Var,
    pub reg: Var,
    pub num_foreground: usize,
}

/// Focal loss against hard pseudo-label targets.
///
/// Every class logit of a location inside pseudo-box `k` is weighted by
/// [`box_weight`] of that box; locations outside all boxes are weighted by
/// `background_weight`.
pub fn unsup_cls_loss(
    tape: &mut Tape,
    out: &HeadOutputs,
    pseudo: &[PseudoLabel],
    targets: &LocationTargets,
    background_weight: f64,
    focal: FocalParams,
) -> Result<Var> {
    let n = out.grid.len();
    let num_classes = tape.value(out.cls_logits).len() / n;
    let y = one_hot(targets, num_classes);
    let loc_weight: Vec<f64> = (0..n)
        .map(|l| match targets.box_index[l] {
            Some(k) => box_weight(&pseudo[k].delta_t),
            None => background_weight,
        })
        .collect();
    if loc_weight.iter().all(|&w| w == 0.0) {
        return Ok(zero(tape));
    }
    let weights: Vec<f64> = (0..num_classes * n).map(|i| loc_weight[i % n]).collect();
    focal_loss_sum(tape, out.cls_logits, &y, &weights, focal)
}

/// Uncertainty-gated regression consistency.
///
/// At each foreground location and side `i`, contributes
/// `|d_t[i] - d_s[i]|` when `delta_t[i] + sigma <= delta_s[i]`. Teacher
/// values enter as constants; the gate itself carries no gradient.
pub fn unsup_reg_loss(
    tape: &mut Tape,
    student: &HeadOutputs,
    teacher: &HeadValues,
    targets: &LocationTargets,
    sigma: f64,
) -> Result<Var> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be non-negative, got {sigma}"
        )));
    }
    if teacher.grid != student.grid || targets.grid != student.grid {
        return Err(Error::shape(
            "unsup_reg_loss",
            format!(
                "student {:?}, teacher {:?}, targets {:?}",
                student.grid, teacher.grid, targets.grid
            ),
        ));
    }
    let n = student.grid.len();
    let delta_s = tape.value(student.delta).data();
    let delta_t = teacher.delta.data();
    let mut gate = vec![0.0; 4 * n];
    let mut open = false;
    for side in 0..4 {
        for l in 0..n {
            let i = side * n + l;
            if targets.is_foreground(l) && delta_t[i] + sigma <= delta_s[i] {
                gate[i] = 1.0;
                open = true;
            }
        }
    }
    if !open {
        return Ok(zero(tape));
    }
    let shape = tape.value(student.ltrb).shape().to_vec();
    let d_t = tape.constant(teacher.ltrb.clone());
    let diff = tape.sub(student.ltrb, d_t)?;
    let diff = tape.abs(diff)?;
    let gate = tape.constant(Tensor::new(shape, gate)?);
    let gated = tape.mul(diff, gate)?;
    tape.sum(gated)
}

/// Both unsupervised terms for one view pair.
pub fn unsup_terms(
    tape: &mut Tape,
    student: &HeadOutputs,
    teacher: &HeadValues,
    pseudo: &[PseudoLabel],
    params: &SelfTrainParams,
) -> Result<UnsupTerms> {
    let boxes: Vec<BBox> = pseudo.iter().map(|p| p.bbox).collect();
    let targets = assign_targets(&boxes, student.grid);
    let cls = unsup_cls_loss(
        tape,
        student,
        pseudo,
        &targets,
        params.background_weight,
        params.focal,
    )?;
    let reg = unsup_reg_loss(tape, student, teacher, &targets, params.sigma)?;
    Ok(UnsupTerms {
        cls,
        reg,
        num_foreground: targets.num_foreground(),
    })
}

/// Labeled strong views with their boxes, and unlabeled view pairs.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub labeled: Vec<(Tensor, Vec<BBox>)>,
    pub unlabeled: Vec<ViewPair>,
}

/// Scalar losses of one step. Unsupervised terms are normalised by the
/// larger of the pseudo-foreground and labeled-foreground counts of the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub total: f64,
    pub supervised: SupervisedBreakdown,
    pub unsup_cls: f64,
    pub unsup_reg: f64,
    pub num_pseudo: usize,
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = zero(tape);
    for &v in vars {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// One optimisation step of the student on `batch`.
///
/// `L = L_sup + lambda_u * (L_cls_u + L_reg_u)`. During burn-in the
/// unlabeled half is ignored. The teacher always follows the student by EMA,
/// and the last burn-in step copies the teacher into the student so both
/// start self-training from the same weights.
pub fn train_step(state: &mut TeacherStudentState, batch: &TrainBatch) -> Result<StepRecord> {
    if batch.labeled.is_empty() {
        return Err(Error::EmptyData(
            "training batch has no labeled images".into(),
        ));
    }
    let burn_in = state.in_burn_in();
    let mut tape = Tape::new();
    let vars = state.student.register(&mut tape);

    let mut sup = Vec::with_capacity(batch.labeled.len());
    for (image, boxes) in &batch.labeled {
        let out = forward(&mut tape, &state.student, &vars, image)?;
        let targets = assign_targets(boxes, out.grid);
        sup.push(supervised_terms(
            &mut tape,
            &out,
            &targets,
            state.params.focal,
        )?);
    }
    let sup_fg: usize = sup.iter().map(|t| t.num_foreground).sum();
    let sup = combine_supervised(&mut tape, &sup)?;

    let mut cls_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let mut num_fg = 0;
    let mut num_pseudo = 0;
    if !burn_in {
        let p = &state.params;
        for pair in &batch.unlabeled {
            let teacher = state.teacher.predict(&pair.weak)?;
            let pseudo = pseudo_labels_from(&teacher, p.tau, p.pseudo_nms_iou, pair.source_id);
            num_pseudo += pseudo.len();
            let out = forward(&mut tape, &state.student, &vars, &pair.strong)?;
            let t = unsup_terms(&mut tape, &out, &teacher, &pseudo, p)?;
            cls_terms.push(t.cls);
            reg_terms.push(t.reg);
            num_fg += t.num_foreground;
        }
    }
    // Floored by the labeled foreground count so that a batch with few
    // pseudo-boxes cannot inflate the background term.
    let norm = 1.0 / num_fg.max(sup_fg).max(1) as f64;
    let ucls = sum_vars(&mut tape, &cls_terms)?;
    let ucls = tape.scale(ucls, norm)?;
    let ureg = sum_vars(&mut tape, &reg_terms)?;
    let ureg = tape.scale(ureg, norm)?;
    let unsup = tape.add(ucls, ureg)?;
    let unsup = tape.scale(unsup, state.params.lambda_u)?;
    let total = tape.add(sup.total, unsup)?;

    let record = StepRecord {
        iteration: state.iteration + 1,
        total: tape.value(total).item(),
        supervised: sup.breakdown(&tape),
        unsup_cls: tape.value(ucls).item(),
        unsup_reg: tape.value(ureg).item(),
        num_pseudo,
    };
    tape.backward(total, &mut state.student.params)?;
    state.optimizer.step(&mut state.student.params)?;
    state.iteration += 1;
    state.ema_update()?;
    if burn_in && state.iteration == state.burn_in_iters {
        // the smoothed burn-in model seeds both networks
        state
            .student
            .params
            .copy_values_from(&state.teacher.params)?;
    }
    Ok(record)
}

/// Supervised-only steps on labeled batches, after which the student is an
/// exact copy of the EMA teacher.
pub fn burn_in(
    state: &mut TeacherStudentState,
    mut next_batch: impl FnMut() -> Result<Vec<(Tensor, Vec<BBox>)>>,
    iters: usize,
) -> Result<Vec<StepRecord>> {
    let end = state.iteration + iters;
    state.burn_in_iters = state.burn_in_iters.max(end);
    let mut records = Vec::with_capacity(iters);
    while state.iteration < end {
        let labeled = next_batch()?;
        records.push(train_step(
            state,
            &TrainBatch {
                labeled,
                unlabeled: Vec::new(),
            },
        )?);
    }
    state
        .student
        .params
        .copy_values_from(&state.teacher.params)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::detector::{DetectorConfig, Grid};

    fn model(seed: u64) -> DetectorParams {
        DetectorParams::init(
            &DetectorConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn ema_examples() {
        let mut t = model(1).params;
        let s = model(2).params;
        let orig = t.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t, orig);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.max_abs_diff(&s), 0.0);

        let mut a = ParamSet::new();
        a.push("w", Tensor::scalar(1.0));
        let mut b = ParamSet::new();
        b.push("w", Tensor::scalar(0.0));
        ema_update(&mut a, &b, 0.99).unwrap();
        assert_eq!(a.get(0).value.item(), 0.99);
    }

    #[test]
    fn ema_rejects_mismatched_layout() {
        let mut a = ParamSet::new();
        a.push("w", Tensor::scalar(1.0));
        assert!(ema_update(&mut a, &model(1).params, 0.5).is_err());
    }

    #[test]
    fn box_weight_examples() {
        assert_eq!(box_weight(&[0.0; 4]), 1.0);
        assert!((box_weight(&[2f64.ln(); 4]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_head_teacher_gives_no_pseudo_labels() {
        let mut teacher = model(3);
        teacher.zero_heads();
        let img = Tensor::full(&[64, 64, 3], 0.4);
        assert!(generate_pseudo_labels(&teacher, &img, 0.7, 0.6, 0)
            .unwrap()
            .is_empty());
    }

    fn head_values(grid: Grid, ltrb: f64, delta: f64) -> HeadValues {
        let n = grid.len();
        HeadValues {
            grid,
            cls_logits: Tensor::full(&[1, 3, grid.height, grid.width], -5.0),
            ctr_logits: Tensor::zeros(&[1, 1, grid.height, grid.width]),
            ltrb: Tensor::full(&[1, 4, grid.height, grid.width], ltrb),
            delta: Tensor::new(vec![1, 4, grid.height, grid.width], vec![delta; 4 * n]).unwrap(),
        }
    }

    #[test]
    fn reg_gate_examples() {
        let grid = Grid::for_image(8, 8).unwrap();
        let targets = assign_targets(&[BBox::new(0.0, 0.0, 8.0, 8.0, 0)], grid);
        let run = |dt: f64, ds: f64, sigma: f64, t: f64, s: f64| -> f64 {
            let mut tape = Tape::new();
            let v = head_values(grid, s, ds);
            let out = HeadOutputs {
                grid,
                cls_logits: tape.constant(v.cls_logits.clone()),
                ctr_logits: tape.constant(v.ctr_logits.clone()),
                ltrb: tape.constant(v.ltrb.clone()),
                delta: tape.constant(v.delta.clone()),
            };
            let teacher = head_values(grid, t, dt);
            let l = unsup_reg_loss(&mut tape, &out, &teacher, &targets, sigma).unwrap();
            tape.value(l).item()
        };
        // one location, four sides each contributing |3 - 2|
        assert_eq!(run(0.1, 0.5, 0.2, 3.0, 2.0), 4.0);
        assert_eq!(run(0.6, 0.5, 0.0, 3.0, 2.0), 0.0);
        assert_eq!(run(0.5, 0.5, 0.0, 3.0, 2.0), 4.0);
    }

    #[test]
    fn negative_sigma_rejected() {
        let grid = Grid::for_image(8, 8).unwrap();
        let targets = assign_targets(&[], grid);
        let mut tape = Tape::new();
        let v = head_values(grid, 1.0, 0.3);
        let out = HeadOutputs {
            grid,
            cls_logits: tape.constant(v.cls_logits.clone()),
            ctr_logits: tape.constant(v.ctr_logits.clone()),
            ltrb: tape.constant(v.ltrb.clone()),
            delta: tape.constant(v.delta.clone()),
        };
        assert!(unsup_reg_loss(&mut tape, &out, &v, &targets, -0.1).is_err());
    }
}
