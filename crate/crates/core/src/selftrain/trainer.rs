//! Training loop, periodic teacher evaluation and checkpoints.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train_step, StepRecord, TeacherStudentState, TrainBatch};
use crate::augment::{make_view_pair, AugPolicy, ViewPair};
use crate::boxes::BBox;
use crate::data::{Dataset, DatasetSplit, Sample};
use crate::detector::{decode_detections, DecodeParams, DetectorConfig, DetectorParams};
use crate::diff::{ParamRecord, ParamSet, Sgd, Tensor};
use crate::error::{Error, Result};
use crate::eval::{map_coco, APTable};

use super::SelfTrainParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Total steps, burn-in included.
    pub total_iters: usize,
    pub burn_in_iters: usize,
    pub eval_every: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_iters: 4000,
            burn_in_iters: 400,
            eval_every: 400,
            labeled_batch: 4,
            unlabeled_batch: 4,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 || self.labeled_batch == 0 {
            return Err(Error::InvalidArgument(
                "eval_every and labeled_batch must be positive".into(),
            ));
        }
        if self.burn_in_iters > self.total_iters {
            return Err(Error::InvalidArgument(format!(
                "burn_in_iters {} exceeds total_iters {}",
                self.burn_in_iters, self.total_iters
            )));
        }
        Ok(())
    }
}

/// Images available to one run, as positions into `dataset.samples`.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub policy: AugPolicy,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, split: &DatasetSplit, policy: AugPolicy) -> Result<Self> {
        policy.validate()?;
        let index = dataset.index();
        let resolve = |ids: &[u64]| -> Result<Vec<usize>> {
            ids.iter()
                .map(|id| {
                    index
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown image id {id}")))
                })
                .collect()
        };
        let data = Self {
            dataset,
            labeled: resolve(&split.labeled)?,
            unlabeled: resolve(&split.unlabeled)?,
            val: resolve(&split.val)?,
            policy,
        };
        if data.labeled.is_empty() {
            return Err(Error::EmptyData("no labeled training images".into()));
        }
        Ok(data)
    }

    fn val_samples(&self) -> Vec<&'a Sample> {
        self.val.iter().map(|&i| &self.dataset.samples[i]).collect()
    }
}

/// Independent random streams for the labeled and unlabeled halves, so
/// that drawing unlabeled views never shifts the labeled sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Self {
            labeled_rng: stream(1),
            unlabeled_rng: stream(2),
        }
    }

    /// `n` labeled strong views (drawn with replacement) and their boxes.
    pub fn labeled(&mut self, data: &TrainData, n: usize) -> Result<Vec<(Tensor, Vec<BBox>)>> {
        (0..n)
            .map(|_| {
                let i = data.labeled[self.labeled_rng.random_range(0..data.labeled.len())];
                let s = &data.dataset.samples[i];
                let pair = make_view_pair(
                    &s.image,
                    &s.boxes,
                    s.id,
                    &data.policy,
                    &mut self.labeled_rng,
                )?;
                Ok((pair.strong, pair.boxes))
            })
            .collect()
    }

    /// `n` unlabeled weak/strong pairs, or none if the pool is empty.
    pub fn unlabeled(&mut self, data: &TrainData, n: usize) -> Result<Vec<ViewPair>> {
        if data.unlabeled.is_empty() {
            return Ok(Vec::new());
        }
        (0..n)
            .map(|_| {
                let i = data.unlabeled[self.unlabeled_rng.random_range(0..data.unlabeled.len())];
                let s = &data.dataset.samples[i];
                make_view_pair(&s.image, &[], s.id, &data.policy, &mut self.unlabeled_rng)
            })
            .collect()
    }
}

/// Validation metrics of the teacher at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub map_5095: f64,
    pub map_50: f64,
    pub class_ap: Vec<Option<f64>>,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
}

/// Detections of `model` on each sample and the resulting AP table.
pub fn evaluate(
    model: &DetectorParams,
    samples: &[&Sample],
    decode: &DecodeParams,
) -> Result<(APTable, Vec<Vec<BBox>>)> {
    let mut dets = Vec::with_capacity(samples.len());
    for s in samples {
        let values = model.predict(&s.image)?;
        dets.push(
            decode_detections(&values, decode)
                .into_iter()
                .map(|d| d.bbox)
                .collect(),
        );
    }
    let gts: Vec<Vec<BBox>> = samples.iter().map(|s| s.boxes.clone()).collect();
    let table = map_coco(&dets, &gts, model.num_classes())?;
    Ok((table, dets))
}

/// Drives a [`TeacherStudentState`] through a [`Schedule`], evaluating the
/// teacher on the validation images and remembering the best teacher.
#[derive(Debug)]
pub struct Trainer<'a> {
    pub state: TeacherStudentState,
    data: TrainData<'a>,
    sampler: BatchSampler,
    schedule: Schedule,
    decode: DecodeParams,
    history: Vec<EvalPoint>,
    best: Option<(ParamSet, EvalPoint)>,
    elapsed_before: f64,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(
        mut state: TeacherStudentState,
        data: TrainData<'a>,
        schedule: Schedule,
        decode: DecodeParams,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        state.burn_in_iters = schedule.burn_in_iters;
        Ok(Self {
            state,
            data,
            sampler: BatchSampler::new(seed),
            schedule,
            decode,
            history: Vec::new(),
            best: None,
            elapsed_before: 0.0,
            started: Instant::now(),
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Hands back the training data and schedule, dropping all state.
    pub fn into_parts(self) -> (TrainData<'a>, Schedule) {
        (self.data, self.schedule)
    }

    pub fn history(&self) -> &[EvalPoint] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.schedule.total_iters
    }

    /// Best validation point and the teacher that produced it.
    pub fn best(&self) -> Option<(DetectorParams, &EvalPoint)> {
        self.best.as_ref().map(|(p, e)| {
            (
                DetectorParams {
                    config: self.state.teacher.config.clone(),
                    params: p.clone(),
                },
                e,
            )
        })
    }

    fn elapsed(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    /// Evaluates the teacher on the validation images.
    pub fn evaluate_teacher(&self) -> Result<APTable> {
        let val = self.data.val_samples();
        Ok(evaluate(&self.state.teacher, &val, &self.decode)?.0)
    }

    /// Evaluates the student; only useful to contrast with the teacher.
    pub fn evaluate_student(&self) -> Result<APTable> {
        let val = self.data.val_samples();
        Ok(evaluate(&self.state.student, &val, &self.decode)?.0)
    }

    fn record_eval(&mut self) -> Result<()> {
        let table = self.evaluate_teacher()?;
        let point = EvalPoint {
            iteration: self.state.iteration,
            map_5095: table.map_5095,
            map_50: table.map_50,
            class_ap: table.class_ap,
            seconds: self.elapsed(),
        };
        log::info!(
            "iter {:>5}  val mAP {:.2}  mAP50 {:.2}",
            point.iteration,
            100.0 * point.map_5095,
            100.0 * point.map_50
        );
        let better = self
            .best
            .as_ref()
            .is_none_or(|(_, b)| point.map_5095 > b.map_5095);
        if better {
            self.best = Some((self.state.teacher.params.clone(), point.clone()));
        }
        self.history.push(point);
        Ok(())
    }

    /// One training step, followed by an evaluation when one is due.
    pub fn step(&mut self) -> Result<StepRecord> {
        let labeled = self
            .sampler
            .labeled(&self.data, self.schedule.labeled_batch)?;
        let unlabeled = if self.state.in_burn_in() || self.schedule.unlabeled_batch == 0 {
            Vec::new()
        } else {
            self.sampler
                .unlabeled(&self.data, self.schedule.unlabeled_batch)?
        };
        let record = train_step(&mut self.state, &TrainBatch { labeled, unlabeled })?;
        let it = self.state.iteration;
        if it % self.schedule.eval_every == 0 || it == self.schedule.total_iters {
            self.record_eval()?;
        }
        Ok(record)
    }

    /// Steps until `iteration` (capped at the schedule's total).
    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        let end = iteration.min(self.schedule.total_iters);
        while self.state.iteration < end {
            let r = self.step()?;
            if r.iteration % 100 == 0 {
                log::debug!("{r:?}");
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<&[EvalPoint]> {
        self.run_until(self.schedule.total_iters)?;
        Ok(&self.history)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            detector: self.state.teacher.config.clone(),
            teacher: self.state.teacher.params.to_records(),
            student: self.state.student.params.to_records(),
            optimizer: self.state.optimizer.clone(),
            params: self.state.params.clone(),
            iteration: self.state.iteration,
            burn_in_iters: self.state.burn_in_iters,
            sampler: self.sampler.clone(),
            history: self.history.clone(),
            best: self.best.as_ref().map(|(p, e)| (p.to_records(), e.clone())),
            elapsed_seconds: self.elapsed(),
        }
    }

    /// Continues a run from `checkpoint` with the same data and schedule.
    pub fn resume(
        checkpoint: Checkpoint,
        data: TrainData<'a>,
        schedule: Schedule,
        decode: DecodeParams,
    ) -> Result<Self> {
        schedule.validate()?;
        let c = checkpoint;
        let teacher = DetectorParams {
            config: c.detector.clone(),
            params: ParamSet::from_records(c.teacher)?,
        };
        let student = DetectorParams {
            config: c.detector,
            params: ParamSet::from_records(c.student)?,
        };
        teacher.params.check_same_layout(&student.params)?;
        let state = TeacherStudentState {
            teacher,
            student,
            optimizer: c.optimizer,
            params: c.params,
            iteration: c.iteration,
            burn_in_iters: c.burn_in_iters,
        };
        let best = match c.best {
            Some((records, point)) => Some((ParamSet::from_records(records)?, point)),
            None => None,
        };
        Ok(Self {
            state,
            data,
            sampler: c.sampler,
            schedule,
            decode,
            history: c.history,
            best,
            elapsed_before: c.elapsed_seconds,
            started: Instant::now(),
        })
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub detector: DetectorConfig,
    pub teacher: Vec<ParamRecord>,
    pub student: Vec<ParamRecord>,
    pub optimizer: Sgd,
    pub params: SelfTrainParams,
    pub iteration: usize,
    pub burn_in_iters: usize,
    pub sampler: BatchSampler,
    pub history: Vec<EvalPoint>,
    pub best: Option<(Vec<ParamRecord>, EvalPoint)>,
    pub elapsed_seconds: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Runs a full schedule from `state` and returns the validation trajectory.
pub fn train_loop(
    state: TeacherStudentState,
    data: TrainData,
    schedule: Schedule,
    decode: DecodeParams,
    seed: u64,
) -> Result<Vec<EvalPoint>> {
    let mut trainer = Trainer::new(state, data, schedule, decode, seed)?;
    trainer.run()?;
    Ok(trainer.history)
}
