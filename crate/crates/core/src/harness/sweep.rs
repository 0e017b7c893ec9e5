//! Label-fraction sweeps: one training run per (mode, fraction, seed), with
//! validation curves, best-teacher test metrics and CSV persistence.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode, Timing};
use super::report::{emit_report, write_curve_svg};
use crate::data::{
    generate_dataset, read_coco, sample_label_fraction, split_dataset, Dataset, DatasetSplit,
};
use crate::detector::DetectorParams;
use crate::diff::Sgd;
use crate::error::{Error, Result};
use crate::eval::{to_coco_results, write_results, APTable};
use crate::selftrain::{evaluate, Checkpoint, EvalPoint, TeacherStudentState, TrainData, Trainer};

/// Header of every metrics CSV.
pub const CSV_HEADER: [&str; 8] = [
    "mode",
    "fraction",
    "seed",
    "iteration",
    "map_5095",
    "map_50",
    "per_class_json",
    "seconds",
];

/// Metrics of one evaluation, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mode: Mode,
    pub fraction: f64,
    pub seed: u64,
    pub iteration: usize,
    pub map_5095: f64,
    pub map_50: f64,
    /// Per-class AP; `None` for classes absent from the evaluated images.
    pub per_class: Vec<Option<f64>>,
    pub seconds: f64,
}

impl MetricsRow {
    fn from_table(key: RunKey, iteration: usize, table: &APTable, seconds: f64) -> Self {
        Self {
            mode: key.mode,
            fraction: key.fraction,
            seed: key.seed,
            iteration,
            map_5095: 100.0 * table.map_5095,
            map_50: 100.0 * table.map_50,
            per_class: table
                .class_ap
                .iter()
                .map(|a| a.map(|v| 100.0 * v))
                .collect(),
            seconds,
        }
    }

    fn from_point(key: RunKey, p: &EvalPoint, timing: Timing) -> Self {
        Self {
            mode: key.mode,
            fraction: key.fraction,
            seed: key.seed,
            iteration: p.iteration,
            map_5095: 100.0 * p.map_5095,
            map_50: 100.0 * p.map_50,
            per_class: p.class_ap.iter().map(|a| a.map(|v| 100.0 * v)).collect(),
            seconds: seconds(timing, p.seconds),
        }
    }

    pub fn key(&self) -> RunKey {
        RunKey {
            mode: self.mode,
            fraction: self.fraction,
            seed: self.seed,
        }
    }
}

fn seconds(timing: Timing, s: f64) -> f64 {
    match timing {
        Timing::Wall => s,
        Timing::Off => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub mode: Mode,
    pub fraction: f64,
    pub seed: u64,
}

impl RunKey {
    /// Directory name of the run, e.g. `semi-f0.1-s2`.
    pub fn dir_name(&self) -> String {
        format!("{}-f{}-s{}", self.mode, self.fraction, self.seed)
    }
}

/// Writes rows as CSV with [`CSV_HEADER`].
pub fn write_rows(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.mode.to_string(),
            r.fraction.to_string(),
            r.seed.to_string(),
            r.iteration.to_string(),
            r.map_5095.to_string(),
            r.map_50.to_string(),
            serde_json::to_string(&r.per_class)?,
            r.seconds.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != CSV_HEADER {
        return Err(Error::InvalidArgument(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let bad = |field: &str, v: &str| {
        Error::InvalidArgument(format!("{}: bad {field} `{v}`", path.display()))
    };
    let mut rows = Vec::new();
    for record in r.records() {
        let rec = record?;
        let f = |i: usize| rec.get(i).unwrap_or_default();
        rows.push(MetricsRow {
            mode: f(0).parse()?,
            fraction: f(1).parse().map_err(|_| bad("fraction", f(1)))?,
            seed: f(2).parse().map_err(|_| bad("seed", f(2)))?,
            iteration: f(3).parse().map_err(|_| bad("iteration", f(3)))?,
            map_5095: f(4).parse().map_err(|_| bad("map_5095", f(4)))?,
            map_50: f(5).parse().map_err(|_| bad("map_50", f(5)))?,
            per_class: serde_json::from_str(f(6))?,
            seconds: f(7).parse().map_err(|_| bad("seconds", f(7)))?,
        });
    }
    Ok(rows)
}

/// The dataset and base split shared by every run of a sweep.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub split: DatasetSplit,
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let d = &config.dataset;
    let dataset = match &d.coco_dir {
        Some(dir) => read_coco(dir)?,
        None => generate_dataset(&d.scene_spec(), d.count, d.seed)?,
    };
    if dataset.num_classes() != config.detector.num_classes {
        return Err(Error::Config {
            path: "detector.num_classes".into(),
            message: format!(
                "dataset has {} classes, detector {}",
                dataset.num_classes(),
                config.detector.num_classes
            ),
        });
    }
    let split = split_dataset(&dataset.ids(), d.ratios, d.split_seed)?;
    Ok(PreparedData { dataset, split })
}

/// Everything one run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub key: RunKey,
    /// Validation metrics at every evaluation of the teacher.
    pub curve: Vec<MetricsRow>,
    /// Test metrics of the best-validation teacher; `iteration` is the
    /// iteration that teacher was taken from.
    pub test: MetricsRow,
    pub best: DetectorParams,
}

/// Builds the trainer of one run. The supervised mode is the same pipeline
/// with the unsupervised weight and the unlabeled batch set to zero.
pub fn build_trainer<'a>(
    config: &ExperimentConfig,
    data: &'a PreparedData,
    key: RunKey,
) -> Result<Trainer<'a>> {
    let split = sample_label_fraction(&data.split, key.fraction, key.seed)?;
    let mut policy = config.augment.clone();
    if config.cutout_fill_from_data {
        policy.cutout_fill = data.dataset.channel_mean(&split.train)?;
    }
    let train_data = TrainData::new(&data.dataset, &split, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(key.seed);
    let model = DetectorParams::init(&config.detector, &mut rng)?;
    let opt = Sgd::new(
        &model.params,
        config.optimizer.learning_rate,
        config.optimizer.momentum,
    )?;
    let mut params = config.selftrain.clone();
    let mut schedule = config.schedule.clone();
    if key.mode == Mode::Supervised {
        params.lambda_u = 0.0;
        schedule.unlabeled_batch = 0;
    }
    let state = TeacherStudentState::new(model, opt, params, schedule.burn_in_iters)?;
    Trainer::new(state, train_data, schedule, config.decode, key.seed)
}

/// Resumes the trainer of one run from a checkpoint.
pub fn resume_trainer<'a>(
    config: &ExperimentConfig,
    data: &'a PreparedData,
    key: RunKey,
    checkpoint: Checkpoint,
) -> Result<Trainer<'a>> {
    let fresh = build_trainer(config, data, key)?;
    let (train_data, schedule) = fresh.into_parts();
    Trainer::resume(checkpoint, train_data, schedule, config.decode)
}

/// Scores the best-validation teacher of a finished trainer on the test split.
pub fn finish_run(
    config: &ExperimentConfig,
    data: &PreparedData,
    key: RunKey,
    trainer: &Trainer,
) -> Result<RunOutcome> {
    let (best, point) = trainer
        .best()
        .ok_or_else(|| Error::EmptyData("run finished without an evaluation".into()))?;
    let test = data.dataset.select(&data.split.test)?;
    let (table, _) = evaluate(&best, &test, &config.decode)?;
    let curve = trainer
        .history()
        .iter()
        .map(|p| MetricsRow::from_point(key, p, config.timing))
        .collect();
    let test_row = MetricsRow::from_table(
        key,
        point.iteration,
        &table,
        seconds(config.timing, point.seconds),
    );
    Ok(RunOutcome {
        key,
        curve,
        test: test_row,
        best,
    })
}

/// Trains and scores one run.
pub fn run_single(
    config: &ExperimentConfig,
    data: &PreparedData,
    key: RunKey,
) -> Result<RunOutcome> {
    let mut trainer = build_trainer(config, data, key)?;
    trainer.run()?;
    finish_run(config, data, key, &trainer)
}

/// Writes one run's curve CSV, curve SVG and test detections under `dir`.
pub fn write_run(
    config: &ExperimentConfig,
    data: &PreparedData,
    outcome: &RunOutcome,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_rows(&dir.join("curve.csv"), &outcome.curve)?;
    write_rows(&dir.join("test.csv"), std::slice::from_ref(&outcome.test))?;
    write_curve_svg(&dir.join("curve.svg"), &outcome.key, &outcome.curve)?;
    let test = data.dataset.select(&data.split.test)?;
    let (_, dets) = evaluate(&outcome.best, &test, &config.decode)?;
    write_results(
        &dir.join("test_results.json"),
        &to_coco_results(&data.split.test, &dets),
    )
}

/// Rows of a completed sweep, in (mode, fraction, seed) config order.
#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub curves: Vec<MetricsRow>,
    pub test: Vec<MetricsRow>,
}

/// Runs every (mode, fraction, seed) of `config` and writes `config.toml`,
/// per-run artifacts under `runs/`, `metrics.csv` (validation curves),
/// `test_metrics.csv` and the summary reports into the output directory.
pub fn run_sweep(config: &ExperimentConfig, out: &Path) -> Result<SweepResult> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join("config.toml");
    fs::write(&resolved, config.to_toml()?).map_err(|e| Error::io(&resolved, e))?;

    let data = prepare_data(config)?;
    let keys: Vec<RunKey> = config
        .modes
        .iter()
        .flat_map(|&mode| {
            config.fractions.iter().flat_map(move |&fraction| {
                config.seeds.iter().map(move |&seed| RunKey {
                    mode,
                    fraction,
                    seed,
                })
            })
        })
        .collect();
    let runs_dir = out.join("runs");
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutcome>>>> =
        Mutex::new((0..keys.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&key) = keys.get(i) else { break };
        log::info!("run {}/{}: {}", i + 1, keys.len(), key.dir_name());
        let result = run_single(config, &data, key).and_then(|o| {
            write_run(config, &data, &o, &runs_dir.join(key.dir_name()))?;
            Ok(o)
        });
        slots.lock().expect("no worker panicked")[i] = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 1..config.jobs.min(keys.len()) {
            s.spawn(work);
        }
        work();
    });

    let mut result = SweepResult::default();
    for slot in slots.into_inner().expect("no worker panicked") {
        let outcome = slot.expect("every run was claimed")?;
        result.curves.extend(outcome.curve);
        result.test.push(outcome.test);
    }
    write_rows(&out.join("metrics.csv"), &result.curves)?;
    write_rows(&out.join("test_metrics.csv"), &result.test)?;
    emit_report(&result.test, &data.dataset.class_names, out)?;
    Ok(result)
}

/// Output directory: an explicit path wins, then the `SEMIDET_OUT` root
/// joined with the config's directory, then the config's directory.
pub fn resolve_output_dir(config: &ExperimentConfig, explicit: Option<PathBuf>) -> PathBuf {
    if let Some(p) = explicit {
        return p;
    }
    match std::env::var_os("SEMIDET_OUT") {
        Some(root) => PathBuf::from(root).join(&config.output_dir),
        None => config.output_dir.clone(),
    }
}
