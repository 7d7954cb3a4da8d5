use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::archive::Archive;
use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::frontend::{FeatureCache, FrontendConfig};
use crate::metrics::EvalReport;
use crate::model::{Mode, Model, Strictness};
use crate::tensor::Tensor;
use crate::train::config::TrainConfig;
use crate::train::cutmix::cutmix;
use crate::train::data::{Dataset, Manifest, Split};
use crate::train::loss::bce_loss;
use crate::train::optim::{clip_grad_norm, lr_at, AdamW};

// Independent random streams derived from the run seed.
const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_CUTMIX: u64 = 0x4355_544d;
const STREAM_DROP: u64 = 0x4452_4f50;

fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.rotate_left(32));
    rng.set_stream(index);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Sigmoid scores against label sets.
    MultiLabel,
    /// Exactly one label per clip; adds argmax F1 and accuracy.
    SingleLabel,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multilabel" => Ok(EvalMode::MultiLabel),
            "singlelabel" => Ok(EvalMode::SingleLabel),
            _ => Err(Error::Config(format!("mode must be multilabel or singlelabel, got {s:?}"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::MultiLabel => "multilabel",
            EvalMode::SingleLabel => "singlelabel",
        })
    }
}

/// Scores every clip (in parallel, collected in manifest order) and builds
/// the report.
pub fn evaluate(model: &Model<f32>, data: &Dataset, mode: EvalMode) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Value("evaluation set is empty".into()));
    }
    let scores = data
        .features
        .par_iter()
        .map(|mel| {
            let logits = model.predict(mel)?;
            Ok(match mode {
                EvalMode::MultiLabel => logits.data().iter().map(|&z| sigmoid(z as f64)).collect(),
                EvalMode::SingleLabel => logits.data().iter().map(|&z| z as f64).collect::<Vec<f64>>(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match mode {
        EvalMode::MultiLabel => {
            let labels: Vec<Vec<bool>> = (0..data.len()).map(|i| data.target(i).iter().map(|&t| t > 0.5).collect()).collect();
            EvalReport::multilabel(&scores, &labels)
        }
        EvalMode::SingleLabel => {
            let truth = data
                .labels
                .iter()
                .enumerate()
                .map(|(i, l)| match l[..] {
                    [c] => Ok(c),
                    _ => Err(Error::Value(format!("single-label evaluation: clip {} has {} labels", i + 1, l.len()))),
                })
                .collect::<Result<Vec<_>>>()?;
            EvalReport::singlelabel(&scores, &truth)
        }
    }
}

/// Loads an eval-split manifest and evaluates it.
pub fn evaluate_manifest(
    model: &Model<f32>,
    manifest: &Manifest,
    frontend: &FrontendConfig,
    cache: Option<&FeatureCache>,
    skip_unreadable: bool,
    mode: EvalMode,
) -> Result<(EvalReport, Dataset)> {
    if manifest.split != Split::Eval {
        return Err(Error::Value("evaluate expects an eval-split manifest".into()));
    }
    let data = Dataset::from_manifest(manifest, frontend, cache, skip_unreadable)?;
    Ok((evaluate(model, &data, mode)?, data))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Zero-based index of the step just taken.
    pub step: u64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepStats {
    pub fn log_line(&self) -> String {
        format!("{},{:.6},{:.6},{:.6e}", self.step, self.loss, self.grad_norm, self.lr)
    }
}

pub const LOG_HEADER: &str = "step,loss,grad_norm,lr";

/// Model, optimizer and schedule. The step counter lives in the optimizer,
/// so restoring both resumes the exact trajectory.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamW,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(&model.params.tensors, config.weight_decay);
        Ok(Self { model, optimizer, config })
    }

    /// Steps taken so far.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Sample indices for `step`: a seeded shuffle per epoch, trailing
    /// partial batch dropped.
    pub fn batch_rows(&self, n: usize, step: u64) -> Result<Vec<usize>> {
        let b = self.config.batch_size;
        let per_epoch = n / b;
        if per_epoch == 0 {
            return Err(Error::Value(format!("dataset of {n} clips is smaller than batch_size {b}")));
        }
        let (epoch, k) = (step / per_epoch as u64, (step % per_epoch as u64) as usize);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(self.config.seed, STREAM_SHUFFLE, epoch));
        Ok(order[k * b..(k + 1) * b].to_vec())
    }

    /// Stacks `rows` into a `[B, T, F]` batch and `[B, C]` targets.
    pub fn assemble(data: &Dataset, rows: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let first = data.features.get(rows[0]).ok_or_else(|| Error::Value(format!("row {} out of range", rows[0])))?;
        let (tf, c) = (first.shape().to_vec(), data.n_classes);
        let mut x = Vec::with_capacity(rows.len() * first.numel());
        let mut y = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let f = &data.features[r];
            if f.shape() != tf {
                return Err(Error::Shape(format!("clip {r} is {:?}, batch expects {tf:?}", f.shape())));
            }
            x.extend_from_slice(f.data());
            y.extend(data.target(r));
        }
        Ok((Tensor::new(&[rows.len(), tf[0], tf[1]], x)?, Tensor::new(&[rows.len(), c], y)?))
    }

    /// One update on a prepared batch: forward, BCE, backward, clip, AdamW.
    /// `rows` only labels errors.
    pub fn train_step(&mut self, batch: &Tensor<f32>, targets: &Tensor<f32>, rows: &[usize]) -> Result<StepStats> {
        let step = self.optimizer.step;
        let [b, t, f] = batch.dims3()?;
        if !batch.all_finite() {
            return Err(Error::NonFinite { step, rows: rows.to_vec() });
        }
        let tape = Tape::new();
        let vars = self.model.bind(&tape);
        let mut mode = Mode::Train(stream_rng(self.config.seed, STREAM_DROP, step));
        let logits = (0..b)
            .map(|i| {
                let mel = Tensor::new(&[t, f], batch.data()[i * t * f..(i + 1) * t * f].to_vec())?;
                Ok(self.model.forward(&vars, &mel, &mut mode)?.logits)
            })
            .collect::<Result<Vec<Var<f32>>>>()?;
        let loss = bce_loss(Var::stack(&logits)?, targets)?;
        let loss_value = loss.item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { step, rows: rows.to_vec() });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Vec<f32>> = self.model.params.tensors.iter().map(|p| vec![0.0; p.numel()]).collect();
        for (slot, g) in tape.param_grads() {
            for (acc, v) in grads[slot].iter_mut().zip(g) {
                *acc += v;
            }
        }
        drop(vars);
        tape.reset();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, rows: rows.to_vec() });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        let c = &self.config;
        let lr = lr_at(step, c.lr, c.warmup_steps, c.total_steps);
        self.optimizer.update(&mut self.model.params.tensors, &grads, lr)?;
        Ok(StepStats { step, loss: loss_value, grad_norm, lr })
    }

    /// Draws the batch for the current step, applies CutMix with the
    /// configured probability, and trains on it.
    pub fn step_on(&mut self, data: &Dataset) -> Result<StepStats> {
        let step = self.optimizer.step;
        let rows = self.batch_rows(data.len(), step)?;
        let (mut batch, mut targets) = Self::assemble(data, &rows)?;
        let mut rng = stream_rng(self.config.seed, STREAM_CUTMIX, step);
        if rows.len() >= 2 && self.config.cutmix_prob > 0.0 && rng.random::<f64>() < self.config.cutmix_prob {
            let mixed = cutmix(&batch, &targets, self.config.cutmix_alpha, &mut rng)?;
            batch = mixed.batch;
            targets = mixed.targets;
        }
        self.train_step(&batch, &targets, &rows)
    }

    /// Writes `<path>` (model) and its `.state.amba` sibling (optimizer).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.model.save(path)?;
        self.optimizer.to_archive().save(state_path(path))
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn resume(path: impl AsRef<Path>, config: TrainConfig) -> Result<Self> {
        let path = path.as_ref();
        let (model, _) = crate::model::load_checkpoint::<f32>(path, Strictness::Strict)?;
        let mut trainer = Self::new(model, config)?;
        trainer.optimizer.load_archive(&Archive::load(state_path(path))?)?;
        Ok(trainer)
    }
}

/// `run.amba` → `run.state.amba`.
pub fn state_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.state.amba"))
}

/// Where and how often [`fit`] writes.
#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Output directory for the log and checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub eval_mode: EvalMode,
    /// Stop once this many steps have been taken (defaults to `total_steps`).
    pub stop_at: Option<u64>,
    /// Stop early once evaluation mAP reaches this value.
    pub target_map: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { out_dir: None, eval_mode: EvalMode::MultiLabel, stop_at: None, target_map: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    pub steps: Vec<StepStats>,
    /// `(step count, mAP)` at each evaluation.
    pub evals: Vec<(u64, f64)>,
    pub best_map: Option<f64>,
}

pub const LAST_CHECKPOINT: &str = "last.amba";
pub const BEST_CHECKPOINT: &str = "best.amba";
pub const LOG_FILE: &str = "train_log.csv";

/// Runs the training loop from the trainer's current step.
///
/// With an output directory, appends to `train_log.csv`, refreshes
/// `last.amba` every `checkpoint_every` steps and at the end, and keeps
/// `best.amba` for the highest evaluation mAP.
pub fn fit(trainer: &mut Trainer, train: &Dataset, eval: Option<&Dataset>, opts: &FitOptions) -> Result<FitSummary> {
    let stop = opts.stop_at.unwrap_or(trainer.config.total_steps);
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            let path = dir.join(LOG_FILE);
            let fresh = trainer.step() == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io("writing log", e))?;
            }
            Some(f)
        }
        None => None,
    };
    let mut summary = FitSummary::default();
    while trainer.step() < stop {
        let stats = trainer.step_on(train)?;
        log::debug!("{}", stats.log_line());
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", stats.log_line()).map_err(|e| Error::io("writing log", e))?;
        }
        summary.steps.push(stats);
        let done = trainer.step();
        let cfg = &trainer.config;
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                trainer.save(dir.join(LAST_CHECKPOINT))?;
            }
        }
        let eval_now = cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == stop);
        if let (Some(ds), true) = (eval, eval_now) {
            let map = evaluate(&trainer.model, ds, opts.eval_mode)?.map;
            log::info!("step {done}: eval mAP {map:.6}");
            summary.evals.push((done, map));
            if summary.best_map.is_none_or(|b| map > b) {
                summary.best_map = Some(map);
                if let Some(dir) = &opts.out_dir {
                    trainer.model.save(dir.join(BEST_CHECKPOINT))?;
                }
            }
            if opts.target_map.is_some_and(|t| map >= t) {
                break;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        trainer.save(dir.join(LAST_CHECKPOINT))?;
        if eval.is_none() || summary.best_map.is_none() {
            trainer.model.save(dir.join(BEST_CHECKPOINT))?;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::train::config::RunConfig;
    use crate::train::data::synthetic_dataset;

    fn setup(n: usize) -> (RunConfig, Dataset) {
        let mut run = RunConfig::toy(4);
        run.train.batch_size = 4;
        run.train.cutmix_prob = 0.5;
        let ds = synthetic_dataset(n, 4, &run.frontend(), 3).unwrap();
        (run, ds)
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let (run, _) = setup(4);
        let t = Trainer::new(Model::new(ModelConfig::toy(4), 0).unwrap(), TrainConfig { batch_size: 3, ..run.train }).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|s| t.batch_rows(10, s).unwrap()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(t.batch_rows(10, 5).unwrap(), t.batch_rows(10, 5).unwrap());
        assert!(t.batch_rows(2, 0).is_err());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (run, ds) = setup(8);
        let go = || {
            let mut t = Trainer::new(Model::new(run.model.clone(), 1).unwrap(), run.train.clone()).unwrap();
            (0..3).map(|_| t.step_on(&ds).unwrap().loss).collect::<Vec<_>>()
        };
        let a = go();
        assert_eq!(a, go());
        assert!(a.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mut run, ds) = setup(4);
        run.train.lr = 0.0;
        let mut t = Trainer::new(Model::new(run.model.clone(), 1).unwrap(), run.train.clone()).unwrap();
        let before = t.model.params.tensors.clone();
        t.step_on(&ds).unwrap();
        t.step_on(&ds).unwrap();
        assert_eq!(t.model.params.tensors, before);
    }

    #[test]
    fn non_finite_input_names_rows() {
        let (run, ds) = setup(4);
        let mut t = Trainer::new(Model::new(run.model.clone(), 1).unwrap(), run.train.clone()).unwrap();
        let (mut batch, targets) = Trainer::assemble(&ds, &[0, 1, 2, 3]).unwrap();
        batch.data_mut()[5] = f32::NAN;
        let err = t.train_step(&batch, &targets, &[0, 1, 2, 3]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 0, ref rows } if rows == &[0, 1, 2, 3]), "{err}");
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (run, ds) = setup(8);
        let mut full = Trainer::new(Model::new(run.model.clone(), 2).unwrap(), run.train.clone()).unwrap();
        for _ in 0..3 {
            full.step_on(&ds).unwrap();
        }
        let mut first = Trainer::new(Model::new(run.model.clone(), 2).unwrap(), run.train.clone()).unwrap();
        first.step_on(&ds).unwrap();
        first.step_on(&ds).unwrap();
        first.save(dir.path().join("mid.amba")).unwrap();
        let mut resumed = Trainer::resume(dir.path().join("mid.amba"), run.train.clone()).unwrap();
        assert_eq!(resumed.step(), 2);
        let a = resumed.step_on(&ds).unwrap();
        let mut replay = Trainer::new(Model::new(run.model.clone(), 2).unwrap(), run.train.clone()).unwrap();
        replay.step_on(&ds).unwrap();
        replay.step_on(&ds).unwrap();
        assert_eq!(a, replay.step_on(&ds).unwrap());
        assert_eq!(resumed.model.params.tensors, full.model.params.tensors);
    }

    #[test]
    fn fit_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let (mut run, ds) = setup(4);
        run.train.checkpoint_every = 2;
        run.train.eval_every = 2;
        let mut t = Trainer::new(Model::new(run.model.clone(), 0).unwrap(), run.train.clone()).unwrap();
        let opts = FitOptions { out_dir: Some(dir.path().to_path_buf()), stop_at: Some(3), ..Default::default() };
        let s = fit(&mut t, &ds, Some(&ds), &opts).unwrap();
        assert_eq!(s.steps.len(), 3);
        assert_eq!(s.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 3]);
        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
        for f in [LAST_CHECKPOINT, BEST_CHECKPOINT, "last.state.amba"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn evaluation_round_trips_through_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (run, ds) = setup(8);
        let model = Model::<f32>::new(run.model.clone(), 5).unwrap();
        model.save(dir.path().join("m.amba")).unwrap();
        let (back, _) = crate::model::load_checkpoint::<f32>(dir.path().join("m.amba"), Strictness::Strict).unwrap();
        let a = evaluate(&model, &ds, EvalMode::MultiLabel).unwrap().to_text();
        assert_eq!(a, evaluate(&back, &ds, EvalMode::MultiLabel).unwrap().to_text());
        let single = evaluate(&model, &ds, EvalMode::SingleLabel).unwrap();
        let c = single.classification.unwrap();
        assert_eq!(c.f1_micro, c.accuracy);
    }
}
