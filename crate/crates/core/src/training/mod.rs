//! Orderless NADE training.
//!
//! Each step draws a batch of random crops, one random context per crop, and minimises the
//! masked cross-entropy scaled by `1/|¬C|` with Adam.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{corpus_nll, EvalConfig, OrderingMode};
use crate::model::{Gradients, Model, ModelConfig, ModelError, ModelParameters};
use crate::ndtensor::{Real, TensorError};
use crate::pianoroll::{random_crop, ContextMask, Pianoroll};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(ModelError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub crop_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    /// Checkpoint and validation cadence in steps; 0 disables both.
    pub checkpoint_every: usize,
    /// Validation pieces (their first `crop_length` frames) scored at each checkpoint.
    pub validation_pieces: usize,
    pub validation_orderings: usize,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    /// Stop once the mean loss over the last `loss_window` steps falls below this value.
    pub target_loss: Option<f64>,
    pub loss_window: usize,
    pub seed: u64,
    /// Record elapsed seconds in the log. Off by default so that logs are reproducible.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_length: 32,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 5000,
            checkpoint_every: 500,
            validation_pieces: 4,
            validation_orderings: 1,
            patience: None,
            target_loss: None,
            loss_window: 100,
            seed: 0,
            log_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("crop length", self.crop_length),
            ("batch size", self.batch_size),
            ("steps", self.steps),
            ("loss window", self.loss_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Invalid(format!("learning rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(TrainError::Invalid("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Random strict context: `|C|` uniform on `1..D` with `|C| = D` redrawn, then a uniform subset
/// of that size.
pub fn sample_context<R: Rng + ?Sized>(instruments: usize, timesteps: usize, rng: &mut R) -> Result<ContextMask> {
    let d = instruments * timesteps;
    if d < 2 {
        return Err(TrainError::Invalid(format!("need at least 2 cells to draw a strict context, got {d}")));
    }
    let size = loop {
        let k = rng.random_range(1..=d);
        if k < d {
            break k;
        }
    };
    Ok(subset_of_size(instruments, timesteps, size, rng))
}

/// Context distributed as the set of variables preceding a uniformly random position in a
/// uniformly random ordering: `|C|` uniform on `0..D`.
pub fn sample_ordering_context<R: Rng + ?Sized>(instruments: usize, timesteps: usize, rng: &mut R) -> ContextMask {
    let d = instruments * timesteps;
    let size = rng.random_range(0..d);
    subset_of_size(instruments, timesteps, size, rng)
}

fn subset_of_size<R: Rng + ?Sized>(instruments: usize, timesteps: usize, size: usize, rng: &mut R) -> ContextMask {
    let mut mask = ContextMask::empty(instruments, timesteps);
    for idx in sample_indices(rng, instruments * timesteps, size) {
        mask.insert(idx / timesteps, idx % timesteps);
    }
    mask
}

/// First and second moment estimates for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ModelParameters<F>) -> Self {
        let zeros: Vec<Vec<F>> = params.trainable().iter().map(|s| vec![F::zero(); s.len()]).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn update(&mut self, params: &mut ModelParameters<F>, grads: &Gradients<F>, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let lr = F::from_f64_lossy(config.learning_rate);
        let (b1f, b2f) = (F::from_f64_lossy(b1), F::from_f64_lossy(b2));
        let (c1f, c2f) = (F::from_f64_lossy(c1), F::from_f64_lossy(c2));
        let eps = F::from_f64_lossy(config.epsilon);
        let one = F::one();
        for (((p, g), m), v) in params.trainable_mut().into_iter().zip(grads.slices()).zip(&mut self.m).zip(&mut self.v)
        {
            for k in 0..p.len() {
                m[k] = b1f * m[k] + (one - b1f) * g[k];
                v[k] = b2f * v[k] + (one - b2f) * g[k] * g[k];
                let delta = lr * (m[k] / c1f) / ((v[k] / c2f).sqrt() + eps);
                if delta != F::zero() {
                    p[k] -= delta;
                }
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    /// Seconds since training started; `null` unless enabled.
    pub wallclock: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub valid_nll: Option<f64>,
}

pub struct TrainOutcome<F> {
    pub model: Model<F>,
    pub log: Vec<LogRecord>,
    pub steps_run: usize,
    /// Mean loss over the final `loss_window` steps.
    pub trailing_loss: f64,
    pub best_valid_nll: Option<f64>,
    pub stopped_early: bool,
}

fn model_err(step: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => {
            TrainError::Diverged { step, detail: format!("non-finite value in {op}") }
        }
        other => TrainError::Model(other),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.display().to_string(), source }
}

/// Trains a freshly initialised model.
///
/// With an output directory, writes `train_log.jsonl`, periodic `step_NNNNNN.ckpt` files,
/// `best.ckpt` (lowest validation NLL) and `final.ckpt`.
pub fn train<F: Real>(
    train_set: &[Pianoroll],
    valid_set: &[Pianoroll],
    model_config: ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    let mut init_rng = stream(config.seed, Purpose::Init, 0);
    let model = Model::init(model_config, &mut init_rng).map_err(TrainError::Model)?;
    train_from(model, train_set, valid_set, config, out_dir)
}

/// Continues training `model`.
pub fn train_from<F: Real>(
    mut model: Model<F>,
    train_set: &[Pianoroll],
    valid_set: &[Pianoroll],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<F>> {
    config.validate()?;
    let mc = *model.config();
    let eligible: Vec<&Pianoroll> = train_set.iter().filter(|r| r.timesteps() >= config.crop_length).collect();
    if eligible.is_empty() {
        return Err(TrainError::Invalid(format!("no training piece has at least {} timesteps", config.crop_length)));
    }
    if let Some(bad) = train_set.iter().find(|r| r.instruments() != mc.instruments || r.pitches() != mc.pitches) {
        return Err(TrainError::Invalid(format!(
            "piece with {} instruments and {} pitches does not fit the model",
            bad.instruments(),
            bad.pitches()
        )));
    }
    let validation: Vec<Pianoroll> = valid_set
        .iter()
        .take(config.validation_pieces)
        .map(|r| r.slice_time(0, r.timesteps().min(config.crop_length)))
        .collect();
    let eval_config =
        EvalConfig { orderings: config.validation_orderings.max(1), mode: OrderingMode::Random, seed: config.seed };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train_log.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(io_err(&path))?), path))
        }
        None => None,
    };
    let checkpoint = |model: &Model<F>, name: String| -> Result<PathBuf> {
        let dir = out_dir.expect("checkpoints need an output directory");
        let path = dir.join(name);
        model.save(&path).map_err(TrainError::Model)?;
        Ok(path)
    };

    let mut crop_rng = stream(config.seed, Purpose::Crop, 0);
    let mut context_rng = stream(config.seed, Purpose::Context, 0);
    let mut adam = AdamState::new(model.params());
    let mut log = Vec::with_capacity(config.steps);
    let mut best: Option<f64> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let started = Instant::now();
    let mut steps_run = 0;

    for step in 1..=config.steps {
        let mut rolls = Vec::with_capacity(config.batch_size);
        let mut masks = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let piece = eligible[crop_rng.random_range(0..eligible.len())];
            rolls.push(random_crop(piece, config.crop_length, &mut crop_rng).roll);
            masks.push(sample_context(mc.instruments, config.crop_length, &mut context_rng)?);
        }
        let out = model.loss_and_gradients(&rolls, &masks).map_err(model_err(step))?;
        if !out.loss.is_finite() {
            return Err(TrainError::Diverged { step, detail: format!("loss is {}", out.loss) });
        }
        adam.update(model.params_mut(), &out.gradients, config);
        model.update_running_stats(&out.batch_stats);
        steps_run = step;

        let mut record = LogRecord {
            step,
            loss: out.loss,
            wallclock: config.log_wallclock.then(|| started.elapsed().as_secs_f64()),
            valid_nll: None,
        };
        let at_checkpoint = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
        if at_checkpoint && !validation.is_empty() {
            let report = corpus_nll(&model, &validation, &eval_config).map_err(model_err(step))?;
            record.valid_nll = Some(report.mean);
            if best.is_none_or(|b| report.mean < b) {
                best = Some(report.mean);
                since_best = 0;
                if out_dir.is_some() {
                    checkpoint(&model, "best.ckpt".into())?;
                }
            } else {
                since_best += 1;
            }
        }
        if at_checkpoint && out_dir.is_some() {
            checkpoint(&model, format!("step_{step:06}.ckpt"))?;
        }
        if let Some((w, path)) = log_file.as_mut() {
            let line = serde_json::to_string(&record).expect("log record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io_err(path))?;
        }
        log.push(record);

        let window = &log[log.len().saturating_sub(config.loss_window)..];
        let trailing = window.iter().map(|r| r.loss).sum::<f64>() / window.len() as f64;
        let hit_target = config.target_loss.is_some_and(|t| window.len() == config.loss_window && trailing < t);
        let out_of_patience = config.patience.is_some_and(|p| since_best >= p && best.is_some());
        if hit_target || out_of_patience {
            stopped_early = step < config.steps;
            break;
        }
    }
    if let Some((w, path)) = log_file.as_mut() {
        w.flush().map_err(io_err(path))?;
    }
    if out_dir.is_some() {
        checkpoint(&model, "final.ckpt".into())?;
    }
    let window = &log[log.len().saturating_sub(config.loss_window)..];
    let trailing_loss = window.iter().map(|r| r.loss).sum::<f64>() / window.len().max(1) as f64;
    Ok(TrainOutcome { model, log, steps_run, trailing_loss, best_valid_nll: best, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pianoroll::Resolution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> ModelConfig {
        ModelConfig { num_layers: 4, num_channels: 4, instruments: 2, pitches: 5, kernel_time: 3, kernel_pitch: 3 }
    }

    fn pieces(n: usize, len: usize, seed: u64) -> Vec<Pianoroll> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cells = (0..2 * len).map(|_| rng.random_range(0..5u16)).collect();
                Pianoroll::from_indices(2, 5, Resolution::Quarter, cells).unwrap()
            })
            .collect()
    }

    #[test]
    fn context_is_strict_and_nonempty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let m = sample_context(2, 3, &mut rng).unwrap();
            assert!(!m.is_empty() && !m.is_full());
        }
        assert!(sample_context(1, 1, &mut rng).is_err());
        let sizes: Vec<usize> = (0..2000).map(|_| sample_ordering_context(1, 3, &mut rng).len()).collect();
        assert!(sizes.contains(&0) && !sizes.contains(&3));
    }

    #[test]
    fn zero_learning_rate_keeps_trainable_parameters() {
        let config = TrainConfig {
            learning_rate: 0.0,
            steps: 3,
            crop_length: 6,
            batch_size: 2,
            checkpoint_every: 0,
            ..Default::default()
        };
        let set = pieces(3, 8, 1);
        let out = train::<f64>(&set, &[], tiny_model(), &config, None).unwrap();
        let fresh = Model::<f64>::init(tiny_model(), &mut stream(config.seed, Purpose::Init, 0)).unwrap();
        assert_eq!(out.model.params().trainable(), fresh.params().trainable());
        assert_eq!(out.steps_run, 3);
    }

    #[test]
    fn loss_goes_down_on_a_repeated_piece() {
        let config = TrainConfig {
            steps: 60,
            crop_length: 6,
            batch_size: 4,
            checkpoint_every: 0,
            learning_rate: 1e-2,
            loss_window: 10,
            ..Default::default()
        };
        let set = pieces(1, 6, 2);
        let out = train::<f64>(&set, &[], tiny_model(), &config, None).unwrap();
        let first: f64 = out.log[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(out.trailing_loss < first, "{} vs {first}", out.trailing_loss);
    }

    #[test]
    fn short_pieces_only_is_an_error() {
        let config = TrainConfig { crop_length: 10, ..Default::default() };
        assert!(matches!(
            train::<f64>(&pieces(2, 5, 3), &[], tiny_model(), &config, None),
            Err(TrainError::Invalid(_))
        ));
    }

    #[test]
    fn divergence_reports_the_step() {
        let config = TrainConfig {
            steps: 50,
            crop_length: 6,
            batch_size: 2,
            checkpoint_every: 0,
            learning_rate: 1e300,
            ..Default::default()
        };
        match train::<f64>(&pieces(2, 6, 4), &[], tiny_model(), &config, None) {
            Err(TrainError::Diverged { step, .. }) => assert!(step >= 1),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig {
            steps: 4,
            crop_length: 6,
            batch_size: 2,
            checkpoint_every: 2,
            validation_pieces: 1,
            ..Default::default()
        };
        let set = pieces(2, 6, 5);
        let out = train::<f64>(&set, &set, tiny_model(), &config, Some(dir.path())).unwrap();
        let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.lines().next().unwrap().contains("\"wallclock\":null"));
        assert!(log.lines().nth(1).unwrap().contains("valid_nll"));
        for name in ["step_000002.ckpt", "step_000004.ckpt", "best.ckpt", "final.ckpt"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        assert_eq!(Model::<f64>::load(&dir.path().join("final.ckpt")).unwrap(), out.model);
    }
}
