use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use counterpoint::model::{read_checkpoint_any, AnyModel, ModelError};
use counterpoint::pianoroll::{load_dataset, to_midi, NUM_PITCHES, NUM_VOICES};
use counterpoint::rng::{stream, Purpose};
use counterpoint::sampling::{inpaint, SamplingError, TraceOptions};
use counterpoint::training::{train, TrainError};
use counterpoint::{
    corpus_nll, sample_nll, AnnealSchedule, ContextMask, Dataset, EvalConfig, ModelConfig, Pianoroll, Strategy,
    TrainConfig,
};
use serde::Serialize;

use crate::args::{
    Command, DTypeArg, EvaluateArgs, InpaintArgs, SampleArgs, SamplerArg, SamplerArgs, SelftestArgs, TrainArgs,
};
use crate::{maskspec, score};

/// Exit code 1 for bad input, 2 for failures while doing the work.
pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(anyhow!(msg.into()))
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

fn from_sampling(e: SamplingError) -> Failure {
    match e {
        SamplingError::Invalid(_) => Failure::Invalid(e.into()),
        SamplingError::Model(_) => Failure::Runtime(e.into()),
    }
}

pub fn dispatch(command: Command) -> Outcome<()> {
    match command {
        Command::Train(a) => run_train(a),
        Command::Sample(a) => run_sample(a),
        Command::Inpaint(a) => run_inpaint(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Selftest(a) => run_selftest(a),
    }
}

fn require_file(path: &Path, what: &str) -> Outcome<()> {
    if !path.is_file() {
        return Err(invalid(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn prepare_outdir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(Failure::Invalid)
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Outcome<()> {
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display())).map_err(Failure::Runtime)
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Outcome<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write(path, s)
}

fn load_data(path: &Path, resolution: counterpoint::Resolution) -> Outcome<Dataset> {
    require_file(path, "dataset")?;
    load_dataset(path, resolution)
        .map_err(|e| Failure::Invalid(anyhow!(e).context(format!("loading {}", path.display()))))
}

fn load_model(path: &Path) -> Outcome<AnyModel> {
    require_file(path, "checkpoint")?;
    read_checkpoint_any(path).map_err(runtime)
}

fn check_four_voices(model: &AnyModel) -> Outcome<()> {
    let c = model.config();
    if c.instruments != NUM_VOICES || c.pitches != NUM_PITCHES {
        return Err(invalid(format!(
            "checkpoint models {} voices over {} pitches; chorales need {NUM_VOICES} over {NUM_PITCHES}",
            c.instruments, c.pitches
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps_run: usize,
    trailing_loss: f64,
    best_valid_nll: Option<f64>,
    stopped_early: bool,
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    data: &'a Path,
    train_pieces: usize,
    dtype: &'a str,
    model: ModelConfig,
    train: &'a TrainConfig,
}

fn run_train(a: TrainArgs) -> Outcome<()> {
    let dataset = load_data(&a.data, a.resolution.into())?;
    let model_config = ModelConfig {
        num_layers: a.layers,
        num_channels: a.channels,
        instruments: NUM_VOICES,
        pitches: NUM_PITCHES,
        kernel_time: a.kernel_time,
        kernel_pitch: a.kernel_pitch,
    };
    model_config.validate().map_err(|e| Failure::Invalid(e.into()))?;
    let config = TrainConfig {
        crop_length: a.crop_length,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.adam_epsilon,
        steps: a.steps,
        checkpoint_every: a.checkpoint_every,
        validation_pieces: a.validation_pieces,
        validation_orderings: a.validation_orderings,
        patience: a.patience,
        target_loss: a.target_loss,
        loss_window: a.loss_window,
        seed: a.common.seed,
        log_wallclock: a.log_wallclock,
    };
    config.validate().map_err(|e| Failure::Invalid(e.into()))?;
    let pieces = &dataset.train[..a.train_pieces.unwrap_or(usize::MAX).min(dataset.train.len())];
    prepare_outdir(&a.outdir)?;
    let dtype = match a.dtype {
        DTypeArg::F32 => "f32",
        DTypeArg::F64 => "f64",
    };
    write_json(
        a.outdir.join("config.json"),
        &TrainRecord { data: &a.data, train_pieces: pieces.len(), dtype, model: model_config, train: &config },
    )?;
    let classify = |e: TrainError| match e {
        TrainError::Invalid(_) => Failure::Invalid(e.into()),
        other => Failure::Runtime(other.into()),
    };
    let summary = match a.dtype {
        DTypeArg::F32 => {
            let o = train::<f32>(pieces, &dataset.valid, model_config, &config, Some(&a.outdir)).map_err(classify)?;
            TrainSummary {
                steps_run: o.steps_run,
                trailing_loss: o.trailing_loss,
                best_valid_nll: o.best_valid_nll,
                stopped_early: o.stopped_early,
            }
        }
        DTypeArg::F64 => {
            let o = train::<f64>(pieces, &dataset.valid, model_config, &config, Some(&a.outdir)).map_err(classify)?;
            TrainSummary {
                steps_run: o.steps_run,
                trailing_loss: o.trailing_loss,
                best_valid_nll: o.best_valid_nll,
                stopped_early: o.stopped_early,
            }
        }
    };
    write_json(a.outdir.join("summary.json"), &summary)?;
    eprintln!(
        "trained {} steps, trailing loss {:.4}; wrote {}",
        summary.steps_run,
        summary.trailing_loss,
        a.outdir.join("final.ckpt").display()
    );
    Ok(())
}

fn strategy(s: &SamplerArgs, instruments: usize, timesteps: usize) -> Outcome<Strategy> {
    let steps = s.steps.unwrap_or(instruments * timesteps);
    if s.sampler != SamplerArg::Nade && steps == 0 {
        return Err(invalid("N >= 1 Gibbs steps required (--steps)"));
    }
    Ok(match s.sampler {
        SamplerArg::Nade => Strategy::Nade,
        SamplerArg::GibbsIndependent => {
            let schedule = AnnealSchedule { alpha_min: s.alpha_min, alpha_max: s.alpha_max, eta: s.eta, steps };
            schedule.validate().map_err(from_sampling)?;
            Strategy::GibbsIndependent { schedule }
        }
        SamplerArg::GibbsAncestral => {
            if !(0.0..=1.0).contains(&s.rho) {
                return Err(invalid(format!("--rho must lie in [0, 1], got {}", s.rho)));
            }
            Strategy::GibbsAncestral { rho: s.rho, steps }
        }
    })
}

#[derive(Serialize)]
struct SampleRecord {
    file: String,
    evaluations: usize,
    nll: Option<f64>,
}

#[derive(Serialize)]
struct SampleSummary {
    #[serde(flatten)]
    strategy: Strategy,
    seed: u64,
    length: usize,
    samples: Vec<SampleRecord>,
    mean_nll: Option<f64>,
    sem_nll: Option<f64>,
}

fn run_sample(a: SampleArgs) -> Outcome<()> {
    if a.length == 0 || a.count == 0 {
        return Err(invalid("--length and --count must be positive"));
    }
    let strategy = strategy(&a.sampler, NUM_VOICES, a.length)?;
    let model = load_model(&a.checkpoint)?;
    check_four_voices(&model)?;
    prepare_outdir(&a.outdir)?;
    let blank = Pianoroll::blank(NUM_VOICES, a.length, NUM_PITCHES, a.resolution.into());
    let free = ContextMask::empty(NUM_VOICES, a.length);
    let options = TraceOptions::default();
    let mut records = Vec::with_capacity(a.count);
    let mut rolls = Vec::with_capacity(a.count);
    for k in 0..a.count {
        let mut rng = stream(a.common.seed, Purpose::Sampling, k as u64);
        let run = inpaint(&model, &blank, &free, strategy, options, &mut rng).map_err(from_sampling)?;
        let name = format!("sample_{k:03}");
        to_midi(&run.roll, &a.outdir.join(format!("{name}.mid")), a.sampler.tempo).map_err(runtime)?;
        write(a.outdir.join(format!("{name}.json")), score::to_json(&run.roll))?;
        if a.sampler.trace {
            write(a.outdir.join(format!("{name}_trace.jsonl")), run.trace_jsonl())?;
        }
        records.push(SampleRecord { file: format!("{name}.json"), evaluations: run.evaluations, nll: None });
        rolls.push(run.roll);
    }
    let (mut mean_nll, mut sem_nll) = (None, None);
    if a.score_orderings > 0 {
        let config = EvalConfig { orderings: a.score_orderings, seed: a.common.seed, ..EvalConfig::default() };
        let report = sample_nll(&model, &rolls, &config).map_err(runtime)?;
        for (r, v) in records.iter_mut().zip(&report.per_piece) {
            r.nll = Some(*v);
        }
        mean_nll = Some(report.mean);
        sem_nll = report.sem;
    }
    let summary =
        SampleSummary { strategy, seed: a.common.seed, length: a.length, samples: records, mean_nll, sem_nll };
    write_json(a.outdir.join("samples.json"), &summary)?;
    eprintln!("wrote {} sample(s) to {}", a.count, a.outdir.display());
    Ok(())
}

#[derive(Serialize)]
struct InpaintSummary {
    #[serde(flatten)]
    strategy: Strategy,
    seed: u64,
    timesteps: usize,
    fixed_cells: usize,
    filled_cells: usize,
    evaluations: usize,
}

fn run_inpaint(a: InpaintArgs) -> Outcome<()> {
    let (roll, known) = match (&a.score, &a.data) {
        (Some(path), None) => {
            require_file(path, "score")?;
            let s = score::load(path).map_err(Failure::Invalid)?;
            (s.roll, s.known)
        }
        (None, Some(path)) => {
            let dataset = load_data(path, a.resolution.into())?;
            let split = dataset.split(a.split.into());
            let piece = split
                .get(a.piece)
                .ok_or_else(|| invalid(format!("split has {} pieces, asked for piece {}", split.len(), a.piece)))?;
            if a.start >= piece.timesteps() {
                return Err(invalid(format!("--start {} beyond the piece's {} frames", a.start, piece.timesteps())));
            }
            let len = a.length.unwrap_or(piece.timesteps() - a.start);
            if len == 0 || a.start + len > piece.timesteps() {
                return Err(invalid(format!(
                    "excerpt {}+{len} outside the piece's {} frames",
                    a.start,
                    piece.timesteps()
                )));
            }
            let excerpt = piece.slice_time(a.start, len);
            let known = ContextMask::full(NUM_VOICES, len);
            (excerpt, known)
        }
        _ => return Err(invalid("give exactly one of --score or --data")),
    };
    let (i_n, t_n) = (roll.instruments(), roll.timesteps());
    let mut fixed = match &a.fix {
        Some(spec) => maskspec::parse(spec, i_n, t_n).map_err(invalid)?,
        None if a.fix_voice.is_empty() => {
            if a.data.is_some() {
                return Err(invalid("dataset input needs --fix or --fix-voice"));
            }
            known.clone()
        }
        None => ContextMask::empty(i_n, t_n),
    };
    for v in &a.fix_voice {
        fixed = fixed.union(&ContextMask::voice(i_n, t_n, maskspec::voice_index(v).map_err(invalid)?));
    }
    if let Some((i, t)) = fixed.iter().find(|&(i, t)| !known.contains(i, t)) {
        return Err(invalid(format!("cell (voice {i}, frame {t}) is fixed but has no pitch in the input")));
    }
    let strategy = strategy(&a.sampler, i_n, t_n)?;
    let model = load_model(&a.checkpoint)?;
    check_four_voices(&model)?;
    prepare_outdir(&a.outdir)?;
    let mut rng = stream(a.common.seed, Purpose::Sampling, 0);
    let run = inpaint(&model, &roll, &fixed, strategy, TraceOptions::default(), &mut rng).map_err(from_sampling)?;
    write(a.outdir.join("input.json"), score::to_json(&roll))?;
    write(a.outdir.join("inpainted.json"), score::to_json(&run.roll))?;
    to_midi(&run.roll, &a.outdir.join("inpainted.mid"), a.sampler.tempo).map_err(runtime)?;
    if a.sampler.trace {
        write(a.outdir.join("inpainted_trace.jsonl"), run.trace_jsonl())?;
    }
    let summary = InpaintSummary {
        strategy,
        seed: a.common.seed,
        timesteps: t_n,
        fixed_cells: fixed.len(),
        filled_cells: fixed.capacity() - fixed.len(),
        evaluations: run.evaluations,
    };
    write_json(a.outdir.join("inpaint.json"), &summary)?;
    eprintln!("wrote {}", a.outdir.join("inpainted.json").display());
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Outcome<()> {
    if a.orderings == 0 {
        return Err(invalid("--orderings must be at least 1"));
    }
    let dataset = load_data(&a.data, a.resolution.into())?;
    let model = load_model(&a.checkpoint)?;
    check_four_voices(&model)?;
    let split = dataset.split(a.split.into());
    let pieces: Vec<Pianoroll> = split
        .iter()
        .take(a.max_pieces.unwrap_or(usize::MAX))
        .map(|p| p.slice_time(0, p.timesteps().min(a.max_frames.unwrap_or(usize::MAX))))
        .collect();
    if pieces.is_empty() || pieces.iter().any(|p| p.timesteps() == 0) {
        return Err(invalid("nothing to evaluate"));
    }
    prepare_outdir(&a.outdir)?;
    let config = EvalConfig { orderings: a.orderings, mode: a.mode.into(), seed: a.common.seed };
    let report = corpus_nll(&model, &pieces, &config).map_err(|e: ModelError| runtime(e))?;
    let json = report.to_json() + "\n";
    write(a.outdir.join("eval_report.json"), &json)?;
    print!("{json}");
    Ok(())
}

fn run_selftest(a: SelftestArgs) -> Outcome<()> {
    let checks = counterpoint::selftest::run(a.common.seed);
    let mut failed = 0;
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}
