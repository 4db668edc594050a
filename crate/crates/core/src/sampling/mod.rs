//! Generation: ancestral sampling and blocked Gibbs sampling, with inpainting entry points.
//!
//! All samplers leave the cells of the `fixed` mask untouched and count model evaluations: a
//! single-cell query and a full forward pass each count as one.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CellSession, ConditionalModel, ModelError};
use crate::pianoroll::{ContextMask, Pianoroll};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid sampler settings: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SamplingError>;

/// `α_n = max(α_min, α_max − n(α_max − α_min)/(ηN))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub eta: f64,
    pub steps: usize,
}

impl AnnealSchedule {
    pub const DEFAULT_ALPHA_MIN: f64 = 0.05;
    pub const DEFAULT_ALPHA_MAX: f64 = 0.9;
    pub const DEFAULT_ETA: f64 = 0.75;

    /// Default probabilities with `N = I·T` steps.
    pub fn for_roll(instruments: usize, timesteps: usize) -> Self {
        AnnealSchedule {
            alpha_min: Self::DEFAULT_ALPHA_MIN,
            alpha_max: Self::DEFAULT_ALPHA_MAX,
            eta: Self::DEFAULT_ETA,
            steps: instruments * timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(SamplingError::Invalid(format!(
                "need 0 <= alpha_min <= alpha_max <= 1, got {} and {}",
                self.alpha_min, self.alpha_max
            )));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(SamplingError::Invalid(format!("eta must lie in (0, 1], got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(SamplingError::Invalid("N >= 1 steps required".into()));
        }
        Ok(())
    }

    pub fn alpha(&self, n: usize) -> f64 {
        anneal_alpha(n, self)
    }
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    fn two_sum(a: f64, b: f64) -> Self {
        let s = a + b;
        let bb = s - a;
        DoubleDouble { hi: s, lo: (a - (s - bb)) + (b - bb) }
    }

    fn two_prod(a: f64, b: f64) -> Self {
        let p = a * b;
        DoubleDouble { hi: p, lo: a.mul_add(b, -p) }
    }

    fn normalize(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        DoubleDouble { hi: s, lo: lo - (s - hi) }
    }

    fn sub(self, other: Self) -> Self {
        let s = Self::two_sum(self.hi, -other.hi);
        Self::normalize(s.hi, s.lo + (self.lo - other.lo))
    }

    fn scale(self, k: f64) -> Self {
        let p = Self::two_prod(self.hi, k);
        Self::normalize(p.hi, p.lo + self.lo * k)
    }

    fn div(self, other: Self) -> Self {
        let q1 = self.hi / other.hi;
        let r = self.sub(other.scale(q1));
        let q2 = r.hi / other.hi;
        let r = r.sub(other.scale(q2));
        let q3 = r.hi / other.hi;
        let q = Self::normalize(q1, q2);
        Self::normalize(q.hi, q.lo + q3)
    }
}

/// Masking probability at step `n`, rounded once from the exact value of the formula.
pub fn anneal_alpha(n: usize, schedule: &AnnealSchedule) -> f64 {
    let (n, big_n) = (n as f64, schedule.steps as f64);
    // exact test of n >= ηN: the fused product keeps the sign of the exact difference
    if schedule.eta.mul_add(-big_n, n) >= 0.0 {
        return schedule.alpha_min;
    }
    if n == 0.0 {
        return schedule.alpha_max;
    }
    let span = DoubleDouble::two_sum(schedule.alpha_max, -schedule.alpha_min);
    let ratio = span.scale(n).div(DoubleDouble::two_prod(schedule.eta, big_n));
    let value = DoubleDouble { hi: schedule.alpha_max, lo: 0.0 }.sub(ratio);
    (value.hi + value.lo).max(schedule.alpha_min)
}

/// Draws an index from unnormalised probabilities.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if u < p {
                return k;
            }
            u -= p;
            last = k;
        }
    }
    last
}

/// One step of a sampler run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Masking probability (independent Gibbs) or `1 − ρ` (ancestral Gibbs).
    pub alpha: f64,
    pub masked_cell_count: usize,
    /// Cells resampled at this step; kept only when full tracing is on.
    #[serde(skip)]
    pub mask: Option<ContextMask>,
    #[serde(skip)]
    pub roll: Option<Pianoroll>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerRun {
    pub roll: Pianoroll,
    pub trace: Vec<TraceStep>,
    pub evaluations: usize,
}

impl SamplerRun {
    /// Trace as JSON lines of `{step, alpha, masked_cell_count}`.
    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|s| serde_json::to_string(s).expect("trace serializes") + "\n").collect()
    }
}

/// Options shared by the Gibbs samplers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TraceOptions {
    /// Keep the mask and intermediate roll of every step.
    pub full: bool,
}

fn check_fixed(roll: &Pianoroll, fixed: &ContextMask) -> Result<()> {
    if fixed.shape() != (roll.instruments(), roll.timesteps()) {
        return Err(SamplingError::Invalid(format!(
            "fixed mask {:?} does not match roll {}x{}",
            fixed.shape(),
            roll.instruments(),
            roll.timesteps()
        )));
    }
    Ok(())
}

/// Samples every cell outside the session's context, one at a time in uniformly random order.
fn complete<R: Rng + ?Sized>(session: &mut dyn CellSession, rng: &mut R, buf: &mut [f64]) -> Result<usize> {
    let mut remaining: Vec<(usize, usize)> = session.mask().iter_missing().collect();
    let mut evaluations = 0;
    while !remaining.is_empty() {
        let (i, t) = remaining.swap_remove(rng.random_range(0..remaining.len()));
        session.conditional(i, t, buf)?;
        evaluations += 1;
        let pitch = sample_categorical(buf, rng);
        session.set(i, t, pitch, true);
    }
    Ok(evaluations)
}

/// Orderless-NADE ancestral sampling of every cell outside `fixed`.
pub fn ancestral_sample<M, R>(model: &M, roll: &Pianoroll, fixed: &ContextMask, rng: &mut R) -> Result<SamplerRun>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    check_fixed(roll, fixed)?;
    if fixed.is_full() {
        return Ok(SamplerRun { roll: roll.clone(), trace: Vec::new(), evaluations: 0 });
    }
    let mut session = model.session(roll, fixed)?;
    let mut buf = vec![0.0; roll.pitches()];
    let evaluations = complete(session.as_mut(), rng, &mut buf)?;
    Ok(SamplerRun { roll: session.roll().clone(), trace: Vec::new(), evaluations })
}

/// Samples every non-fixed cell independently from the conditionals given `fixed`
/// (one model evaluation).
pub fn initialize_chain<M, R>(model: &M, roll: &Pianoroll, fixed: &ContextMask, rng: &mut R) -> Result<Pianoroll>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    check_fixed(roll, fixed)?;
    let dist = model.conditionals(roll, fixed)?;
    let mut out = roll.clone();
    for (i, t) in fixed.iter_missing() {
        out.set_pitch(i, t, sample_categorical(dist.row(i, t), rng));
    }
    Ok(out)
}

/// Blocked Gibbs with independent resampling of the masked block and an annealed masking
/// probability. Runs exactly `schedule.steps` model evaluations.
pub fn gibbs_independent<M, R>(
    model: &M,
    roll: &Pianoroll,
    fixed: &ContextMask,
    schedule: &AnnealSchedule,
    options: TraceOptions,
    rng: &mut R,
) -> Result<SamplerRun>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    check_fixed(roll, fixed)?;
    schedule.validate()?;
    let (i_n, t_n) = (roll.instruments(), roll.timesteps());
    let mut current = roll.clone();
    let mut trace = Vec::with_capacity(schedule.steps);
    for n in 0..schedule.steps {
        let alpha = schedule.alpha(n);
        let masked = ContextMask::from_fn(i_n, t_n, |i, t| !fixed.contains(i, t) && rng.random_bool(alpha));
        let context = masked.complement();
        let dist = model.conditionals(&current, &context)?;
        for (i, t) in masked.iter() {
            current.set_pitch(i, t, sample_categorical(dist.row(i, t), rng));
        }
        trace.push(TraceStep {
            step: n,
            alpha,
            masked_cell_count: masked.len(),
            mask: options.full.then(|| masked.clone()),
            roll: options.full.then(|| current.clone()),
        });
    }
    Ok(SamplerRun { roll: current, trace, evaluations: schedule.steps })
}

/// Blocked Gibbs where each step keeps every non-fixed cell with probability `rho` and
/// repopulates the rest by ancestral sampling.
///
/// With `rho = 0` every step discards the whole chain state, so only the last step is run;
/// the output distribution is unchanged.
pub fn gibbs_ancestral<M, R>(
    model: &M,
    roll: &Pianoroll,
    fixed: &ContextMask,
    rho: f64,
    steps: usize,
    options: TraceOptions,
    rng: &mut R,
) -> Result<SamplerRun>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    check_fixed(roll, fixed)?;
    if !(0.0..=1.0).contains(&rho) {
        return Err(SamplingError::Invalid(format!("inclusion probability must lie in [0, 1], got {rho}")));
    }
    if steps == 0 {
        return Err(SamplingError::Invalid("N >= 1 steps required".into()));
    }
    let mut session = model.session(roll, &ContextMask::full(roll.instruments(), roll.timesteps()))?;
    let mut buf = vec![0.0; roll.pitches()];
    let mut trace = Vec::new();
    let mut evaluations = 0;
    let first = if rho == 0.0 { steps - 1 } else { 0 };
    for n in first..steps {
        let mut dropped = 0;
        for (i, t) in fixed.iter_missing() {
            if rho == 1.0 || rng.random_bool(rho) {
                continue;
            }
            let pitch = session.roll().pitch(i, t);
            session.set(i, t, pitch, false);
            dropped += 1;
        }
        let masked = options.full.then(|| session.mask().complement());
        evaluations += complete(session.as_mut(), rng, &mut buf)?;
        trace.push(TraceStep {
            step: n,
            alpha: 1.0 - rho,
            masked_cell_count: dropped,
            mask: masked,
            roll: options.full.then(|| session.roll().clone()),
        });
    }
    Ok(SamplerRun { roll: session.roll().clone(), trace, evaluations })
}

/// Which sampler to run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sampler", rename_all = "kebab-case")]
pub enum Strategy {
    /// Orderless-NADE ancestral sampling.
    Nade,
    GibbsIndependent {
        schedule: AnnealSchedule,
    },
    GibbsAncestral {
        rho: f64,
        steps: usize,
    },
}

/// Completes the cells outside `fixed` with the chosen sampler. Gibbs chains start from
/// [`initialize_chain`], whose evaluation is included in the count.
pub fn inpaint<M, R>(
    model: &M,
    roll: &Pianoroll,
    fixed: &ContextMask,
    strategy: Strategy,
    options: TraceOptions,
    rng: &mut R,
) -> Result<SamplerRun>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    match strategy {
        Strategy::Nade => ancestral_sample(model, roll, fixed, rng),
        Strategy::GibbsIndependent { schedule } => {
            schedule.validate()?;
            let start = initialize_chain(model, roll, fixed, rng)?;
            let mut run = gibbs_independent(model, &start, fixed, &schedule, options, rng)?;
            run.evaluations += 1;
            Ok(run)
        }
        Strategy::GibbsAncestral { rho, steps } => {
            let start = initialize_chain(model, roll, fixed, rng)?;
            let mut run = gibbs_ancestral(model, &start, fixed, rho, steps, options, rng)?;
            run.evaluations += 1;
            Ok(run)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy::{two_cell, uniform};
    use crate::pianoroll::Resolution;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_formula() {
        let s = AnnealSchedule { alpha_min: 0.1, alpha_max: 0.9, eta: 0.75, steps: 100 };
        assert_eq!(s.alpha(0), 0.9);
        // the exact value lies halfway between two doubles and rounds to even
        assert_eq!(s.alpha(30), 0.5800000000000001);
        assert_eq!(s.alpha(75), 0.1);
        assert_eq!(s.alpha(1000), 0.1);
        assert!(AnnealSchedule { steps: 0, ..s }.validate().is_err());
        assert!(AnnealSchedule { alpha_min: 0.95, ..s }.validate().is_err());
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs = [0.2, 0.0, 0.5, 0.3];
        let mut counts = [0usize; 4];
        for _ in 0..20000 {
            counts[sample_categorical(&probs, &mut rng)] += 1;
        }
        assert_eq!(counts[1], 0);
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / 20000.0 - p).abs() < 0.015);
        }
    }

    #[test]
    fn fully_fixed_roll_needs_no_evaluations() {
        let roll = Pianoroll::blank(4, 3, 53, Resolution::Quarter);
        let run = ancestral_sample(&uniform(4, 53), &roll, &ContextMask::full(4, 3), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(run.evaluations, 0);
        assert_eq!(run.roll, roll);
    }

    #[test]
    fn evaluation_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = uniform(2, 5);
        let roll = Pianoroll::blank(2, 6, 5, Resolution::Quarter);
        let fixed = ContextMask::frames(2, 6, 0..2);
        assert_eq!(ancestral_sample(&model, &roll, &fixed, &mut rng).unwrap().evaluations, 8);
        let s = AnnealSchedule::for_roll(2, 6);
        let run = gibbs_independent(&model, &roll, &fixed, &s, TraceOptions::default(), &mut rng).unwrap();
        assert_eq!(run.evaluations, 12);
        assert_eq!(run.trace.len(), 12);
        let run = gibbs_ancestral(&model, &roll, &fixed, 0.3, 5, TraceOptions::default(), &mut rng).unwrap();
        assert!(run.evaluations <= 5 * 12);
        assert_eq!(run.roll.slice_time(0, 2), roll.slice_time(0, 2));
    }

    #[test]
    fn degenerate_schedules_leave_the_roll_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = uniform(2, 5);
        let mut roll = Pianoroll::blank(2, 4, 5, Resolution::Quarter);
        roll.set_pitch(1, 2, 3);
        let frozen = AnnealSchedule { alpha_min: 0.0, alpha_max: 0.0, eta: 1.0, steps: 7 };
        let empty = ContextMask::empty(2, 4);
        let run = gibbs_independent(&model, &roll, &empty, &frozen, TraceOptions::default(), &mut rng).unwrap();
        assert_eq!(run.roll, roll);
        let run = gibbs_ancestral(&model, &roll, &empty, 1.0, 4, TraceOptions::default(), &mut rng).unwrap();
        assert_eq!(run.roll, roll);
        assert_eq!(run.evaluations, 0);
    }

    #[test]
    fn rho_zero_runs_one_ancestral_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = two_cell([0.3, 0.6], [[0.1, 0.8], [0.25, 0.9]]);
        let roll = Pianoroll::blank(1, 2, 2, Resolution::Quarter);
        let run = gibbs_ancestral(&model, &roll, &ContextMask::empty(1, 2), 0.0, 50, TraceOptions::default(), &mut rng)
            .unwrap();
        assert_eq!(run.evaluations, 2);
        assert_eq!(run.trace.len(), 1);
        assert_eq!(run.trace[0].step, 49);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = uniform(1, 2);
        let roll = Pianoroll::blank(1, 2, 2, Resolution::Quarter);
        let empty = ContextMask::empty(1, 2);
        assert!(gibbs_ancestral(&model, &roll, &empty, 1.5, 3, TraceOptions::default(), &mut rng).is_err());
        assert!(gibbs_ancestral(&model, &roll, &empty, 0.5, 0, TraceOptions::default(), &mut rng).is_err());
        let bad = ContextMask::empty(2, 2);
        assert!(ancestral_sample(&model, &roll, &bad, &mut rng).is_err());
    }

    #[test]
    fn trace_export() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = uniform(1, 3);
        let roll = Pianoroll::blank(1, 4, 3, Resolution::Quarter);
        let s = AnnealSchedule::for_roll(1, 4);
        let run =
            gibbs_independent(&model, &roll, &ContextMask::empty(1, 4), &s, TraceOptions { full: true }, &mut rng)
                .unwrap();
        let jsonl = run.trace_jsonl();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("{\"step\":0,\"alpha\":0.9,\"masked_cell_count\":"));
        assert!(run.trace.iter().all(|s| s.mask.is_some() && s.roll.is_some()));
    }
}
