//! Framewise negative log-likelihood over ensembles of orderings.
//!
//! For each ordering, frames are visited in order. Within a frame the instruments are predicted
//! in a random order, each conditioned on the model's own sampled guesses for the earlier
//! instruments of that frame; the guesses are replaced by the ground truth once the frame is
//! complete. The per-frame log-likelihoods are then combined across orderings with a
//! log-mean-exp:
//!
//! `NLL = −(1/T) Σ_t log (1/M) Σ_m exp Σ_i L_{m,i,t}`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ConditionalModel, Result};
use crate::pianoroll::{ContextMask, Pianoroll};
use crate::rng::{stream, Purpose};
use crate::sampling::sample_categorical;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderingMode {
    /// Frames left to right; only the instrument order within a frame is random.
    Chronological,
    /// Frames in a uniformly random order.
    Random,
}

impl std::str::FromStr for OrderingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "chronological" => Ok(OrderingMode::Chronological),
            "random" => Ok(OrderingMode::Random),
            other => Err(format!("unknown ordering mode '{other}' (chronological, random)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Ensemble size `M`.
    pub orderings: usize,
    pub mode: OrderingMode,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { orderings: 5, mode: OrderingMode::Random, seed: 0 }
    }
}

/// Frame visiting order plus an instrument order for every frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ordering {
    pub frames: Vec<usize>,
    /// `instruments[t]` is the order in which the voices of frame `t` are predicted.
    pub instruments: Vec<Vec<usize>>,
}

impl Ordering {
    pub fn sample<R: Rng + ?Sized>(instruments: usize, timesteps: usize, mode: OrderingMode, rng: &mut R) -> Self {
        let mut frames: Vec<usize> = (0..timesteps).collect();
        if mode == OrderingMode::Random {
            frames.shuffle(rng);
        }
        let instruments = (0..timesteps)
            .map(|_| {
                let mut order: Vec<usize> = (0..instruments).collect();
                order.shuffle(rng);
                order
            })
            .collect();
        Ordering { frames, instruments }
    }
}

/// `L_{i,t}` for one ordering, laid out `[instrument][time]`.
///
/// `rng` drives the within-frame guesses.
pub fn framewise_terms<M, R>(model: &M, roll: &Pianoroll, ordering: &Ordering, rng: &mut R) -> Result<Vec<f64>>
where
    M: ConditionalModel + ?Sized,
    R: Rng + ?Sized,
{
    let (i_n, t_n) = (roll.instruments(), roll.timesteps());
    let mut terms = vec![0.0; i_n * t_n];
    let mut session = model.session(roll, &ContextMask::empty(i_n, t_n))?;
    let mut pi = vec![0.0; roll.pitches()];
    for &t in &ordering.frames {
        for &i in &ordering.instruments[t] {
            session.conditional(i, t, &mut pi)?;
            terms[i * t_n + t] = pi[roll.pitch(i, t)].ln();
            let guess = sample_categorical(&pi, rng);
            session.set(i, t, guess, true);
        }
        for i in 0..i_n {
            session.set(i, t, roll.pitch(i, t), true);
        }
    }
    Ok(terms)
}

/// `log((1/M) Σ_m exp(x_m))` with max-subtraction.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// Combines per-ordering terms into the framewise NLL.
pub fn aggregate_terms(terms: &[Vec<f64>], instruments: usize, timesteps: usize) -> f64 {
    let mut total = 0.0;
    let mut per_ordering = vec![0.0; terms.len()];
    for t in 0..timesteps {
        for (acc, l) in per_ordering.iter_mut().zip(terms) {
            *acc = (0..instruments).map(|i| l[i * timesteps + t]).sum();
        }
        total += log_mean_exp(&per_ordering);
    }
    -total / timesteps as f64
}

fn piece_nll<M: ConditionalModel + ?Sized>(
    model: &M,
    roll: &Pianoroll,
    config: &EvalConfig,
    piece: usize,
) -> Result<f64> {
    let terms = (0..config.orderings)
        .map(|m| {
            let mut rng = stream(config.seed, Purpose::Evaluation, ((piece as u64) << 20) | m as u64);
            let ordering = Ordering::sample(roll.instruments(), roll.timesteps(), config.mode, &mut rng);
            framewise_terms(model, roll, &ordering, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_terms(&terms, roll.instruments(), roll.timesteps()))
}

/// Framewise NLL of one roll in nats per frame.
pub fn framewise_nll<M: ConditionalModel + ?Sized>(model: &M, roll: &Pianoroll, config: &EvalConfig) -> Result<f64> {
    piece_nll(model, roll, config, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    /// Standard error of the mean; absent for a single piece.
    pub sem: Option<f64>,
    pub per_piece: Vec<f64>,
    pub config: EvalConfig,
}

impl EvalReport {
    pub fn from_values(per_piece: Vec<f64>, config: EvalConfig) -> Self {
        let n = per_piece.len() as f64;
        let mean = per_piece.iter().sum::<f64>() / n;
        let sem = (per_piece.len() > 1).then(|| {
            let var = per_piece.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        EvalReport { mean, sem, per_piece, config }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean and standard error of the framewise NLL over `pieces`.
///
/// Each piece and ordering gets its own random stream, so results do not depend on the order in
/// which pieces are evaluated beyond their index.
pub fn corpus_nll<M: ConditionalModel + ?Sized>(
    model: &M,
    pieces: &[Pianoroll],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if pieces.is_empty() || config.orderings == 0 {
        return Err(crate::model::ModelError::Shape("need at least one piece and one ordering".into()));
    }
    let values =
        pieces.iter().enumerate().map(|(k, roll)| piece_nll(model, roll, config, k)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_values(values, *config))
}

/// NLL under the model of generated rolls; the same computation as [`corpus_nll`].
pub fn sample_nll<M: ConditionalModel + ?Sized>(
    model: &M,
    samples: &[Pianoroll],
    config: &EvalConfig,
) -> Result<EvalReport> {
    corpus_nll(model, samples, config)
}
