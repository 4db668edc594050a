//! The convolutional stack mapping a masked pianoroll to per-cell pitch distributions.
//!
//! Layer `l ∈ 1..=L` computes `a^l = BN(W^l ∗ h^{l−1})`. Hidden layers apply a ReLU, adding the
//! activation two layers below when `3 < l < L−1` and `l` is even; the last layer's output is
//! softmaxed over pitch.

mod checkpoint;
mod forward;
mod session;
pub mod toy;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndtensor::{BatchNormState, ConvShape, Real, Tensor, TensorError};
use crate::pianoroll::{ContextMask, Pianoroll, NUM_PITCHES, NUM_VOICES};

pub use checkpoint::{read_checkpoint, read_checkpoint_any, write_checkpoint, AnyModel, CHECKPOINT_VERSION};
pub use forward::{Gradients, LayerGradients, LossOutput};
pub use session::NetworkSession;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input does not fit the model: {0}")]
    Shape(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_channels: usize,
    pub instruments: usize,
    pub pitches: usize,
    pub kernel_time: usize,
    pub kernel_pitch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// L = 16, H = 64: trains on a laptop CPU.
    pub fn desk() -> Self {
        ModelConfig {
            num_layers: 16,
            num_channels: 64,
            instruments: NUM_VOICES,
            pitches: NUM_PITCHES,
            kernel_time: 3,
            kernel_pitch: 3,
        }
    }

    /// L = 64, H = 128.
    pub fn full_scale() -> Self {
        ModelConfig { num_layers: 64, num_channels: 128, ..ModelConfig::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.num_layers < 2 {
            return fail(format!("need at least 2 layers, got {}", self.num_layers));
        }
        if self.num_channels == 0 || self.instruments == 0 || self.pitches == 0 {
            return fail("channels, instruments and pitches must be positive".into());
        }
        if self.kernel_time.is_multiple_of(2) || self.kernel_pitch.is_multiple_of(2) {
            return fail(format!("kernel {}x{} must have odd extents", self.kernel_time, self.kernel_pitch));
        }
        Ok(())
    }

    /// Geometry of layer `l` (1-based).
    pub fn layer_shape(&self, l: usize) -> ConvShape {
        assert!((1..=self.num_layers).contains(&l), "layer {l} out of range");
        ConvShape {
            c_in: if l == 1 { 2 * self.instruments } else { self.num_channels },
            c_out: if l == self.num_layers { self.instruments } else { self.num_channels },
            kt: self.kernel_time,
            kp: self.kernel_pitch,
        }
    }

    /// Whether layer `l` adds `h^{l−2}` before its ReLU.
    pub fn has_skip(&self, l: usize) -> bool {
        l > 3 && l + 1 < self.num_layers && l.is_multiple_of(2)
    }

    pub fn parameter_count(&self) -> usize {
        (1..=self.num_layers).map(|l| self.layer_shape(l)).map(|s| s.kernel_len() + 2 * s.c_out).sum()
    }
}

/// Kernels and batch-norm state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParameters<F> {
    /// `[c_out, c_in, kt, kp]`.
    pub kernels: Tensor<F>,
    pub norm: BatchNormState<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<F> {
    pub layers: Vec<LayerParameters<F>>,
}

impl<F: Real> ModelParameters<F> {
    /// He (fan-in) normal kernels, unit scale and zero shift.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let layers = (1..=config.num_layers)
            .map(|l| {
                let s = config.layer_shape(l);
                let std = (2.0 / s.patch_len() as f64).sqrt();
                let data = (0..s.kernel_len())
                    .map(|_| F::from_f64_lossy(std * rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                LayerParameters {
                    kernels: Tensor::from_vec(&[s.c_out, s.c_in, s.kt, s.kp], data).expect("kernel shape"),
                    norm: BatchNormState::new(s.c_out),
                }
            })
            .collect();
        ModelParameters { layers }
    }

    /// Trainable tensors in a fixed order: per layer kernels, gamma, beta.
    pub fn trainable_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for layer in &mut self.layers {
            out.push(layer.kernels.data_mut());
            out.push(&mut layer.norm.gamma[..]);
            out.push(&mut layer.norm.beta[..]);
        }
        out
    }

    pub fn trainable(&self) -> Vec<&[F]> {
        let mut out = Vec::with_capacity(3 * self.layers.len());
        for layer in &self.layers {
            out.push(layer.kernels.data());
            out.push(&layer.norm.gamma[..]);
            out.push(&layer.norm.beta[..]);
        }
        out
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers {
            return Err(ModelError::Config(format!(
                "{} layers of parameters for a {}-layer config",
                self.layers.len(),
                config.num_layers
            )));
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            let s = config.layer_shape(idx + 1);
            let norm = &layer.norm;
            if layer.kernels.shape() != [s.c_out, s.c_in, s.kt, s.kp]
                || [norm.beta.len(), norm.running_mean.len(), norm.running_var.len()] != [s.c_out; 3]
                || norm.gamma.len() != s.c_out
            {
                return Err(ModelError::Config(format!("layer {} parameters have the wrong shape", idx + 1)));
            }
        }
        Ok(())
    }
}

/// Per-cell categorical distributions, `I × T × P`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Distributions {
    instruments: usize,
    timesteps: usize,
    pitches: usize,
    probs: Vec<f64>,
}

impl Distributions {
    pub fn from_vec(instruments: usize, timesteps: usize, pitches: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), instruments * timesteps * pitches, "distribution buffer size");
        Distributions { instruments, timesteps, pitches, probs }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.instruments, self.timesteps, self.pitches)
    }

    pub fn row(&self, instrument: usize, time: usize) -> &[f64] {
        let start = (instrument * self.timesteps + time) * self.pitches;
        &self.probs[start..start + self.pitches]
    }

    pub fn data(&self) -> &[f64] {
        &self.probs
    }
}

/// Anything that produces `p(x_{i,t} | x_C, C)`.
///
/// Samplers and evaluators are written against this trait so that small hand-specified models
/// can stand in for the network in tests.
pub trait ConditionalModel {
    fn instruments(&self) -> usize;

    fn pitches(&self) -> usize;

    /// All conditionals from one model evaluation.
    fn conditionals(&self, roll: &Pianoroll, mask: &ContextMask) -> Result<Distributions>;

    /// A mutable view of one roll and context answering single-cell queries.
    fn session<'a>(&'a self, roll: &Pianoroll, mask: &ContextMask) -> Result<Box<dyn CellSession + 'a>>;
}

/// Incrementally edited roll and context.
pub trait CellSession {
    fn roll(&self) -> &Pianoroll;

    fn mask(&self) -> &ContextMask;

    /// Sets the pitch of a cell and whether it belongs to the context.
    fn set(&mut self, instrument: usize, time: usize, pitch: usize, in_context: bool);

    /// Writes `p(x_{i,t} | x_C, C)` into `out` (length `P`).
    fn conditional(&mut self, instrument: usize, time: usize, out: &mut [f64]) -> Result<()>;
}

/// Session that recomputes every conditional from scratch; used by reference models.
pub struct RecomputeSession<'a, M: ConditionalModel + ?Sized> {
    model: &'a M,
    roll: Pianoroll,
    mask: ContextMask,
}

impl<'a, M: ConditionalModel + ?Sized> RecomputeSession<'a, M> {
    pub fn new(model: &'a M, roll: &Pianoroll, mask: &ContextMask) -> Self {
        RecomputeSession { model, roll: roll.clone(), mask: mask.clone() }
    }
}

impl<M: ConditionalModel + ?Sized> CellSession for RecomputeSession<'_, M> {
    fn roll(&self) -> &Pianoroll {
        &self.roll
    }

    fn mask(&self) -> &ContextMask {
        &self.mask
    }

    fn set(&mut self, instrument: usize, time: usize, pitch: usize, in_context: bool) {
        self.roll.set_pitch(instrument, time, pitch);
        if in_context {
            self.mask.insert(instrument, time);
        } else {
            self.mask.remove(instrument, time);
        }
    }

    fn conditional(&mut self, instrument: usize, time: usize, out: &mut [f64]) -> Result<()> {
        let dist = self.model.conditionals(&self.roll, &self.mask)?;
        out.copy_from_slice(dist.row(instrument, time));
        Ok(())
    }
}

/// The network: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    config: ModelConfig,
    params: ModelParameters<F>,
}

impl<F: Real> Model<F> {
    pub fn new(config: ModelConfig, params: ModelParameters<F>) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Model { config, params })
    }

    /// Freshly initialised network.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::init(&config, rng);
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParameters<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParameters<F> {
        &mut self.params
    }

    /// Inference-mode forward pass of a masked input `[2I, T, P]`; returns probabilities
    /// `[I, T, P]`.
    pub fn forward(&self, masked_input: &Tensor<F>) -> Result<Tensor<F>> {
        let (c, t, p) = match *masked_input.shape() {
            [c, t, p] => (c, t, p),
            _ => return Err(ModelError::Shape(format!("expected [2I, T, P], got {:?}", masked_input.shape()))),
        };
        self.check_input(c / 2, p)?;
        if c % 2 != 0 || t == 0 {
            return Err(ModelError::Shape(format!("expected [2I, T, P], got {:?}", masked_input.shape())));
        }
        let mut session = NetworkSession::from_input(self, masked_input.data(), t)?;
        let probs = session.all_conditionals()?;
        Ok(Tensor::from_vec(&[self.config.instruments, t, p], probs.into_iter().map(F::from_f64_lossy).collect())?)
    }

    /// Sum of `−log p` over the cells outside the context, in inference mode.
    pub fn masked_nll(&self, roll: &Pianoroll, mask: &ContextMask) -> Result<f64> {
        let dist = self.conditionals(roll, mask)?;
        Ok(mask.iter_missing().map(|(i, t)| -dist.row(i, t)[roll.pitch(i, t)].ln()).sum())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_checkpoint(path)
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        let cast_vec = |v: &[F]| v.iter().map(|x| G::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))).collect();
        let layers = self
            .params
            .layers
            .iter()
            .map(|layer| LayerParameters {
                kernels: layer.kernels.cast(),
                norm: BatchNormState {
                    gamma: cast_vec(&layer.norm.gamma),
                    beta: cast_vec(&layer.norm.beta),
                    running_mean: cast_vec(&layer.norm.running_mean),
                    running_var: cast_vec(&layer.norm.running_var),
                    epsilon: G::from_f64_lossy(layer.norm.epsilon.to_f64().unwrap_or(f64::NAN)),
                    momentum: G::from_f64_lossy(layer.norm.momentum.to_f64().unwrap_or(f64::NAN)),
                },
            })
            .collect();
        Model { config: self.config, params: ModelParameters { layers } }
    }

    fn check_input(&self, instruments: usize, pitches: usize) -> Result<()> {
        if instruments != self.config.instruments || pitches != self.config.pitches {
            return Err(ModelError::Shape(format!(
                "roll has {instruments} instruments and {pitches} pitches, model expects {} and {}",
                self.config.instruments, self.config.pitches
            )));
        }
        Ok(())
    }

    fn check_roll(&self, roll: &Pianoroll, mask: &ContextMask) -> Result<()> {
        self.check_input(roll.instruments(), roll.pitches())?;
        if mask.shape() != (roll.instruments(), roll.timesteps()) {
            return Err(ModelError::Shape(format!(
                "mask {:?} does not match roll {}x{}",
                mask.shape(),
                roll.instruments(),
                roll.timesteps()
            )));
        }
        if roll.timesteps() == 0 {
            return Err(ModelError::Shape("roll has no timesteps".into()));
        }
        Ok(())
    }
}

impl<F: Real> ConditionalModel for Model<F> {
    fn instruments(&self) -> usize {
        self.config.instruments
    }

    fn pitches(&self) -> usize {
        self.config.pitches
    }

    fn conditionals(&self, roll: &Pianoroll, mask: &ContextMask) -> Result<Distributions> {
        self.check_roll(roll, mask)?;
        let mut session = NetworkSession::new(self, roll, mask)?;
        let probs = session.all_conditionals()?;
        Ok(Distributions::from_vec(roll.instruments(), roll.timesteps(), roll.pitches(), probs))
    }

    fn session<'a>(&'a self, roll: &Pianoroll, mask: &ContextMask) -> Result<Box<dyn CellSession + 'a>> {
        self.check_roll(roll, mask)?;
        Ok(Box::new(NetworkSession::new(self, roll, mask)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pianoroll::{apply_mask, Resolution};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { num_layers: 6, num_channels: 5, instruments: 2, pitches: 7, kernel_time: 3, kernel_pitch: 3 }
    }

    fn random_roll(rng: &mut ChaCha8Rng, i: usize, t: usize, p: usize) -> Pianoroll {
        let cells = (0..i * t).map(|_| rng.random_range(0..p as u16)).collect();
        Pianoroll::from_indices(i, p, Resolution::Quarter, cells).unwrap()
    }

    #[test]
    fn layer_geometry_and_skips() {
        let c = ModelConfig::desk();
        assert_eq!(c.layer_shape(1).c_in, 8);
        assert_eq!(c.layer_shape(1).c_out, 64);
        assert_eq!(c.layer_shape(16).c_out, 4);
        let skips: Vec<usize> = (1..=16).filter(|&l| c.has_skip(l)).collect();
        assert_eq!(skips, vec![4, 6, 8, 10, 12, 14]);
        assert!(ModelConfig { num_layers: 1, ..c }.validate().is_err());
        assert!(ModelConfig { kernel_time: 2, ..c }.validate().is_err());
        assert_eq!(ModelConfig::full_scale().num_layers, 64);
    }

    #[test]
    fn he_init_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = ModelConfig { num_layers: 3, num_channels: 64, ..small() };
        let params = ModelParameters::<f64>::init(&config, &mut rng);
        let w = params.layers[1].kernels.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / (64.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
        assert!(params.layers.iter().all(|l| l.norm.gamma.iter().all(|&g| g == 1.0)));
    }

    #[test]
    fn rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f64>::init(small(), &mut rng).unwrap();
        let roll = random_roll(&mut rng, 2, 9, 7);
        let mask = ContextMask::from_fn(2, 9, |i, t| (i + t) % 3 == 0);
        let dist = model.conditionals(&roll, &mask).unwrap();
        for i in 0..2 {
            for t in 0..9 {
                let row = dist.row(i, t);
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let again = model.conditionals(&roll, &mask).unwrap();
        assert_eq!(dist, again);
        let via_forward = model.forward(&apply_mask(&roll, &mask)).unwrap();
        for (a, b) in via_forward.data().iter().zip(dist.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f64>::init(small(), &mut rng).unwrap();
        let roll = random_roll(&mut rng, 3, 4, 7);
        assert!(matches!(model.conditionals(&roll, &ContextMask::empty(3, 4)), Err(ModelError::Shape(_))));
        let mut params = model.params().clone();
        params.layers.pop();
        assert!(Model::new(small(), params).is_err());
    }

    #[test]
    fn cast_round_trip_preserves_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = Model::<f64>::init(small(), &mut rng).unwrap();
        let narrow: Model<f32> = model.cast();
        assert_eq!(narrow.config(), model.config());
        let roll = random_roll(&mut rng, 2, 5, 7);
        let mask = ContextMask::empty(2, 5);
        let a = model.conditionals(&roll, &mask).unwrap();
        let b = narrow.conditionals(&roll, &mask).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
