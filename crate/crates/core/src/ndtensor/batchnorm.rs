//! Batch normalization with statistics shared across batch, time and pitch.

use super::{batch_layout, check_finite, Real, Result, Tensor, TensorError};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the running statistics.
    Infer,
}

/// Per-channel scale, shift and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub epsilon: F,
    pub momentum: F,
}

/// Statistics of one training batch, used to refresh the running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// What the backward pass needs from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<F> {
    pub x_hat: Vec<F>,
    pub inv_std: Vec<F>,
}

impl<F: Real> BatchNormState<F> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![F::one(); channels],
            beta: vec![F::zero(); channels],
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            epsilon: F::from_f64_lossy(DEFAULT_EPSILON),
            momentum: F::from_f64_lossy(DEFAULT_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `running ← momentum · running + (1 − momentum) · batch`.
    pub fn update_running(&mut self, stats: &BatchStats<F>) {
        let keep = self.momentum;
        let take = F::one() - keep;
        for (r, &m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = keep * *r + take * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = keep * *r + take * v;
        }
    }

    /// Inference-mode normalization folded into `y = scale · x + shift` per channel.
    pub fn infer_affine(&self) -> (Vec<F>, Vec<F>) {
        let scale: Vec<F> =
            self.gamma.iter().zip(&self.running_var).map(|(&g, &v)| g / (v + self.epsilon).sqrt()).collect();
        let shift = self.beta.iter().zip(&self.running_mean).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
        (scale, shift)
    }

    fn check_channels(&self, op: &'static str, channels: usize) -> Result<()> {
        if channels != self.channels() {
            return Err(TensorError::Shape {
                op,
                detail: format!("input has {channels} channels, state has {}", self.channels()),
            });
        }
        Ok(())
    }
}

/// Training-mode normalization of a `[batch, channels, spatial]` buffer.
pub(crate) fn train_forward<F: Real>(
    x: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
    state: &BatchNormState<F>,
) -> (Vec<F>, BatchNormCache<F>, BatchStats<F>) {
    let count = (batch * spatial) as f64;
    let mut y = vec![F::zero(); x.len()];
    let mut x_hat = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(channels);
    let mut stats = BatchStats { mean: Vec::with_capacity(channels), var: Vec::with_capacity(channels) };
    let eps = state.epsilon.to_f64().unwrap_or(DEFAULT_EPSILON);
    for c in 0..channels {
        let planes = (0..batch).map(|b| (b * channels + c) * spatial);
        let mut sum = 0.0;
        for start in planes.clone() {
            sum += x[start..start + spatial].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for start in planes.clone() {
            sq += x[start..start + spatial]
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap_or(f64::NAN) - mean;
                    d * d
                })
                .sum::<f64>();
        }
        let var = sq / count;
        let istd = 1.0 / (var + eps).sqrt();
        let (mean_f, istd_f) = (F::from_f64_lossy(mean), F::from_f64_lossy(istd));
        let (g, b) = (state.gamma[c], state.beta[c]);
        for start in planes {
            for i in start..start + spatial {
                let h = (x[i] - mean_f) * istd_f;
                x_hat[i] = h;
                y[i] = g * h + b;
            }
        }
        inv_std.push(istd_f);
        stats.mean.push(mean_f);
        stats.var.push(F::from_f64_lossy(var));
    }
    (y, BatchNormCache { x_hat, inv_std }, stats)
}

/// Backward pass of [`train_forward`]; returns `(dx, dgamma, dbeta)`.
pub(crate) fn train_backward<F: Real>(
    grad_out: &[F],
    cache: &BatchNormCache<F>,
    gamma: &[F],
    batch: usize,
    channels: usize,
    spatial: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let count = (batch * spatial) as f64;
    let mut dx = vec![F::zero(); grad_out.len()];
    let mut dgamma = Vec::with_capacity(channels);
    let mut dbeta = Vec::with_capacity(channels);
    for c in 0..channels {
        let planes = (0..batch).map(|b| (b * channels + c) * spatial);
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for start in planes.clone() {
            for i in start..start + spatial {
                let dy = grad_out[i].to_f64().unwrap_or(f64::NAN);
                sum_dy += dy;
                sum_dy_xhat += dy * cache.x_hat[i].to_f64().unwrap_or(f64::NAN);
            }
        }
        dgamma.push(F::from_f64_lossy(sum_dy_xhat));
        dbeta.push(F::from_f64_lossy(sum_dy));
        // dx = gamma * inv_std * (dy - mean(dy) - x_hat * mean(dy * x_hat))
        let scale = gamma[c] * cache.inv_std[c];
        let mean_dy = F::from_f64_lossy(sum_dy / count);
        let mean_dy_xhat = F::from_f64_lossy(sum_dy_xhat / count);
        for start in planes {
            for i in start..start + spatial {
                dx[i] = scale * (grad_out[i] - mean_dy - cache.x_hat[i] * mean_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Applies the per-channel affine map of inference-mode normalization in place.
pub(crate) fn apply_affine<F: Real>(x: &mut [F], channels: usize, spatial: usize, scale: &[F], shift: &[F]) {
    for (i, chunk) in x.chunks_mut(spatial).enumerate() {
        let c = i % channels;
        let (s, b) = (scale[c], shift[c]);
        for v in chunk {
            *v = s * *v + b;
        }
    }
}

/// Training-mode batch normalization. Returns the output, the backward cache and the batch
/// statistics; running statistics are left untouched (see [`BatchNormState::update_running`]).
pub fn batch_norm_train<F: Real>(
    input: &Tensor<F>,
    state: &BatchNormState<F>,
) -> Result<(Tensor<F>, BatchNormCache<F>, BatchStats<F>)> {
    let (b, c, t, p) = batch_layout("batch_norm", input.shape())?;
    state.check_channels("batch_norm", c)?;
    let (y, cache, stats) = train_forward(input.data(), b, c, t * p, state);
    check_finite(&y, "batch_norm (train)")?;
    Ok((Tensor::from_vec(input.shape(), y)?, cache, stats))
}

/// Inference-mode batch normalization using the running statistics.
pub fn batch_norm_infer<F: Real>(input: &Tensor<F>, state: &BatchNormState<F>) -> Result<Tensor<F>> {
    let (_, c, t, p) = batch_layout("batch_norm", input.shape())?;
    state.check_channels("batch_norm", c)?;
    let (scale, shift) = state.infer_affine();
    let mut out = input.clone();
    apply_affine(out.data_mut(), c, t * p, &scale, &shift);
    out.check_finite("batch_norm (infer)")?;
    Ok(out)
}

/// Batch normalization; in [`Mode::Train`] the running statistics are updated as a side effect.
pub fn batch_norm<F: Real>(input: &Tensor<F>, state: &mut BatchNormState<F>, mode: Mode) -> Result<Tensor<F>> {
    match mode {
        Mode::Train => {
            let (out, _, stats) = batch_norm_train(input, state)?;
            state.update_running(&stats);
            Ok(out)
        }
        Mode::Infer => batch_norm_infer(input, state),
    }
}

/// Gradients `(d input, d gamma, d beta)` of a training-mode batch normalization.
pub fn batch_norm_backward<F: Real>(
    grad_out: &Tensor<F>,
    cache: &BatchNormCache<F>,
    state: &BatchNormState<F>,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let (b, c, t, p) = batch_layout("batch_norm_backward", grad_out.shape())?;
    state.check_channels("batch_norm_backward", c)?;
    if cache.x_hat.len() != grad_out.len() {
        return Err(TensorError::Shape {
            op: "batch_norm_backward",
            detail: "cache does not match gradient".to_string(),
        });
    }
    let (dx, dg, db) = train_backward(grad_out.data(), cache, &state.gamma, b, c, t * p);
    check_finite(&dx, "batch_norm_backward")?;
    Ok((Tensor::from_vec(grad_out.shape(), dx)?, dg, db))
}
