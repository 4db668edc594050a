//! Training-mode forward pass over a batch and its hand-written backward pass.

use super::{Model, ModelError, Result};
use crate::ndtensor::{
    check_finite, conv_rows_accumulate_grads, conv_rows_forward, conv_rows_input_grad, cross_entropy_with_logits,
    train_backward, train_forward, BatchNormCache, BatchStats, Real, Tensor,
};
use crate::pianoroll::{write_masked_input, ContextMask, Pianoroll};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients<F> {
    pub kernels: Vec<F>,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

/// Gradients of the loss with respect to every trainable parameter, layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F> {
    pub layers: Vec<LayerGradients<F>>,
}

impl<F: Real> Gradients<F> {
    /// Same order as [`super::ModelParameters::trainable_mut`].
    pub fn slices(&self) -> Vec<&[F]> {
        self.layers.iter().flat_map(|l| [&l.kernels[..], &l.gamma[..], &l.beta[..]]).collect()
    }
}

pub struct LossOutput<F> {
    /// Batch mean of the per-example losses.
    pub loss: f64,
    /// `(1/|¬C|) Σ_{(i,t)∉C} −log p(x_{i,t} | x_C, C)` per example.
    pub per_example: Vec<f64>,
    pub gradients: Gradients<F>,
    /// Batch statistics of every layer, for refreshing the running averages.
    pub batch_stats: Vec<BatchStats<F>>,
}

struct Trace<F> {
    inputs: Vec<F>,
    hidden: Vec<Vec<F>>,
    caches: Vec<BatchNormCache<F>>,
    stats: Vec<BatchStats<F>>,
    logits: Vec<F>,
}

impl<F: Real> Model<F> {
    fn check_batch(&self, rolls: &[Pianoroll], masks: &[ContextMask]) -> Result<usize> {
        if rolls.is_empty() || rolls.len() != masks.len() {
            return Err(ModelError::Shape(format!("{} rolls with {} masks", rolls.len(), masks.len())));
        }
        let t_len = rolls[0].timesteps();
        for (roll, mask) in rolls.iter().zip(masks) {
            self.check_roll(roll, mask)?;
            if roll.timesteps() != t_len {
                return Err(ModelError::Shape("rolls in a batch must share their length".into()));
            }
            if mask.is_full() {
                return Err(ModelError::Shape("context covers every cell, nothing to predict".into()));
            }
        }
        Ok(t_len)
    }

    fn forward_train(&self, rolls: &[Pianoroll], masks: &[ContextMask]) -> Result<Trace<F>> {
        let t_len = self.check_batch(rolls, masks)?;
        let c = &self.config;
        let (b, p_len) = (rolls.len(), c.pitches);
        let plane = t_len * p_len;
        let mut inputs = vec![F::zero(); b * 2 * c.instruments * plane];
        for ((roll, mask), chunk) in rolls.iter().zip(masks).zip(inputs.chunks_mut(2 * c.instruments * plane)) {
            write_masked_input(roll, mask, chunk);
        }
        let mut hidden: Vec<Vec<F>> = Vec::with_capacity(c.num_layers - 1);
        let mut caches = Vec::with_capacity(c.num_layers);
        let mut stats = Vec::with_capacity(c.num_layers);
        let mut scratch = Vec::new();
        let mut logits = Vec::new();
        for l in 1..=c.num_layers {
            let shape = c.layer_shape(l);
            let layer = &self.params.layers[l - 1];
            let prev: &[F] = if l == 1 { &inputs } else { &hidden[l - 2] };
            let mut pre = vec![F::zero(); b * shape.c_out * plane];
            for (x, out) in prev.chunks(shape.c_in * plane).zip(pre.chunks_mut(shape.c_out * plane)) {
                conv_rows_forward(x, layer.kernels.data(), shape, t_len, p_len, 0, t_len, out, &mut scratch);
            }
            let (mut y, cache, st) = train_forward(&pre, b, shape.c_out, plane, &layer.norm);
            if c.has_skip(l) {
                for (v, &h) in y.iter_mut().zip(&hidden[l - 3]) {
                    *v += h;
                }
            }
            check_finite(&y, format!("layer {l} forward"))?;
            caches.push(cache);
            stats.push(st);
            if l < c.num_layers {
                for v in y.iter_mut() {
                    *v = v.max(F::zero());
                }
                hidden.push(y);
            } else {
                logits = y;
            }
        }
        Ok(Trace { inputs, hidden, caches, stats, logits })
    }

    /// Per-example scaled losses and their logit gradients (already divided by the batch size).
    fn head(&self, rolls: &[Pianoroll], masks: &[ContextMask], logits: &[F]) -> Result<(Vec<f64>, Vec<F>)> {
        let p_len = self.config.pitches;
        let per = logits.len() / rolls.len();
        let b = rolls.len() as f64;
        let mut losses = Vec::with_capacity(rolls.len());
        let mut grad = Vec::with_capacity(logits.len());
        for ((roll, mask), chunk) in rolls.iter().zip(masks).zip(logits.chunks(per)) {
            let t_len = roll.timesteps();
            let scale = 1.0 / (mask.capacity() - mask.len()) as f64;
            let mut targets = Vec::with_capacity(roll.cell_count());
            let mut weights = Vec::with_capacity(roll.cell_count());
            for i in 0..roll.instruments() {
                for t in 0..t_len {
                    targets.push(roll.pitch(i, t));
                    weights.push(if mask.contains(i, t) { 0.0 } else { scale });
                }
            }
            let tensor = Tensor::from_vec(&[roll.cell_count(), p_len], chunk.to_vec())?;
            let (loss, g) = cross_entropy_with_logits(&tensor, &targets, &weights)?;
            losses.push(loss);
            grad.extend(g.into_data().into_iter().map(|v| v / F::from_f64_lossy(b)));
        }
        Ok((losses, grad))
    }

    /// Batch loss in training mode (batch statistics), without gradients.
    pub fn batch_loss(&self, rolls: &[Pianoroll], masks: &[ContextMask]) -> Result<f64> {
        let trace = self.forward_train(rolls, masks)?;
        let (losses, _) = self.head(rolls, masks, &trace.logits)?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    /// Training-mode loss of a batch with one context per example, plus exact gradients.
    ///
    /// Running statistics are not touched; pass `batch_stats` to
    /// [`Model::update_running_stats`] to refresh them.
    pub fn loss_and_gradients(&self, rolls: &[Pianoroll], masks: &[ContextMask]) -> Result<LossOutput<F>> {
        let trace = self.forward_train(rolls, masks)?;
        let (per_example, grad_logits) = self.head(rolls, masks, &trace.logits)?;
        let c = &self.config;
        let b = rolls.len();
        let t_len = rolls[0].timesteps();
        let p_len = c.pitches;
        let plane = t_len * p_len;

        let mut pending: Vec<Vec<F>> = trace.hidden.iter().map(|h| vec![F::zero(); h.len()]).collect();
        let mut layers = Vec::with_capacity(c.num_layers);
        let mut scratch = Vec::new();
        let mut g_top = Some(grad_logits);
        for l in (1..=c.num_layers).rev() {
            let shape = c.layer_shape(l);
            let layer = &self.params.layers[l - 1];
            let g_z = if l == c.num_layers {
                g_top.take().expect("logit gradient")
            } else {
                let mut g = std::mem::take(&mut pending[l - 1]);
                for (v, &h) in g.iter_mut().zip(&trace.hidden[l - 1]) {
                    if h <= F::zero() {
                        *v = F::zero();
                    }
                }
                g
            };
            if c.has_skip(l) {
                for (acc, &v) in pending[l - 3].iter_mut().zip(&g_z) {
                    *acc += v;
                }
            }
            let (g_pre, gamma, beta) =
                train_backward(&g_z, &trace.caches[l - 1], &layer.norm.gamma, b, shape.c_out, plane);
            let mut kernels = vec![F::zero(); shape.kernel_len()];
            let prev: &[F] = if l == 1 { &trace.inputs } else { &trace.hidden[l - 2] };
            for e in 0..b {
                let x = &prev[e * shape.c_in * plane..(e + 1) * shape.c_in * plane];
                let g = &g_pre[e * shape.c_out * plane..(e + 1) * shape.c_out * plane];
                conv_rows_accumulate_grads(x, g, shape, t_len, p_len, &mut kernels, &mut scratch);
                if l > 1 {
                    let gx = &mut pending[l - 2][e * shape.c_in * plane..(e + 1) * shape.c_in * plane];
                    conv_rows_input_grad(layer.kernels.data(), g, shape, t_len, p_len, gx, &mut scratch);
                }
            }
            check_finite(&kernels, format!("layer {l} kernel gradient"))?;
            check_finite(&gamma, format!("layer {l} scale gradient"))?;
            check_finite(&beta, format!("layer {l} shift gradient"))?;
            layers.push(LayerGradients { kernels, gamma, beta });
        }
        layers.reverse();
        Ok(LossOutput {
            loss: per_example.iter().sum::<f64>() / b as f64,
            per_example,
            gradients: Gradients { layers },
            batch_stats: trace.stats,
        })
    }

    /// `running ← momentum · running + (1 − momentum) · batch` for every layer.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<F>]) {
        for (layer, st) in self.params.layers.iter_mut().zip(stats) {
            layer.norm.update_running(st);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConditionalModel, ModelConfig};
    use crate::pianoroll::Resolution;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(rng: &mut ChaCha8Rng, b: usize, i_n: usize, t_n: usize, p_n: usize) -> (Vec<Pianoroll>, Vec<ContextMask>) {
        let rolls = (0..b)
            .map(|_| {
                let cells = (0..i_n * t_n).map(|_| rng.random_range(0..p_n as u16)).collect();
                Pianoroll::from_indices(i_n, p_n, Resolution::Quarter, cells).unwrap()
            })
            .collect();
        let masks = (0..b)
            .map(|_| loop {
                let m = ContextMask::from_fn(i_n, t_n, |_, _| rng.random_bool(0.4));
                if !m.is_full() {
                    break m;
                }
            })
            .collect();
        (rolls, masks)
    }

    #[test]
    fn zero_kernels_give_uniform_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = ModelConfig {
            num_layers: 4,
            num_channels: 3,
            instruments: 2,
            pitches: 53,
            kernel_time: 3,
            kernel_pitch: 3,
        };
        let mut model = Model::<f64>::init(config, &mut rng).unwrap();
        for layer in &mut model.params_mut().layers {
            layer.kernels.data_mut().fill(0.0);
        }
        let (rolls, _) = batch(&mut rng, 1, 2, 8, 53);
        for ctx in [1usize, 8, 15] {
            let mask = ContextMask::from_fn(2, 8, |i, t| i * 8 + t < ctx);
            let out = model.loss_and_gradients(&rolls, &[mask]).unwrap();
            assert!((out.loss - 53f64.ln()).abs() < 1e-12, "|C| = {ctx}: {}", out.loss);
        }
    }

    #[test]
    fn full_context_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config =
            ModelConfig { num_layers: 2, num_channels: 2, instruments: 1, pitches: 3, kernel_time: 3, kernel_pitch: 3 };
        let model = Model::<f64>::init(config, &mut rng).unwrap();
        let (rolls, _) = batch(&mut rng, 1, 1, 4, 3);
        assert!(model.loss_and_gradients(&rolls, &[ContextMask::full(1, 4)]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let config =
            ModelConfig { num_layers: 6, num_channels: 3, instruments: 2, pitches: 4, kernel_time: 3, kernel_pitch: 3 };
        let model = Model::<f64>::init(config, &mut rng).unwrap();
        let (rolls, masks) = batch(&mut rng, 3, 2, 5, 4);
        let out = model.loss_and_gradients(&rolls, &masks).unwrap();
        let analytic: Vec<f64> = out.gradients.slices().concat();
        let h = 1e-5;
        let total = analytic.len();
        for k in (0..total).step_by(7) {
            let mut probe = model.clone();
            let bump = |m: &mut Model<f64>, delta: f64| {
                let mut seen = 0;
                for s in m.params_mut().trainable_mut() {
                    if k < seen + s.len() {
                        s[k - seen] += delta;
                        return;
                    }
                    seen += s.len();
                }
            };
            bump(&mut probe, h);
            let up = probe.batch_loss(&rolls, &masks).unwrap();
            bump(&mut probe, -2.0 * h);
            let down = probe.batch_loss(&rolls, &masks).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "coordinate {k}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn batch_loss_in_train_mode_differs_from_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config =
            ModelConfig { num_layers: 4, num_channels: 3, instruments: 1, pitches: 3, kernel_time: 3, kernel_pitch: 3 };
        let mut model = Model::<f64>::init(config, &mut rng).unwrap();
        let (rolls, masks) = batch(&mut rng, 2, 1, 6, 3);
        let before = model.params().clone();
        let out = model.loss_and_gradients(&rolls, &masks).unwrap();
        assert_eq!(model.params(), &before);
        model.update_running_stats(&out.batch_stats);
        assert_ne!(model.params().layers[0].norm.running_mean, before.layers[0].norm.running_mean);
        let nll = model.masked_nll(&rolls[0], &masks[0]).unwrap();
        assert!(nll.is_finite() && nll > 0.0);
        let _ = model.conditionals(&rolls[0], &masks[0]).unwrap();
    }
}
