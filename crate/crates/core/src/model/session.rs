//! Inference with lazily recomputed activations.
//!
//! Every hidden activation row `(layer, time)` is cached with a validity flag. Changing one input
//! cell at time `t` only invalidates rows within the receptive field of `t`; a query for cell
//! `(i, t)` only recomputes invalid rows inside the cone that can reach the output at `t`. This
//! makes the one-cell-at-a-time loops of ancestral sampling and framewise evaluation much
//! cheaper than a full forward pass per query, with identical results.

use std::ops::Range;

use super::{CellSession, Model, Result};
use crate::ndtensor::{conv_rows_forward, log_softmax_row, Real};
use crate::pianoroll::{write_masked_input, ContextMask, Pianoroll};

pub(super) struct Engine<'a, F> {
    model: &'a Model<F>,
    t_len: usize,
    p_len: usize,
    input: Vec<F>,
    /// Post-activation `h^l` for hidden layers `1..L`, each `H × T × P`.
    acts: Vec<Vec<F>>,
    valid: Vec<Vec<bool>>,
    affine: Vec<(Vec<F>, Vec<F>)>,
    logits: Vec<F>,
    scratch: Vec<F>,
    logp: Vec<f64>,
}

impl<'a, F: Real> Engine<'a, F> {
    pub(super) fn new(model: &'a Model<F>, input: Vec<F>, t_len: usize) -> Self {
        let c = &model.config;
        let p_len = c.pitches;
        debug_assert_eq!(input.len(), 2 * c.instruments * t_len * p_len);
        let hidden = c.num_layers - 1;
        Engine {
            model,
            t_len,
            p_len,
            input,
            acts: vec![vec![F::zero(); c.num_channels * t_len * p_len]; hidden],
            valid: vec![vec![false; t_len]; hidden],
            affine: model.params.layers.iter().map(|l| l.norm.infer_affine()).collect(),
            logits: vec![F::zero(); c.instruments * t_len * p_len],
            scratch: Vec::new(),
            logp: vec![0.0; p_len],
        }
    }

    fn radius(&self) -> usize {
        self.model.config.kernel_time / 2
    }

    /// Marks every activation that depends on input time `t` as stale.
    pub(super) fn invalidate_time(&mut self, t: usize) {
        let r = self.radius();
        for (idx, valid) in self.valid.iter_mut().enumerate() {
            let reach = (idx + 1) * r;
            let lo = t.saturating_sub(reach);
            let hi = (t + reach + 1).min(self.t_len);
            valid[lo..hi].fill(false);
        }
    }

    pub(super) fn input_mut(&mut self) -> &mut [F] {
        &mut self.input
    }

    /// Makes every hidden row needed for output rows `target` valid.
    fn ensure(&mut self, target: Range<usize>) -> Result<()> {
        let layers = self.model.config.num_layers;
        let r = self.radius();
        for l in 1..layers {
            let reach = (layers - l) * r;
            let lo = target.start.saturating_sub(reach);
            let hi = (target.end + reach).min(self.t_len);
            let mut t = lo;
            while t < hi {
                if self.valid[l - 1][t] {
                    t += 1;
                    continue;
                }
                let start = t;
                while t < hi && !self.valid[l - 1][t] {
                    t += 1;
                }
                self.compute_hidden(l, start, t);
            }
        }
        Ok(())
    }

    fn compute_hidden(&mut self, l: usize, t0: usize, t1: usize) {
        let config = &self.model.config;
        let shape = config.layer_shape(l);
        let skip = config.has_skip(l);
        let kernels = self.model.params.layers[l - 1].kernels.data();
        let (t_len, p_len) = (self.t_len, self.p_len);
        let (below, rest) = self.acts.split_at_mut(l - 1);
        let out = &mut rest[0];
        let prev: &[F] = if l == 1 { &self.input } else { &below[l - 2] };
        conv_rows_forward(prev, kernels, shape, t_len, p_len, t0, t1, out, &mut self.scratch);
        let (scale, shift) = &self.affine[l - 1];
        let plane = t_len * p_len;
        let span = t0 * p_len..t1 * p_len;
        for c in 0..shape.c_out {
            let (s, b) = (scale[c], shift[c]);
            let rows = &mut out[c * plane + span.start..c * plane + span.end];
            if skip {
                let residual = &below[l - 3][c * plane + span.start..c * plane + span.end];
                for (v, &h) in rows.iter_mut().zip(residual) {
                    *v = (s * *v + b + h).max(F::zero());
                }
            } else {
                for v in rows.iter_mut() {
                    *v = (s * *v + b).max(F::zero());
                }
            }
        }
        self.valid[l - 1][t0..t1].fill(true);
    }

    /// Final-layer pre-softmax values for rows `t0..t1`, all instruments.
    fn compute_logits(&mut self, t0: usize, t1: usize) -> Result<()> {
        self.ensure(t0..t1)?;
        let config = &self.model.config;
        let l = config.num_layers;
        let shape = config.layer_shape(l);
        let prev: &[F] = if l == 1 { &self.input } else { &self.acts[l - 2] };
        let kernels = self.model.params.layers[l - 1].kernels.data();
        conv_rows_forward(prev, kernels, shape, self.t_len, self.p_len, t0, t1, &mut self.logits, &mut self.scratch);
        let (scale, shift) = &self.affine[l - 1];
        let plane = self.t_len * self.p_len;
        for c in 0..shape.c_out {
            let rows = &mut self.logits[c * plane + t0 * self.p_len..c * plane + t1 * self.p_len];
            for v in rows.iter_mut() {
                *v = scale[c] * *v + shift[c];
            }
        }
        Ok(())
    }

    pub(super) fn cell(&mut self, instrument: usize, time: usize, out: &mut [f64]) -> Result<()> {
        self.compute_logits(time, time + 1)?;
        let start = (instrument * self.t_len + time) * self.p_len;
        let row = &self.logits[start..start + self.p_len];
        crate::ndtensor::check_finite(row, "model output")?;
        log_softmax_row(row, out);
        for v in out.iter_mut() {
            *v = v.exp();
        }
        Ok(())
    }

    pub(super) fn all(&mut self) -> Result<Vec<f64>> {
        self.compute_logits(0, self.t_len)?;
        crate::ndtensor::check_finite(&self.logits, "model output")?;
        let mut out = vec![0.0; self.logits.len()];
        for (src, dst) in self.logits.chunks(self.p_len).zip(out.chunks_mut(self.p_len)) {
            log_softmax_row(src, &mut self.logp);
            for (d, lp) in dst.iter_mut().zip(&self.logp) {
                *d = lp.exp();
            }
        }
        Ok(out)
    }
}

/// [`CellSession`] backed by the network.
pub struct NetworkSession<'a, F> {
    engine: Engine<'a, F>,
    roll: Pianoroll,
    mask: ContextMask,
}

impl<'a, F: Real> NetworkSession<'a, F> {
    pub(super) fn new(model: &'a Model<F>, roll: &Pianoroll, mask: &ContextMask) -> Result<Self> {
        let mut input = vec![F::zero(); 2 * roll.cell_count() * roll.pitches()];
        write_masked_input(roll, mask, &mut input);
        Ok(NetworkSession {
            engine: Engine::new(model, input, roll.timesteps()),
            roll: roll.clone(),
            mask: mask.clone(),
        })
    }

    /// Session over a raw masked input; the roll view is blank and must not be relied on.
    pub(super) fn from_input(model: &'a Model<F>, input: &[F], t_len: usize) -> Result<Self> {
        let c = &model.config;
        Ok(NetworkSession {
            engine: Engine::new(model, input.to_vec(), t_len),
            roll: Pianoroll::blank(c.instruments, t_len, c.pitches, crate::pianoroll::Resolution::Quarter),
            mask: ContextMask::empty(c.instruments, t_len),
        })
    }

    /// Probabilities for every cell, `I × T × P`.
    pub fn all_conditionals(&mut self) -> Result<Vec<f64>> {
        self.engine.all()
    }
}

impl<F: Real> CellSession for NetworkSession<'_, F> {
    fn roll(&self) -> &Pianoroll {
        &self.roll
    }

    fn mask(&self) -> &ContextMask {
        &self.mask
    }

    fn set(&mut self, instrument: usize, time: usize, pitch: usize, in_context: bool) {
        let was_in = self.mask.contains(instrument, time);
        let old = self.roll.pitch(instrument, time);
        self.roll.set_pitch(instrument, time, pitch);
        if in_context {
            self.mask.insert(instrument, time);
        } else {
            self.mask.remove(instrument, time);
        }
        if was_in == in_context && (!in_context || old == pitch) {
            return;
        }
        let (i_n, t_n, p_n) = (self.roll.instruments(), self.roll.timesteps(), self.roll.pitches());
        let input = self.engine.input_mut();
        let value_row = (instrument * t_n + time) * p_n;
        input[value_row..value_row + p_n].fill(F::zero());
        let mask_row = ((i_n + instrument) * t_n + time) * p_n;
        if in_context {
            input[value_row + pitch] = F::one();
            input[mask_row..mask_row + p_n].fill(F::one());
        } else {
            input[mask_row..mask_row + p_n].fill(F::zero());
        }
        self.engine.invalidate_time(time);
    }

    fn conditional(&mut self, instrument: usize, time: usize, out: &mut [f64]) -> Result<()> {
        self.engine.cell(instrument, time, out)
    }
}
