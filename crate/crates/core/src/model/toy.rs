//! Hand-specified conditional models used as oracles and stand-ins for the network.

use super::{CellSession, ConditionalModel, Distributions, ModelError, Result};
use crate::pianoroll::{ContextMask, Pianoroll};

/// Conditionals given by a closure `f(roll, mask, i, t, out)`.
pub struct FnModel<C> {
    instruments: usize,
    pitches: usize,
    f: C,
}

impl<C> FnModel<C>
where
    C: Fn(&Pianoroll, &ContextMask, usize, usize, &mut [f64]),
{
    pub fn new(instruments: usize, pitches: usize, f: C) -> Self {
        FnModel { instruments, pitches, f }
    }

    fn check(&self, roll: &Pianoroll, mask: &ContextMask) -> Result<()> {
        if roll.instruments() != self.instruments
            || roll.pitches() != self.pitches
            || mask.shape() != (roll.instruments(), roll.timesteps())
        {
            return Err(ModelError::Shape("roll or mask does not fit the toy model".into()));
        }
        Ok(())
    }
}

impl<C> ConditionalModel for FnModel<C>
where
    C: Fn(&Pianoroll, &ContextMask, usize, usize, &mut [f64]),
{
    fn instruments(&self) -> usize {
        self.instruments
    }

    fn pitches(&self) -> usize {
        self.pitches
    }

    fn conditionals(&self, roll: &Pianoroll, mask: &ContextMask) -> Result<Distributions> {
        self.check(roll, mask)?;
        let (i_n, t_n, p_n) = (roll.instruments(), roll.timesteps(), roll.pitches());
        let mut probs = vec![0.0; i_n * t_n * p_n];
        for (row, out) in probs.chunks_mut(p_n).enumerate() {
            (self.f)(roll, mask, row / t_n, row % t_n, out);
        }
        Ok(Distributions::from_vec(i_n, t_n, p_n, probs))
    }

    fn session<'a>(&'a self, roll: &Pianoroll, mask: &ContextMask) -> Result<Box<dyn CellSession + 'a>> {
        self.check(roll, mask)?;
        Ok(Box::new(FnSession { f: &self.f, roll: roll.clone(), mask: mask.clone() }))
    }
}

struct FnSession<'a, C> {
    f: &'a C,
    roll: Pianoroll,
    mask: ContextMask,
}

impl<C> CellSession for FnSession<'_, C>
where
    C: Fn(&Pianoroll, &ContextMask, usize, usize, &mut [f64]),
{
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
        (self.f)(&self.roll, &self.mask, instrument, time, out);
        Ok(())
    }
}

/// Uniform over pitches everywhere.
pub fn uniform(instruments: usize, pitches: usize) -> impl ConditionalModel {
    FnModel::new(instruments, pitches, move |_: &Pianoroll, _: &ContextMask, _, _, out: &mut [f64]| {
        out.fill(1.0 / pitches as f64)
    })
}

/// Puts all mass on the pitches of `truth`, whatever the context.
pub fn oracle(truth: Pianoroll) -> impl ConditionalModel {
    let (i_n, p_n) = (truth.instruments(), truth.pitches());
    FnModel::new(i_n, p_n, move |_: &Pianoroll, _: &ContextMask, i, t, out: &mut [f64]| {
        out.fill(0.0);
        out[truth.pitch(i, t)] = 1.0;
    })
}

/// Binary model on a single instrument and two timesteps, `P = 2`.
///
/// `marginal[t]` is `p(x_t = 1)` with the other cell unobserved; `given[t][v]` is
/// `p(x_t = 1 | x_{1−t} = v)`. The conditionals need not come from one joint, which is the
/// interesting case for the samplers.
pub fn two_cell(marginal: [f64; 2], given: [[f64; 2]; 2]) -> impl ConditionalModel {
    FnModel::new(1, 2, move |roll: &Pianoroll, mask: &ContextMask, _, t, out: &mut [f64]| {
        let other = 1 - t;
        let p1 = if mask.contains(0, other) { given[t][roll.pitch(0, other)] } else { marginal[t] };
        out[0] = 1.0 - p1;
        out[1] = p1;
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pianoroll::Resolution;

    #[test]
    fn two_cell_reads_the_context() {
        let model = two_cell([0.3, 0.6], [[0.1, 0.8], [0.25, 0.9]]);
        let mut roll = Pianoroll::blank(1, 2, 2, Resolution::Quarter);
        roll.set_pitch(0, 1, 1);
        let free = model.conditionals(&roll, &ContextMask::empty(1, 2)).unwrap();
        assert_eq!(free.row(0, 0), &[0.7, 0.3]);
        let seen = model.conditionals(&roll, &ContextMask::from_fn(1, 2, |_, t| t == 1)).unwrap();
        assert_eq!(seen.row(0, 0), &[0.19999999999999996, 0.8]);
        let mut session = model.session(&roll, &ContextMask::empty(1, 2)).unwrap();
        session.set(0, 1, 1, true);
        let mut out = [0.0; 2];
        session.conditional(0, 0, &mut out).unwrap();
        assert_eq!(out[1], 0.8);
    }
}
