//! Quick oracle checks run by `counterpoint selftest`.
//!
//! Each check is small enough to finish in well under a second in an optimised build.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::evaluation::{framewise_nll, EvalConfig};
use crate::model::toy::{oracle, two_cell, uniform};
use crate::model::{ConditionalModel, Model, ModelConfig};
use crate::ndtensor::{conv2d_same, Tensor};
use crate::pianoroll::{ContextMask, Pianoroll, Resolution};
use crate::sampling::{ancestral_sample, AnnealSchedule};
use crate::training::sample_context;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn random_roll(i_n: usize, t_n: usize, p_n: usize, rng: &mut ChaCha8Rng) -> Pianoroll {
    let cells = (0..i_n * t_n).map(|_| rng.random_range(0..p_n as u16)).collect();
    Pianoroll::from_indices(i_n, p_n, Resolution::Quarter, cells).expect("valid roll")
}

fn naive_conv(
    x: &[f64],
    w: &[f64],
    c_in: usize,
    c_out: usize,
    t_n: usize,
    p_n: usize,
    kt: usize,
    kp: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * t_n * p_n];
    for o in 0..c_out {
        for t in 0..t_n {
            for p in 0..p_n {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for a in 0..kt {
                        for b in 0..kp {
                            let (st, sp) = (
                                t as isize + a as isize - (kt / 2) as isize,
                                p as isize + b as isize - (kp / 2) as isize,
                            );
                            if st >= 0 && sp >= 0 && (st as usize) < t_n && (sp as usize) < p_n {
                                acc += w[((o * c_in + c) * kt + a) * kp + b]
                                    * x[(c * t_n + st as usize) * p_n + sp as usize];
                            }
                        }
                    }
                }
                out[(o * t_n + t) * p_n + p] = acc;
            }
        }
    }
    out
}

fn conv_oracle(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (c_in, c_out) = (rng.random_range(1..4), rng.random_range(1..4));
        let (t_n, p_n) = (rng.random_range(1..7), rng.random_range(1..7));
        let (kt, kp) = (2 * rng.random_range(0..3) + 1, 2 * rng.random_range(0..3) + 1);
        let x: Vec<f64> = (0..c_in * t_n * p_n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..c_out * c_in * kt * kp).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expected = naive_conv(&x, &w, c_in, c_out, t_n, p_n, kt, kp);
        let got = conv2d_same(
            &Tensor::from_vec(&[c_in, t_n, p_n], x).expect("shape"),
            &Tensor::from_vec(&[c_out, c_in, kt, kp], w).expect("shape"),
        )
        .expect("conv");
        for (a, b) in got.data().iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    check("convolution matches direct summation", worst < 1e-10, format!("max abs error {worst:.2e}"))
}

fn gradient(rng: &mut ChaCha8Rng) -> Check {
    let config =
        ModelConfig { num_layers: 4, num_channels: 4, instruments: 2, pitches: 5, kernel_time: 3, kernel_pitch: 3 };
    let mut model = Model::<f64>::init(config, rng).expect("valid config");
    let rolls: Vec<Pianoroll> = (0..2).map(|_| random_roll(2, 5, 5, rng)).collect();
    let masks: Vec<ContextMask> = (0..2).map(|_| sample_context(2, 5, rng).expect("strict context")).collect();
    let grads = model.loss_and_gradients(&rolls, &masks).expect("gradients");
    let analytic: Vec<Vec<f64>> = grads.gradients.slices().iter().map(|s| s.to_vec()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let k = rng.random_range(0..analytic.len());
        let j = rng.random_range(0..analytic[k].len());
        let original = model.params().trainable()[k][j];
        model.params_mut().trainable_mut()[k][j] = original + h;
        let up = model.batch_loss(&rolls, &masks).expect("loss");
        model.params_mut().trainable_mut()[k][j] = original - h;
        let down = model.batch_loss(&rolls, &masks).expect("loss");
        model.params_mut().trainable_mut()[k][j] = original;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[k][j];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    check("gradients match central differences", worst < 1e-4, format!("max relative error {worst:.2e}"))
}

fn incremental(rng: &mut ChaCha8Rng) -> Check {
    let config =
        ModelConfig { num_layers: 6, num_channels: 4, instruments: 2, pitches: 5, kernel_time: 3, kernel_pitch: 3 };
    let model = Model::<f64>::init(config, rng).expect("valid config");
    let mut roll = random_roll(2, 12, 5, rng);
    let mut mask = ContextMask::from_fn(2, 12, |_, _| rng.random_bool(0.5));
    let mut session = model.session(&roll, &mask).expect("session");
    let mut worst: f64 = 0.0;
    let mut out = vec![0.0; 5];
    for _ in 0..10 {
        let (i, t, p) = (rng.random_range(0..2), rng.random_range(0..12), rng.random_range(0..5));
        let keep = rng.random_bool(0.5);
        session.set(i, t, p, keep);
        roll.set_pitch(i, t, p);
        if keep {
            mask.insert(i, t);
        } else {
            mask.remove(i, t);
        }
        let full = model.conditionals(&roll, &mask).expect("forward");
        let (qi, qt) = (rng.random_range(0..2), rng.random_range(0..12));
        session.conditional(qi, qt, &mut out).expect("query");
        for (a, b) in out.iter().zip(full.row(qi, qt)) {
            worst = worst.max((a - b).abs());
        }
    }
    check("incremental queries match full forward passes", worst < 1e-12, format!("max abs error {worst:.2e}"))
}

fn evaluation_limits(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let roll = random_roll(4, 6, 53, rng);
    let config = EvalConfig { orderings: 3, ..EvalConfig::default() };
    let u = framewise_nll(&uniform(4, 53), &roll, &config).expect("uniform");
    let expected = 4.0 * 53f64.ln();
    let o = framewise_nll(&oracle(roll.clone()), &roll, &config).expect("oracle");
    vec![
        check(
            "uniform model scores 4 ln 53 per frame",
            (u - expected).abs() < 1e-9,
            format!("{u:.12} vs {expected:.12}"),
        ),
        check("oracle model scores zero", o == 0.0, format!("{o}")),
    ]
}

fn ancestral(rng: &mut ChaCha8Rng) -> Check {
    let (marginal, given) = ([0.3, 0.6], [[0.1, 0.8], [0.25, 0.9]]);
    let model = two_cell(marginal, given);
    let blank = Pianoroll::blank(1, 2, 2, Resolution::Quarter);
    let empty = ContextMask::empty(1, 2);
    let n = 20_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let r = ancestral_sample(&model, &blank, &empty, rng).expect("sample").roll;
        counts[r.pitch(0, 0) * 2 + r.pitch(0, 1)] += 1;
    }
    // half the orderings start at t = 0, half at t = 1
    let bern = |p: f64, v: usize| if v == 1 { p } else { 1.0 - p };
    let mut tv = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        let (a, b) = (k / 2, k % 2);
        let exact =
            0.5 * bern(marginal[0], a) * bern(given[1][a], b) + 0.5 * bern(marginal[1], b) * bern(given[0][b], a);
        tv += 0.5 * (c as f64 / n as f64 - exact).abs();
    }
    check("ancestral sampling follows the ordering mixture", tv < 0.02, format!("total variation {tv:.4}"))
}

fn anneal() -> Check {
    let s = AnnealSchedule { steps: 100, ..AnnealSchedule::for_roll(4, 32) };
    let ok = s.alpha(0) == 0.9 && s.alpha(75) == 0.05 && s.alpha(99) == 0.05 && (s.alpha(30) - 0.56).abs() < 1e-12;
    check(
        "annealing schedule endpoints",
        ok,
        format!("alpha(0) = {}, alpha(30) = {}, alpha(75) = {}", s.alpha(0), s.alpha(30), s.alpha(75)),
    )
}

/// Runs every check with randomness derived from `seed`.
pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = vec![conv_oracle(&mut rng), gradient(&mut rng), incremental(&mut rng)];
    checks.extend(evaluation_limits(&mut rng));
    checks.push(ancestral(&mut rng));
    checks.push(anneal());
    checks
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
