//! Score representation: one pitch per voice per timestep.
//!
//! A [`Pianoroll`] is the binary `I × T × P` tensor of the model, stored compactly as one pitch
//! index per `(instrument, time)` cell so the one-hot constraint holds by construction. The
//! dense form is produced on demand by [`Pianoroll::to_one_hot`] and [`apply_mask`].

mod dataset;
mod mask;
mod midi;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndtensor::{Real, Tensor};

pub use dataset::{load_dataset, Dataset, SplitName};
pub use mask::ContextMask;
pub use midi::{decode_midi, encode_midi, midi_to_roll, to_midi, DEFAULT_TEMPO_QPM, TICKS_PER_QUARTER};

/// MIDI pitch of pitch index 0.
pub const PITCH_OFFSET: u8 = 36;
/// Highest MIDI pitch in the corpus range.
pub const MAX_PITCH: u8 = 88;
/// `MAX_PITCH - PITCH_OFFSET + 1`.
pub const NUM_PITCHES: usize = 53;
/// Soprano, alto, tenor, bass.
pub const NUM_VOICES: usize = 4;
pub const VOICE_NAMES: [&str; NUM_VOICES] = ["soprano", "alto", "tenor", "bass"];

#[derive(Debug, Error)]
pub enum PianorollError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed dataset JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{location}: expected {expected} pitches, found {found}")]
    FrameWidth { location: String, expected: usize, found: usize },
    #[error("{location}: pitch out of range ({pitch} not in [36, 88])")]
    PitchOutOfRange { location: String, pitch: i64 },
    #[error("{0} has no frames")]
    EmptyPiece(String),
    #[error("split {0} is empty")]
    EmptySplit(SplitName),
    #[error("cannot convert {from:?} data to coarser {to:?} resolution")]
    Coarsen { from: Resolution, to: Resolution },
    #[error("tensor is not one-hot over pitch at instrument {instrument}, time {time}")]
    NotOneHot { instrument: usize, time: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed MIDI: {0}")]
    Midi(String),
}

pub type Result<T> = std::result::Result<T, PianorollError>;

/// Timesteps per quarter note.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Quarter,
    Eighth,
    Sixteenth,
}

impl Resolution {
    pub fn steps_per_quarter(self) -> usize {
        match self {
            Resolution::Quarter => 1,
            Resolution::Eighth => 2,
            Resolution::Sixteenth => 4,
        }
    }

    pub fn from_steps_per_quarter(steps: usize) -> Option<Self> {
        match steps {
            1 => Some(Resolution::Quarter),
            2 => Some(Resolution::Eighth),
            4 => Some(Resolution::Sixteenth),
            _ => None,
        }
    }
}

impl std::str::FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "quarter" => Ok(Resolution::Quarter),
            "eighth" => Ok(Resolution::Eighth),
            "sixteenth" => Ok(Resolution::Sixteenth),
            other => Err(format!("unknown resolution '{other}' (quarter, eighth, sixteenth)")),
        }
    }
}

/// Binary `instruments × timesteps × pitches` score with exactly one pitch per voice and step.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pianoroll {
    instruments: usize,
    timesteps: usize,
    pitches: usize,
    pitch_offset: u8,
    resolution: Resolution,
    /// Pitch index per cell, row-major `[instrument][time]`.
    cells: Vec<u16>,
}

impl Pianoroll {
    /// Builds a roll from pitch indices laid out `[instrument][time]`.
    pub fn from_indices(instruments: usize, pitches: usize, resolution: Resolution, cells: Vec<u16>) -> Result<Self> {
        if instruments == 0 || pitches == 0 || !cells.len().is_multiple_of(instruments) {
            return Err(PianorollError::Shape(format!(
                "{} cells cannot form a roll with {instruments} instruments",
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().position(|&c| c as usize >= pitches) {
            let timesteps = cells.len() / instruments;
            return Err(PianorollError::NotOneHot { instrument: bad / timesteps, time: bad % timesteps });
        }
        Ok(Pianoroll {
            instruments,
            timesteps: cells.len() / instruments,
            pitches,
            pitch_offset: PITCH_OFFSET,
            resolution,
            cells,
        })
    }

    /// A roll with every cell at pitch index 0, used as a blank canvas for samplers.
    pub fn blank(instruments: usize, timesteps: usize, pitches: usize, resolution: Resolution) -> Self {
        Pianoroll {
            instruments,
            timesteps,
            pitches,
            pitch_offset: PITCH_OFFSET,
            resolution,
            cells: vec![0; instruments * timesteps],
        }
    }

    /// Builds a four-voice roll from MIDI frames ordered soprano to bass.
    pub fn from_frames(frames: &[[u8; NUM_VOICES]], resolution: Resolution) -> Result<Self> {
        let t = frames.len();
        let mut cells = vec![0u16; NUM_VOICES * t];
        for (time, frame) in frames.iter().enumerate() {
            for (voice, &pitch) in frame.iter().enumerate() {
                if !(PITCH_OFFSET..=MAX_PITCH).contains(&pitch) {
                    return Err(PianorollError::PitchOutOfRange {
                        location: format!("frame {time}"),
                        pitch: pitch as i64,
                    });
                }
                cells[voice * t + time] = (pitch - PITCH_OFFSET) as u16;
            }
        }
        Pianoroll::from_indices(NUM_VOICES, NUM_PITCHES, resolution, cells)
    }

    /// Parses a dense `I × T × P` binary tensor, rejecting anything that is not one-hot.
    pub fn from_one_hot(
        instruments: usize,
        timesteps: usize,
        pitches: usize,
        resolution: Resolution,
        data: &[u8],
    ) -> Result<Self> {
        if data.len() != instruments * timesteps * pitches {
            return Err(PianorollError::Shape(format!(
                "{} values for shape {instruments}x{timesteps}x{pitches}",
                data.len()
            )));
        }
        let mut cells = Vec::with_capacity(instruments * timesteps);
        for (row, chunk) in data.chunks(pitches).enumerate() {
            let (instrument, time) = (row / timesteps, row % timesteps);
            let ones: Vec<usize> = chunk.iter().enumerate().filter(|(_, &v)| v != 0).map(|(p, _)| p).collect();
            if ones.len() != 1 || chunk[ones[0]] != 1 {
                return Err(PianorollError::NotOneHot { instrument, time });
            }
            cells.push(ones[0] as u16);
        }
        Pianoroll::from_indices(instruments, pitches, resolution, cells)
    }

    pub fn instruments(&self) -> usize {
        self.instruments
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn pitches(&self) -> usize {
        self.pitches
    }

    pub fn pitch_offset(&self) -> u8 {
        self.pitch_offset
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    /// Number of `(instrument, time)` cells, `D = I·T`.
    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn cell_indices(&self) -> &[u16] {
        &self.cells
    }

    /// Pitch index sounding in voice `instrument` at `time`.
    pub fn pitch(&self, instrument: usize, time: usize) -> usize {
        self.cells[instrument * self.timesteps + time] as usize
    }

    pub fn midi_pitch(&self, instrument: usize, time: usize) -> u8 {
        self.pitch_offset + self.pitch(instrument, time) as u8
    }

    pub fn set_pitch(&mut self, instrument: usize, time: usize, pitch: usize) {
        assert!(pitch < self.pitches, "pitch index {pitch} out of range");
        self.cells[instrument * self.timesteps + time] = pitch as u16;
    }

    /// Whether entry `(i, t, p)` of the binary tensor is set.
    pub fn is_set(&self, instrument: usize, time: usize, pitch: usize) -> bool {
        self.pitch(instrument, time) == pitch
    }

    /// Dense `I·T·P` binary tensor.
    pub fn to_one_hot(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.cells.len() * self.pitches];
        for (row, &p) in self.cells.iter().enumerate() {
            out[row * self.pitches + p as usize] = 1;
        }
        out
    }

    /// MIDI pitches per frame, voice order as stored.
    pub fn frames(&self) -> Vec<Vec<u8>> {
        (0..self.timesteps).map(|t| (0..self.instruments).map(|i| self.midi_pitch(i, t)).collect()).collect()
    }

    /// Contiguous slice of timesteps `start..start + len`.
    pub fn slice_time(&self, start: usize, len: usize) -> Pianoroll {
        assert!(start + len <= self.timesteps, "time slice out of bounds");
        let mut cells = Vec::with_capacity(self.instruments * len);
        for i in 0..self.instruments {
            let row = i * self.timesteps;
            cells.extend_from_slice(&self.cells[row + start..row + start + len]);
        }
        Pianoroll { timesteps: len, cells, ..self.clone() }
    }

    /// Repeats every frame `factor` times.
    pub fn dilate(&self, factor: usize, resolution: Resolution) -> Pianoroll {
        let t = self.timesteps * factor;
        let mut cells = Vec::with_capacity(self.instruments * t);
        for i in 0..self.instruments {
            for time in 0..self.timesteps {
                let v = self.cells[i * self.timesteps + time];
                cells.extend(std::iter::repeat_n(v, factor));
            }
        }
        Pianoroll { timesteps: t, cells, resolution, ..self.clone() }
    }

    /// Copies the values of the cells in `mask` from `other`.
    pub fn copy_cells_from(&mut self, other: &Pianoroll, mask: &ContextMask) {
        for (i, t) in mask.iter() {
            self.set_pitch(i, t, other.pitch(i, t));
        }
    }
}

/// Outcome of [`random_crop`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Crop {
    pub roll: Pianoroll,
    /// The piece was shorter than the requested length and is returned whole.
    pub short: bool,
    pub start: usize,
}

/// Uniformly placed contiguous window of `length` timesteps.
pub fn random_crop<R: Rng + ?Sized>(roll: &Pianoroll, length: usize, rng: &mut R) -> Crop {
    assert!(length >= 1, "crop length must be positive");
    if roll.timesteps() < length {
        return Crop { roll: roll.clone(), short: true, start: 0 };
    }
    let start = rng.random_range(0..=roll.timesteps() - length);
    Crop { roll: roll.slice_time(start, length), short: false, start }
}

/// Masked network input `h⁰` of shape `[2I, T, P]`.
///
/// Channels `0..I` hold the roll zeroed outside the context; channels `I..2I` hold the context
/// indicator broadcast across pitch.
pub fn apply_mask<F: Real>(roll: &Pianoroll, mask: &ContextMask) -> Tensor<F> {
    let (i_n, t_n, p_n) = (roll.instruments(), roll.timesteps(), roll.pitches());
    let mut data = vec![F::zero(); 2 * i_n * t_n * p_n];
    write_masked_input(roll, mask, &mut data);
    Tensor::from_vec(&[2 * i_n, t_n, p_n], data).expect("shape computed from roll")
}

/// Writes `h⁰` into a zeroed buffer of length `2·I·T·P`.
pub(crate) fn write_masked_input<F: Real>(roll: &Pianoroll, mask: &ContextMask, out: &mut [F]) {
    let (i_n, t_n, p_n) = (roll.instruments(), roll.timesteps(), roll.pitches());
    assert_eq!(mask.shape(), (i_n, t_n), "mask shape does not match roll");
    assert_eq!(out.len(), 2 * i_n * t_n * p_n);
    for (i, t) in mask.iter() {
        out[(i * t_n + t) * p_n + roll.pitch(i, t)] = F::one();
        let row = ((i_n + i) * t_n + t) * p_n;
        out[row..row + p_n].fill(F::one());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roll_from(frames: &[[u8; 4]]) -> Pianoroll {
        Pianoroll::from_frames(frames, Resolution::Quarter).unwrap()
    }

    #[test]
    fn frame_maps_to_offset_indices() {
        let roll = roll_from(&[[60, 55, 52, 48]]);
        let idx: Vec<usize> = (0..4).map(|i| roll.pitch(i, 0)).collect();
        assert_eq!(idx, vec![24, 19, 16, 12]);
        let hot = roll.to_one_hot();
        assert_eq!(hot.iter().map(|&v| v as usize).sum::<usize>(), 4);
        assert_eq!(hot[24], 1);
        assert_eq!(hot[NUM_PITCHES + 19], 1);
    }

    #[test]
    fn out_of_range_pitch_is_rejected() {
        let err = Pianoroll::from_frames(&[[89, 60, 55, 48]], Resolution::Quarter).unwrap_err();
        assert!(err.to_string().contains("pitch out of range"));
    }

    #[test]
    fn one_hot_round_trip_and_rejection() {
        let roll = roll_from(&[[60, 55, 52, 48], [62, 57, 53, 41]]);
        let dense = roll.to_one_hot();
        let back = Pianoroll::from_one_hot(4, 2, NUM_PITCHES, Resolution::Quarter, &dense).unwrap();
        assert_eq!(back, roll);
        let mut broken = dense.clone();
        broken[0] = 1; // second hot entry in row (0, 0)
        assert!(matches!(
            Pianoroll::from_one_hot(4, 2, NUM_PITCHES, Resolution::Quarter, &broken),
            Err(PianorollError::NotOneHot { instrument: 0, time: 0 })
        ));
    }

    #[test]
    fn crop_of_exact_length_is_identity() {
        let roll = Pianoroll::blank(4, 128, NUM_PITCHES, Resolution::Sixteenth);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let crop = random_crop(&roll, 128, &mut rng);
        assert_eq!(crop.roll, roll);
        assert!(!crop.short);
    }

    #[test]
    fn short_piece_is_flagged() {
        let roll = Pianoroll::blank(4, 64, NUM_PITCHES, Resolution::Sixteenth);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let crop = random_crop(&roll, 128, &mut rng);
        assert!(crop.short);
        assert_eq!(crop.roll, roll);
    }

    #[test]
    fn crop_start_is_uniform() {
        // 73 possible starts; chi-square with 72 dof, critical value at p = 0.01 is 102.8
        let cells: Vec<u16> = (0..200).map(|t| (t % NUM_PITCHES) as u16).collect();
        let roll = Pianoroll::from_indices(1, NUM_PITCHES, Resolution::Sixteenth, cells).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 73];
        let draws = 10_000;
        for _ in 0..draws {
            let crop = random_crop(&roll, 128, &mut rng);
            assert_eq!(crop.roll.pitch(0, 0), crop.start % NUM_PITCHES);
            counts[crop.start] += 1;
        }
        let expected = draws as f64 / 73.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 102.8, "chi2 = {chi2}");
    }

    #[test]
    fn masked_input_channels() {
        let roll = roll_from(&[[60, 55, 52, 48]; 8]);
        let empty = apply_mask::<f64>(&roll, &ContextMask::empty(4, 8));
        assert!(empty.data().iter().all(|&v| v == 0.0));

        let full = apply_mask::<f64>(&roll, &ContextMask::full(4, 8));
        let half = 4 * 8 * NUM_PITCHES;
        let dense: Vec<f64> = roll.to_one_hot().iter().map(|&v| v as f64).collect();
        assert_eq!(&full.data()[..half], dense.as_slice());
        assert!(full.data()[half..].iter().all(|&v| v == 1.0));

        let mut one = ContextMask::empty(4, 8);
        one.insert(2, 5);
        let h = apply_mask::<f64>(&roll, &one);
        let at = |c: usize, t: usize, p: usize| h.data()[(c * 8 + t) * NUM_PITCHES + p];
        for t in 0..8 {
            for p in 0..NUM_PITCHES {
                let expect_data = if t == 5 && p == 16 { 1.0 } else { 0.0 };
                assert_eq!(at(2, t, p), expect_data);
                assert_eq!(at(6, t, p), if t == 5 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dilation_repeats_frames() {
        let frames: Vec<[u8; 4]> = (0..16).map(|k| [60 + (k % 5) as u8, 55, 52, 48]).collect();
        let roll = roll_from(&frames);
        let fine = roll.dilate(4, Resolution::Sixteenth);
        assert_eq!(fine.timesteps(), 64);
        for t in 0..64 {
            assert_eq!(fine.pitch(0, t), roll.pitch(0, t / 4));
        }
    }
}
