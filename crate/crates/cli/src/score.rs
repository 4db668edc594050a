//! Score JSON used for sampler output and inpainting input.
//!
//! ```json
//! {"resolution": "quarter", "frames": [[60, 55, 52, 48], [62, null, 53, 47]]}
//! ```
//!
//! Frames list MIDI pitches soprano first. `null` marks a cell to be filled in; it is only
//! accepted on input.

use std::path::Path;

use anyhow::{bail, Context};
use counterpoint::pianoroll::{MAX_PITCH, NUM_PITCHES, NUM_VOICES, PITCH_OFFSET};
use counterpoint::{ContextMask, Pianoroll, Resolution};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct RawScore {
    resolution: Resolution,
    frames: Vec<Vec<Option<i64>>>,
}

/// A score with possibly unknown cells; unknown cells hold pitch index 0 in `roll`.
pub struct PartialScore {
    pub roll: Pianoroll,
    pub known: ContextMask,
}

pub fn parse(json: &str) -> anyhow::Result<PartialScore> {
    let raw: RawScore = serde_json::from_str(json).context("malformed score JSON")?;
    if raw.frames.is_empty() {
        bail!("score has no frames");
    }
    let t_n = raw.frames.len();
    let mut roll = Pianoroll::blank(NUM_VOICES, t_n, NUM_PITCHES, raw.resolution);
    let mut known = ContextMask::empty(NUM_VOICES, t_n);
    for (t, frame) in raw.frames.iter().enumerate() {
        if frame.len() != NUM_VOICES {
            bail!("frame {t}: expected {NUM_VOICES} pitches, found {}", frame.len());
        }
        for (i, cell) in frame.iter().enumerate() {
            if let Some(p) = *cell {
                if !(PITCH_OFFSET as i64..=MAX_PITCH as i64).contains(&p) {
                    bail!("frame {t}: pitch out of range ({p} not in [{PITCH_OFFSET}, {MAX_PITCH}])");
                }
                roll.set_pitch(i, t, (p - PITCH_OFFSET as i64) as usize);
                known.insert(i, t);
            }
        }
    }
    Ok(PartialScore { roll, known })
}

pub fn load(path: &Path) -> anyhow::Result<PartialScore> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}

pub fn to_json(roll: &Pianoroll) -> String {
    let frames = (0..roll.timesteps())
        .map(|t| (0..roll.instruments()).map(|i| Some(roll.midi_pitch(i, t) as i64)).collect())
        .collect();
    let raw = RawScore { resolution: roll.resolution(), frames };
    let mut s = serde_json::to_string(&raw).expect("score serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_holes() {
        let score = parse(r#"{"resolution":"quarter","frames":[[60,55,52,48],[62,null,53,47]]}"#).unwrap();
        assert_eq!(score.known.len(), 7);
        assert!(!score.known.contains(1, 1));
        assert_eq!(score.roll.midi_pitch(3, 1), 47);
        let mut full = score.roll.clone();
        full.set_pitch(1, 1, 20);
        let back = parse(&to_json(&full)).unwrap();
        assert_eq!(back.roll, full);
        assert!(back.known.is_full());
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(parse(r#"{"resolution":"quarter","frames":[[60,55,52]]}"#).is_err());
        assert!(parse(r#"{"resolution":"quarter","frames":[[60,55,52,30]]}"#).is_err());
        assert!(parse(r#"{"resolution":"quarter","frames":[]}"#).is_err());
    }
}
