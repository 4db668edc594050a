//! Canonical dataset JSON ingestion.
//!
//! ```json
//! {"resolution": "quarter", "splits": {"train": [[[60, 55, 52, 48], ...], ...], "valid": [...], "test": [...]}}
//! ```
//!
//! Each piece is a list of frames; each frame lists exactly four MIDI pitches, soprano first.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Pianoroll, PianorollError, Resolution, Result, MAX_PITCH, NUM_PITCHES, NUM_VOICES, PITCH_OFFSET};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split '{other}' (train, valid, test)")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawSplits {
    train: Vec<Vec<Vec<i64>>>,
    valid: Vec<Vec<Vec<i64>>>,
    test: Vec<Vec<Vec<i64>>>,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    resolution: Resolution,
    splits: RawSplits,
}

/// Train/valid/test pianorolls sharing one resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub resolution: Resolution,
    pub train: Vec<Pianoroll>,
    pub valid: Vec<Pianoroll>,
    pub test: Vec<Pianoroll>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &[Pianoroll] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    /// Parses canonical JSON and converts every piece to `resolution`.
    pub fn from_json(json: &str, resolution: Resolution) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(json)?;
        let source = raw.resolution;
        if resolution < source {
            return Err(PianorollError::Coarsen { from: source, to: resolution });
        }
        let factor = resolution.steps_per_quarter() / source.steps_per_quarter();
        let convert = |name: SplitName, pieces: Vec<Vec<Vec<i64>>>| -> Result<Vec<Pianoroll>> {
            if pieces.is_empty() {
                return Err(PianorollError::EmptySplit(name));
            }
            pieces
                .into_iter()
                .enumerate()
                .map(|(idx, frames)| Ok(parse_piece(name, idx, &frames, source)?.dilate(factor, resolution)))
                .collect()
        };
        Ok(Dataset {
            resolution,
            train: convert(SplitName::Train, raw.splits.train)?,
            valid: convert(SplitName::Valid, raw.splits.valid)?,
            test: convert(SplitName::Test, raw.splits.test)?,
        })
    }

    /// Canonical JSON at the dataset's own resolution.
    pub fn to_json(&self) -> String {
        let encode = |rolls: &[Pianoroll]| -> Vec<Vec<Vec<i64>>> {
            rolls
                .iter()
                .map(|r| r.frames().into_iter().map(|f| f.into_iter().map(i64::from).collect()).collect())
                .collect()
        };
        let raw = RawDataset {
            resolution: self.resolution,
            splits: RawSplits { train: encode(&self.train), valid: encode(&self.valid), test: encode(&self.test) },
        };
        serde_json::to_string(&raw).expect("dataset serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|source| PianorollError::Io { path: path.display().to_string(), source })
    }
}

fn parse_piece(split: SplitName, piece: usize, frames: &[Vec<i64>], resolution: Resolution) -> Result<Pianoroll> {
    if frames.is_empty() {
        return Err(PianorollError::EmptyPiece(format!("{split} piece {piece}")));
    }
    let t = frames.len();
    let mut cells = vec![0u16; NUM_VOICES * t];
    for (time, frame) in frames.iter().enumerate() {
        let location = || format!("{split} piece {piece} frame {time}");
        if frame.len() != NUM_VOICES {
            return Err(PianorollError::FrameWidth { location: location(), expected: NUM_VOICES, found: frame.len() });
        }
        for (voice, &pitch) in frame.iter().enumerate() {
            if pitch < PITCH_OFFSET as i64 || pitch > MAX_PITCH as i64 {
                return Err(PianorollError::PitchOutOfRange { location: location(), pitch });
            }
            cells[voice * t + time] = (pitch - PITCH_OFFSET as i64) as u16;
        }
    }
    Pianoroll::from_indices(NUM_VOICES, NUM_PITCHES, resolution, cells)
}

/// Reads canonical dataset JSON from `path` at the requested resolution.
pub fn load_dataset(path: &Path, resolution: Resolution) -> Result<Dataset> {
    let json = std::fs::read_to_string(path)
        .map_err(|source| PianorollError::Io { path: path.display().to_string(), source })?;
    Dataset::from_json(&json, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(train: &str) -> String {
        format!(
            r#"{{"resolution": "quarter", "splits": {{"train": {train}, "valid": [[[60,55,52,48]]], "test": [[[62,57,53,50]]]}}}}"#
        )
    }

    #[test]
    fn quarter_piece_dilates_to_sixteenth() {
        let frames: Vec<String> = (0..16).map(|k| format!("[{}, 55, 52, 48]", 60 + k % 3)).collect();
        let json = doc(&format!("[[{}]]", frames.join(",")));
        let ds = Dataset::from_json(&json, Resolution::Sixteenth).unwrap();
        let roll = &ds.train[0];
        assert_eq!(roll.timesteps(), 64);
        assert_eq!(roll.resolution(), Resolution::Sixteenth);
        for t in 0..64 {
            assert_eq!(roll.midi_pitch(0, t), 60 + ((t / 4) % 3) as u8);
        }
    }

    #[test]
    fn rejects_bad_frames() {
        let too_high = Dataset::from_json(&doc("[[[89, 60, 55, 48]]]"), Resolution::Quarter).unwrap_err();
        assert!(too_high.to_string().contains("pitch out of range"), "{too_high}");
        let three = Dataset::from_json(&doc("[[[60, 55, 48]]]"), Resolution::Quarter).unwrap_err();
        assert!(matches!(three, PianorollError::FrameWidth { found: 3, .. }));
        let empty = Dataset::from_json(&doc("[]"), Resolution::Quarter).unwrap_err();
        assert!(matches!(empty, PianorollError::EmptySplit(SplitName::Train)));
        assert!(matches!(Dataset::from_json("{", Resolution::Quarter), Err(PianorollError::Json(_))));
    }

    #[test]
    fn refuses_to_coarsen() {
        let json = doc("[[[60,55,52,48]]]").replace("\"quarter\"", "\"sixteenth\"");
        assert!(matches!(Dataset::from_json(&json, Resolution::Quarter), Err(PianorollError::Coarsen { .. })));
    }

    #[test]
    fn serialize_then_load_is_identity() {
        let ds = Dataset::from_json(&doc("[[[60,55,52,48],[62,55,52,43]]]"), Resolution::Eighth).unwrap();
        let again = Dataset::from_json(&ds.to_json(), Resolution::Eighth).unwrap();
        assert_eq!(again, ds);
    }
}
