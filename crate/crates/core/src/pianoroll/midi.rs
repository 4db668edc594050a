//! Standard MIDI File (type 1) export and re-import.
//!
//! One track per voice in storage order (soprano first), each on its own channel. Repeated
//! pitches within a voice are merged into a single held note. Track 0 additionally carries the
//! tempo. Division is [`TICKS_PER_QUARTER`] ticks per quarter note.

use std::path::Path;

use super::{Pianoroll, PianorollError, Resolution, Result, NUM_PITCHES, PITCH_OFFSET, VOICE_NAMES};

pub const TICKS_PER_QUARTER: u16 = 480;
pub const DEFAULT_TEMPO_QPM: f64 = 120.0;
const VELOCITY: u8 = 80;

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut bytes = [0u8; 5];
    let mut n = 0;
    loop {
        bytes[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for k in (0..n).rev() {
        out.push(if k > 0 { bytes[k] | 0x80 } else { bytes[k] });
    }
}

fn channel_for(voice: usize) -> u8 {
    // skip the General MIDI percussion channel
    let ch = if voice >= 9 { voice + 1 } else { voice };
    (ch % 16) as u8
}

/// Merged notes of one voice as `(pitch, start_step, end_step)`.
fn voice_notes(roll: &Pianoroll, voice: usize) -> Vec<(u8, usize, usize)> {
    let mut notes: Vec<(u8, usize, usize)> = Vec::new();
    for t in 0..roll.timesteps() {
        let pitch = roll.midi_pitch(voice, t);
        match notes.last_mut() {
            Some(last) if last.0 == pitch => last.2 = t + 1,
            _ => notes.push((pitch, t, t + 1)),
        }
    }
    notes
}

/// Encodes `roll` as a type-1 Standard MIDI File.
pub fn encode_midi(roll: &Pianoroll, tempo_qpm: f64) -> Vec<u8> {
    let ticks_per_step = TICKS_PER_QUARTER as u32 / roll.resolution().steps_per_quarter() as u32;
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(roll.instruments() as u16).to_be_bytes());
    out.extend_from_slice(&TICKS_PER_QUARTER.to_be_bytes());

    for voice in 0..roll.instruments() {
        let mut track = Vec::new();
        let name = match (roll.instruments(), VOICE_NAMES.get(voice)) {
            (4, Some(n)) => n.to_string(),
            _ => format!("voice {voice}"),
        };
        write_vlq(&mut track, 0);
        track.extend_from_slice(&[0xff, 0x03]);
        write_vlq(&mut track, name.len() as u32);
        track.extend_from_slice(name.as_bytes());
        if voice == 0 {
            let micros = (60_000_000.0 / tempo_qpm).round().clamp(1.0, 16_777_215.0) as u32;
            write_vlq(&mut track, 0);
            track.extend_from_slice(&[0xff, 0x51, 0x03]);
            track.extend_from_slice(&micros.to_be_bytes()[1..]);
        }
        let ch = channel_for(voice);
        let mut cursor = 0u32;
        for (pitch, start, end) in voice_notes(roll, voice) {
            let (on, off) = (start as u32 * ticks_per_step, end as u32 * ticks_per_step);
            write_vlq(&mut track, on - cursor);
            track.extend_from_slice(&[0x90 | ch, pitch, VELOCITY]);
            write_vlq(&mut track, off - on);
            track.extend_from_slice(&[0x80 | ch, pitch, 0]);
            cursor = off;
        }
        write_vlq(&mut track, 0);
        track.extend_from_slice(&[0xff, 0x2f, 0x00]);

        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(track.len() as u32).to_be_bytes());
        out.extend_from_slice(&track);
    }
    out
}

/// Writes `roll` to `path` as a Standard MIDI File.
pub fn to_midi(roll: &Pianoroll, path: &Path, tempo_qpm: f64) -> Result<()> {
    std::fs::write(path, encode_midi(roll, tempo_qpm))
        .map_err(|source| PianorollError::Io { path: path.display().to_string(), source })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PianorollError::Midi("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn vlq(&mut self) -> Result<u32> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.byte()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(PianorollError::Midi("variable-length quantity too long".into()))
    }

    fn u32_be(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16_be(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }
}

/// Notes of one track as `(pitch, start_tick, end_tick)`.
fn parse_track(data: &[u8]) -> Result<Vec<(u8, u32, u32)>> {
    let mut r = Reader { bytes: data, pos: 0 };
    let mut tick = 0u32;
    let mut status = 0u8;
    let mut open: [Option<u32>; 128] = [None; 128];
    let mut notes = Vec::new();
    while r.pos < data.len() {
        tick += r.vlq()?;
        let mut b = r.byte()?;
        if b < 0x80 {
            if status == 0 {
                return Err(PianorollError::Midi("running status without a status byte".into()));
            }
            r.pos -= 1;
            b = status;
        }
        match b {
            0xff => {
                let kind = r.byte()?;
                let len = r.vlq()? as usize;
                r.take(len)?;
                if kind == 0x2f {
                    break;
                }
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            _ => {
                status = b;
                let kind = b & 0xf0;
                let args = if kind == 0xc0 || kind == 0xd0 { 1 } else { 2 };
                let a = r.take(args)?;
                let on = kind == 0x90 && a[1] > 0;
                let off = kind == 0x80 || (kind == 0x90 && a[1] == 0);
                let pitch = a[0] & 0x7f;
                if on {
                    if open[pitch as usize].is_some() {
                        return Err(PianorollError::Midi(format!("pitch {pitch} retriggered while held")));
                    }
                    open[pitch as usize] = Some(tick);
                } else if off {
                    if let Some(start) = open[pitch as usize].take() {
                        notes.push((pitch, start, tick));
                    }
                }
            }
        }
    }
    if open.iter().any(|o| o.is_some()) {
        return Err(PianorollError::Midi("note left open at end of track".into()));
    }
    notes.sort_by_key(|n| n.1);
    Ok(notes)
}

/// Rebuilds a pianoroll from MIDI bytes. Every track containing notes becomes a voice and must
/// sound exactly one pitch at every step of the grid.
pub fn decode_midi(bytes: &[u8], resolution: Resolution) -> Result<Pianoroll> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"MThd" || r.u32_be()? != 6 {
        return Err(PianorollError::Midi("missing MThd header".into()));
    }
    let _format = r.u16_be()?;
    let ntracks = r.u16_be()? as usize;
    let division = r.u16_be()?;
    if division & 0x8000 != 0 || division == 0 {
        return Err(PianorollError::Midi("SMPTE time division is not supported".into()));
    }
    let steps = resolution.steps_per_quarter() as u32;
    if !(division as u32).is_multiple_of(steps) {
        return Err(PianorollError::Midi(format!("division {division} not divisible into {steps} steps")));
    }
    let ticks_per_step = division as u32 / steps;

    let mut voices = Vec::new();
    for _ in 0..ntracks {
        if r.take(4)? != b"MTrk" {
            return Err(PianorollError::Midi("missing MTrk chunk".into()));
        }
        let len = r.u32_be()? as usize;
        let notes = parse_track(r.take(len)?)?;
        if !notes.is_empty() {
            voices.push(notes);
        }
    }
    if voices.is_empty() {
        return Err(PianorollError::Midi("no notes".into()));
    }
    let total = voices.iter().flat_map(|v| v.iter().map(|n| n.2)).max().unwrap_or(0);
    if total % ticks_per_step != 0 {
        return Err(PianorollError::Midi("notes are off the step grid".into()));
    }
    let t_n = (total / ticks_per_step) as usize;
    let mut cells = vec![u16::MAX; voices.len() * t_n];
    for (voice, notes) in voices.iter().enumerate() {
        for &(pitch, start, end) in notes {
            if start % ticks_per_step != 0 || end % ticks_per_step != 0 {
                return Err(PianorollError::Midi("notes are off the step grid".into()));
            }
            if pitch < PITCH_OFFSET || (pitch - PITCH_OFFSET) as usize >= NUM_PITCHES {
                return Err(PianorollError::PitchOutOfRange {
                    location: format!("voice {voice} tick {start}"),
                    pitch: pitch as i64,
                });
            }
            for t in (start / ticks_per_step) as usize..(end / ticks_per_step) as usize {
                let cell = &mut cells[voice * t_n + t];
                if *cell != u16::MAX {
                    return Err(PianorollError::Midi(format!("voice {voice} has overlapping notes at step {t}")));
                }
                *cell = (pitch - PITCH_OFFSET) as u16;
            }
        }
    }
    if let Some(gap) = cells.iter().position(|&c| c == u16::MAX) {
        return Err(PianorollError::Midi(format!("voice {} is silent at step {}", gap / t_n, gap % t_n)));
    }
    Pianoroll::from_indices(voices.len(), NUM_PITCHES, resolution, cells)
}

/// Reads a MIDI file written by [`to_midi`] back into a pianoroll.
pub fn midi_to_roll(path: &Path, resolution: Resolution) -> Result<Pianoroll> {
    let bytes =
        std::fs::read(path).map_err(|source| PianorollError::Io { path: path.display().to_string(), source })?;
    decode_midi(&bytes, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_note_ons(bytes: &[u8]) -> usize {
        let mut r = Reader { bytes, pos: 14 };
        let mut total = 0;
        while r.pos < bytes.len() {
            r.take(4).unwrap();
            let len = r.u32_be().unwrap() as usize;
            total += parse_track(r.take(len).unwrap()).unwrap().len();
        }
        total
    }

    #[test]
    fn held_pitch_becomes_one_note() {
        let frames = [[60, 55, 52, 48]; 4];
        let roll = Pianoroll::from_frames(&frames, Resolution::Sixteenth).unwrap();
        let notes = voice_notes(&roll, 0);
        assert_eq!(notes, vec![(60, 0, 4)]);
        assert_eq!(count_note_ons(&encode_midi(&roll, 120.0)), 4);
    }

    #[test]
    fn alternating_pitches_are_separate_notes() {
        let frames = [[60, 55, 52, 48], [62, 55, 52, 48], [60, 55, 52, 48], [62, 55, 52, 48]];
        let roll = Pianoroll::from_frames(&frames, Resolution::Quarter).unwrap();
        assert_eq!(voice_notes(&roll, 0).len(), 4);
        // 4 soprano notes + one held note in each other voice
        assert_eq!(count_note_ons(&encode_midi(&roll, 120.0)), 7);
    }

    #[test]
    fn header_layout() {
        let roll = Pianoroll::from_frames(&[[60, 55, 52, 48]], Resolution::Quarter).unwrap();
        let bytes = encode_midi(&roll, 120.0);
        assert_eq!(&bytes[..4], b"MThd");
        assert_eq!(u16::from_be_bytes([bytes[8], bytes[9]]), 1);
        assert_eq!(u16::from_be_bytes([bytes[10], bytes[11]]), 4);
        assert_eq!(u16::from_be_bytes([bytes[12], bytes[13]]), TICKS_PER_QUARTER);
        // 500000 microseconds per quarter at 120 QPM
        let tempo = bytes.windows(3).position(|w| w == [0xff, 0x51, 0x03]).unwrap();
        assert_eq!(&bytes[tempo + 3..tempo + 6], &[0x07, 0xa1, 0x20]);
    }

    #[test]
    fn vlq_encoding() {
        let mut out = Vec::new();
        write_vlq(&mut out, 0x3fff);
        assert_eq!(out, vec![0xff, 0x7f]);
        let mut r = Reader { bytes: &out, pos: 0 };
        assert_eq!(r.vlq().unwrap(), 0x3fff);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let roll = Pianoroll::from_frames(&[[60, 55, 52, 48]; 3], Resolution::Quarter).unwrap();
        let bytes = encode_midi(&roll, 120.0);
        assert!(decode_midi(&bytes[..bytes.len() - 5], Resolution::Quarter).is_err());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let roll = Pianoroll::from_frames(&[[60, 55, 52, 48]], Resolution::Quarter).unwrap();
        assert!(to_midi(&roll, Path::new("/nonexistent-dir/x.mid"), 120.0).is_err());
    }
}
