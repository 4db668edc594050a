//! Mask mini-language for inpainting.
//!
//! A spec is a comma-separated union of terms:
//!
//! * `voice:<name|index>` fixes one voice (`soprano`, `alto`, `tenor`, `bass` or `0..3`),
//! * `frames:<a>-<b>` fixes every voice over frames `a..=b`,
//! * `every:<k>` fixes every voice on frames `0, k, 2k, ...`,
//! * `all` and `none`.

use counterpoint::pianoroll::VOICE_NAMES;
use counterpoint::ContextMask;

pub fn voice_index(name: &str) -> Result<usize, String> {
    if let Some(i) = VOICE_NAMES.iter().position(|v| *v == name) {
        return Ok(i);
    }
    match name.parse::<usize>() {
        Ok(i) if i < VOICE_NAMES.len() => Ok(i),
        _ => Err(format!("unknown voice '{name}' (soprano, alto, tenor, bass or 0-3)")),
    }
}

fn term(instruments: usize, timesteps: usize, term: &str) -> Result<ContextMask, String> {
    let term = term.trim();
    match term {
        "all" => return Ok(ContextMask::full(instruments, timesteps)),
        "none" | "" => return Ok(ContextMask::empty(instruments, timesteps)),
        _ => {}
    }
    let (kind, arg) = term.split_once(':').ok_or_else(|| format!("mask term '{term}' has no ':'"))?;
    match kind {
        "voice" => {
            let v = voice_index(arg)?;
            if v >= instruments {
                return Err(format!("voice {v} out of range for {instruments} voices"));
            }
            Ok(ContextMask::voice(instruments, timesteps, v))
        }
        "frames" => {
            let (a, b) = arg.split_once('-').ok_or_else(|| format!("frames term '{arg}' must look like a-b"))?;
            let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("bad frame index '{s}'"));
            let (a, b) = (parse(a)?, parse(b)?);
            if a > b || b >= timesteps {
                return Err(format!("frame range {a}-{b} outside 0-{}", timesteps.saturating_sub(1)));
            }
            Ok(ContextMask::frames(instruments, timesteps, a..b + 1))
        }
        "every" => {
            let k = arg.parse::<usize>().map_err(|_| format!("bad stride '{arg}'"))?;
            if k == 0 {
                return Err("every:k needs k >= 1".into());
            }
            Ok(ContextMask::every(instruments, timesteps, k))
        }
        other => Err(format!("unknown mask term '{other}' (voice, frames, every, all, none)")),
    }
}

/// Union of all terms in `spec`.
pub fn parse(spec: &str, instruments: usize, timesteps: usize) -> Result<ContextMask, String> {
    let mut mask = ContextMask::empty(instruments, timesteps);
    for t in spec.split(',') {
        mask = mask.union(&term(instruments, timesteps, t)?);
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn union_of_terms() {
        let m = parse("voice:soprano,frames:2-3", 4, 6).unwrap();
        assert_eq!(m.len(), 6 + 2 * 3);
        assert!(m.contains(0, 5) && m.contains(3, 2) && !m.contains(3, 4));
        let e = parse("every:2", 4, 5).unwrap();
        assert!(e.contains(1, 0) && e.contains(1, 4) && !e.contains(1, 3));
        assert!(parse("all", 4, 3).unwrap().is_full());
        assert!(parse("voice:3", 4, 3).unwrap().contains(3, 0));
    }

    #[test]
    fn rejects_bad_terms() {
        for bad in ["voice:viola", "frames:3-1", "frames:0-9", "every:0", "beats:1", "voice"] {
            assert!(parse(bad, 4, 6).is_err(), "{bad}");
        }
    }
}
