use super::AudioBuffer;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_DB: f64 = 60.0;
pub const TRIM_FRAME: usize = 2048;
pub const TRIM_HOP: usize = 512;

/// Removes leading and trailing silence.
///
/// The reference level is the loudest 2048-sample frame (hop 512, zero
/// padded at the end, RMS over the full frame length). Boundaries are then
/// placed at hop resolution: the kept region runs from the first to the last
/// hop-aligned 512-sample segment whose RMS is within `top_db` of that
/// reference. Interior samples are never touched. A fully silent buffer
/// comes back empty.
///
/// Trimming never raises the reference level and keeps the segment grid
/// aligned, so applying it twice gives the same result as once.
pub fn trim_silence(audio: &AudioBuffer, top_db: f64) -> Result<AudioBuffer> {
    if top_db.is_nan() || top_db <= 0.0 {
        return Err(Error::usage(format!(
            "top_db must be positive, got {top_db}"
        )));
    }
    let x = audio.samples();
    let n = x.len();
    let empty = AudioBuffer::from_trusted(Vec::new(), audio.sample_rate());
    if n == 0 {
        return Ok(empty);
    }
    let n_frames = if n <= TRIM_FRAME {
        1
    } else {
        1 + (n - TRIM_FRAME).div_ceil(TRIM_HOP)
    };
    let max_rms = (0..n_frames)
        .map(|i| {
            let s = i * TRIM_HOP;
            let e = (s + TRIM_FRAME).min(n);
            (x[s..e].iter().map(|v| v * v).sum::<f64>() / TRIM_FRAME as f64).sqrt()
        })
        .fold(0.0, f64::max);
    if max_rms == 0.0 {
        return Ok(empty);
    }
    let threshold = max_rms * 10f64.powf(-top_db / 20.0);
    let loud = |k: usize| {
        let seg = &x[k * TRIM_HOP..((k + 1) * TRIM_HOP).min(n)];
        (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt() >= threshold
    };
    let n_seg = n.div_ceil(TRIM_HOP);
    let Some(first) = (0..n_seg).find(|&k| loud(k)) else {
        return Ok(empty);
    };
    let last = (0..n_seg).rev().find(|&k| loud(k)).unwrap_or(first);
    let start = first * TRIM_HOP;
    let end = ((last + 1) * TRIM_HOP).min(n);
    Ok(AudioBuffer::from_trusted(
        x[start..end].to_vec(),
        audio.sample_rate(),
    ))
}
