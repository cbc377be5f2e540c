use std::path::Path;

use super::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

fn fmt_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "WAV".into(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| fmt_err(at, "unexpected end of file"))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| fmt_err(at, "unexpected end of file"))
}

/// Decodes a 16-bit PCM RIFF/WAVE image. Stereo is averaged to mono and any
/// rate other than 22050 Hz is linearly resampled.
pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.get(0..4) != Some(b"RIFF") {
        return Err(fmt_err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE") {
        return Err(fmt_err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut format: Option<(u16, u32)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4)? as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 {
                return Err(fmt_err(
                    pos + 4,
                    format!("fmt chunk too short ({size} bytes)"),
                ));
            }
            let tag = u16_at(bytes, body)?;
            if tag != 1 {
                return Err(fmt_err(
                    body,
                    format!("unsupported format tag {tag}, need PCM (1)"),
                ));
            }
            let channels = u16_at(bytes, body + 2)?;
            if channels != 1 && channels != 2 {
                return Err(fmt_err(
                    body + 2,
                    format!("{channels} channels, need 1 or 2"),
                ));
            }
            let rate = u32_at(bytes, body + 4)?;
            if rate == 0 {
                return Err(fmt_err(body + 4, "zero sample rate"));
            }
            let bits = u16_at(bytes, body + 14)?;
            if bits != 16 {
                return Err(fmt_err(body + 14, format!("{bits}-bit samples, need 16")));
            }
            format = Some((channels, rate));
        } else if id == b"data" {
            let (channels, rate) =
                format.ok_or_else(|| fmt_err(pos, "data chunk before fmt chunk"))?;
            let end = body + size;
            if end > bytes.len() {
                return Err(fmt_err(
                    pos + 4,
                    format!(
                        "data chunk claims {size} bytes, only {} remain",
                        bytes.len() - body
                    ),
                ));
            }
            let frame_bytes = 2 * channels as usize;
            if !size.is_multiple_of(frame_bytes) {
                return Err(fmt_err(
                    pos + 4,
                    format!("data size {size} not a whole number of frames"),
                ));
            }
            let samples: Vec<f64> = bytes[body..end]
                .chunks_exact(frame_bytes)
                .map(|f| {
                    let sum: f64 = f
                        .chunks_exact(2)
                        .map(|s| i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0)
                        .sum();
                    sum / channels as f64
                })
                .collect();
            let samples = if rate == SAMPLE_RATE {
                samples
            } else {
                resample_linear(&samples, rate, SAMPLE_RATE)
            };
            return Ok(AudioBuffer::from_trusted(samples, SAMPLE_RATE));
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    Err(fmt_err(pos.min(bytes.len()), "no data chunk"))
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes).map_err(|e| match e {
        Error::Format { offset, detail, .. } => Error::Format {
            what: path.display().to_string(),
            offset,
            detail,
        },
        other => other,
    })
}

/// Linear interpolation onto a new sample grid; endpoints are kept.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if samples.is_empty() || from == to {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as f64) * to as f64 / from as f64)
        .round()
        .max(1.0) as usize;
    let step = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let p = i as f64 * step;
            let j = p.floor() as usize;
            if j + 1 >= samples.len() {
                samples[samples.len() - 1]
            } else {
                let f = p - j as f64;
                samples[j] * (1.0 - f) + samples[j + 1] * f
            }
        })
        .collect()
}

/// Mono 16-bit PCM encoding; samples are scaled by 32767 and rounded.
pub fn encode_wav_pcm16(audio: &AudioBuffer) -> Vec<u8> {
    let n = audio.len();
    let data_bytes = (2 * n) as u32;
    let mut out = Vec::with_capacity(44 + 2 * n);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate().to_le_bytes());
    out.extend_from_slice(&(audio.sample_rate() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in audio.samples() {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, audio: &AudioBuffer) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav_pcm16(audio)).map_err(|e| Error::io(path, e))
}
