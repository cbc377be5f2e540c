//! Audio front-end: WAV I/O, silence trimming, STFT, log-mel and MFCC.
//!
//! Fixed analysis parameters: 22050 Hz, 1024-point Hann STFT with hop 256,
//! 80 mel bands over 0–8000 Hz, natural log of power-mel energies floored at
//! 1e-5.

mod mel;
mod melio;
mod mfcc;
mod stft;
mod trim;
mod wav;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz};
pub use melio::{decode_mel0, encode_mel0, read_mel0, write_mel0, write_mel_csv, MEL0_MAGIC};
pub use mfcc::{dct_ortho, idct_ortho, mfcc, DEFAULT_MFCC_COEFFS};
pub use stft::{hann_window, stft, Spectrogram};
pub use trim::{trim_silence, DEFAULT_TOP_DB, TRIM_FRAME, TRIM_HOP};
pub use wav::{encode_wav_pcm16, load_wav, parse_wav, resample_linear, write_wav};

pub const SAMPLE_RATE: u32 = 22050;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 256;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-5;

/// Mono samples in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some((i, x)) = samples
            .iter()
            .enumerate()
            .find(|(_, x)| !x.is_finite() || x.abs() > 1.0)
        {
            return Err(Error::Domain {
                op: "AudioBuffer",
                detail: format!("sample {i} = {x} is not a finite value in [-1, 1]"),
            });
        }
        if sample_rate == 0 {
            return Err(Error::usage("sample rate must be positive"));
        }
        Ok(AudioBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// First `n` samples (or all of them if shorter).
    pub fn truncated(&self, n: usize) -> AudioBuffer {
        AudioBuffer {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn from_trusted(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioBuffer {
            samples,
            sample_rate,
        }
    }
}

/// `T × 80` matrix of natural-log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: Tensor,
}

impl MelSpectrogram {
    pub const HOP_SECONDS: f64 = HOP as f64 / SAMPLE_RATE as f64;

    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 || frames.shape()[1] != N_MELS {
            return Err(Error::dim(
                "MelSpectrogram",
                format!("expected T×{N_MELS}, got {:?}", frames.shape()),
            ));
        }
        Ok(MelSpectrogram { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// `T × K` cepstral coefficients 1..=K (c0 dropped).
#[derive(Clone, Debug, PartialEq)]
pub struct MfccMatrix {
    coeffs: Tensor,
}

impl MfccMatrix {
    pub fn new(coeffs: Tensor) -> Result<Self> {
        if coeffs.ndim() != 2 {
            return Err(Error::dim(
                "MfccMatrix",
                format!("expected T×K, got {:?}", coeffs.shape()),
            ));
        }
        Ok(MfccMatrix { coeffs })
    }

    pub fn coeffs(&self) -> &Tensor {
        &self.coeffs
    }

    pub fn num_frames(&self) -> usize {
        self.coeffs.rows()
    }

    pub fn num_coeffs(&self) -> usize {
        self.coeffs.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.coeffs.row(t)
    }
}
