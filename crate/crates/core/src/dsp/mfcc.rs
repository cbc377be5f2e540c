use std::f64::consts::PI;

use super::{MelSpectrogram, MfccMatrix, N_MELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MFCC_COEFFS: usize = 13;

fn dct_basis(n: usize, k: usize, i: usize) -> f64 {
    let scale = if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    };
    scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
}

/// Orthonormal DCT-II.
pub fn dct_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, v)| v * dct_basis(n, k, i))
                .sum()
        })
        .collect()
}

/// Inverse of [`dct_ortho`] (orthonormal DCT-III).
pub fn idct_ortho(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    (0..n)
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, v)| v * dct_basis(n, k, i))
                .sum()
        })
        .collect()
}

/// Cepstral coefficients 1..=k of every frame.
pub fn mfcc(mel: &MelSpectrogram, k: usize) -> Result<MfccMatrix> {
    if !(1..N_MELS).contains(&k) {
        return Err(Error::usage(format!(
            "MFCC count must be in 1..={}, got {k}",
            N_MELS - 1
        )));
    }
    let frames = mel.frames();
    let t = frames.rows();
    let mut out = Vec::with_capacity(t * k);
    for r in 0..t {
        let c = dct_ortho(frames.row(r));
        out.extend_from_slice(&c[1..=k]);
    }
    MfccMatrix::new(Tensor::from_parts(vec![t, k], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{mel_spectrogram, AudioBuffer, SAMPLE_RATE};

    #[test]
    fn constant_frame_has_zero_cepstrum() {
        let m = MelSpectrogram::new(Tensor::full(vec![3, 80], -2.5)).unwrap();
        let c = mfcc(&m, DEFAULT_MFCC_COEFFS).unwrap();
        assert_eq!(c.num_coeffs(), 13);
        assert!(c.coeffs().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dct_roundtrip() {
        let x: Vec<f64> = (0..80).map(|i| ((i * 37) % 11) as f64 - 4.0).collect();
        let y = idct_ortho(&dct_ortho(&x));
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn coefficient_count_is_validated() {
        let m = MelSpectrogram::new(Tensor::zeros(vec![1, 80])).unwrap();
        assert!(mfcc(&m, 0).is_err());
        assert!(mfcc(&m, 80).is_err());
        assert_eq!(mfcc(&m, 79).unwrap().num_coeffs(), 79);
    }

    #[test]
    fn pipeline_is_bit_deterministic() {
        let x: Vec<f64> = (0..4000)
            .map(|i| 0.3 * (i as f64 * 0.021).sin() * (i as f64 * 0.0007).cos())
            .collect();
        let a = AudioBuffer::new(x, SAMPLE_RATE).unwrap();
        let c1 = mfcc(&mel_spectrogram(&a).unwrap(), 13).unwrap();
        let c2 = mfcc(&mel_spectrogram(&a.clone()).unwrap(), 13).unwrap();
        assert_eq!(c1, c2);
    }
}
