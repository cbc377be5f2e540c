use std::sync::OnceLock;

use super::{
    stft, AudioBuffer, MelSpectrogram, F_MAX, F_MIN, LOG_FLOOR, N_FFT, N_MELS, SAMPLE_RATE,
};
use crate::error::Result;
use crate::tensor::Tensor;

const LIN_STEP: f64 = 200.0 / 3.0;
const LOG_START_HZ: f64 = 1000.0;
const LOG_START_MEL: f64 = LOG_START_HZ / LIN_STEP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < LOG_START_HZ {
        hz / LIN_STEP
    } else {
        LOG_START_MEL + (hz / LOG_START_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < LOG_START_MEL {
        mel * LIN_STEP
    } else {
        LOG_START_HZ * (log_step() * (mel - LOG_START_MEL)).exp()
    }
}

/// `80 × 513` matrix of unit-peak triangular filters spaced evenly in mel
/// between `F_MIN` and `F_MAX`.
pub fn mel_filterbank() -> &'static Tensor {
    static BANK: OnceLock<Tensor> = OnceLock::new();
    BANK.get_or_init(build_filterbank)
}

fn build_filterbank() -> Tensor {
    let bins = N_FFT / 2 + 1;
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
    let mut w = vec![0.0; N_MELS * bins];
    for m in 0..N_MELS {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = bin_hz(k);
            let v = ((f - l) / (c - l)).min((r - f) / (r - c));
            w[m * bins + k] = v.max(0.0);
        }
        // the lowest filters are narrower than one bin; keep them non-empty
        if w[m * bins..(m + 1) * bins].iter().all(|&v| v == 0.0) {
            let k = (c * N_FFT as f64 / SAMPLE_RATE as f64).round() as usize;
            w[m * bins + k.min(bins - 1)] = 1.0;
        }
    }
    Tensor::from_parts(vec![N_MELS, bins], w)
}

/// Natural log of power-spectrum mel energies, floored at `LOG_FLOOR`.
pub fn mel_spectrogram(audio: &AudioBuffer) -> Result<MelSpectrogram> {
    let spec = stft(audio)?;
    let power = spec.power();
    let bank = mel_filterbank();
    let bins = spec.bins;
    let mut out = vec![0.0; spec.frames * N_MELS];
    for t in 0..spec.frames {
        let p = &power[t * bins..(t + 1) * bins];
        for m in 0..N_MELS {
            let e: f64 = bank.row(m).iter().zip(p).map(|(w, x)| w * x).sum();
            out[t * N_MELS + m] = e.max(LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(Tensor::from_parts(vec![spec.frames, N_MELS], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_roundtrip_and_knee() {
        for hz in [0.0, 300.0, 999.0, 1000.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn filters_are_positive_compact_and_ordered() {
        let bank = mel_filterbank();
        assert_eq!(bank.shape(), &[80, 513]);
        let mut prev_center = -1.0;
        for m in 0..80 {
            let row = bank.row(m);
            assert!(row.iter().sum::<f64>() > 0.0);
            let nz: Vec<usize> = (0..513).filter(|&k| row[k] > 0.0).collect();
            // compact: one contiguous run that stops well short of Nyquist
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
            assert!(*nz.last().unwrap() < 400);
            let center = row
                .iter()
                .enumerate()
                .map(|(k, w)| k as f64 * w)
                .sum::<f64>()
                / row.iter().sum::<f64>();
            assert!(center > prev_center, "filter {m}");
            prev_center = center;
        }
        for m in 0..80 {
            let ones: f64 = bank.row(m).iter().sum();
            assert!(ones > 0.0);
        }
    }

    #[test]
    fn silence_hits_the_floor() {
        let a = AudioBuffer::new(vec![0.0; 2560], SAMPLE_RATE).unwrap();
        let m = mel_spectrogram(&a).unwrap();
        assert_eq!(m.num_frames(), 11);
        assert!(m.frames().data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }
}
