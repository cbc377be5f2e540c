use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{AudioBuffer, HOP, N_FFT};
use crate::error::{Error, Result};

/// Complex STFT, `frames × (N_FFT/2 + 1)` row-major.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into a reflect-padded signal (edge sample not repeated).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Hann-windowed STFT with centered frames and reflect padding;
/// `1 + floor(len / 256)` frames of 513 bins.
pub fn stft(audio: &AudioBuffer) -> Result<Spectrogram> {
    let x = audio.samples();
    if x.is_empty() {
        return Err(Error::usage("stft of an empty buffer"));
    }
    let frames = 1 + x.len() / HOP;
    let bins = N_FFT / 2 + 1;
    let window = hann_window(N_FFT);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let half = (N_FFT / 2) as isize;
    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
    for t in 0..frames {
        let start = (t * HOP) as isize - half;
        for (n, b) in buf.iter_mut().enumerate() {
            let s = x[reflect(start + n as isize, x.len())];
            *b = Complex64::new(s * window[n], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { frames, bins, data })
}
