//! Strided convolutional waveform encoder producing one 128-dim frame per
//! 320 samples.

use crate::dsp::AudioBuffer;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv1d, Ctx, Linear};
use crate::tensor::{Padding, Tensor, Var};

pub const STRIDES: [usize; 4] = [2, 4, 5, 8];
pub const CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const STEM_CHANNELS: usize = 32;
pub const STEM_KERNEL: usize = 7;
pub const DOWNSAMPLE: usize = 320;
pub const ENCODER_DIM: usize = 128;

/// Number of frames [`AudioEncoder`] emits for `n` samples.
pub fn encoded_len(n: usize) -> usize {
    n.div_ceil(DOWNSAMPLE)
}

/// Zero-pads a waveform on the right to a multiple of [`DOWNSAMPLE`] and
/// lays it out as a one-channel `[1 × N]` matrix.
pub fn waveform_tensor(audio: &AudioBuffer) -> Result<Tensor> {
    let n = audio.len();
    if n < DOWNSAMPLE {
        return Err(Error::usage(format!(
            "audio encoder needs at least {DOWNSAMPLE} samples, got {n}"
        )));
    }
    let mut data = audio.samples().to_vec();
    data.resize(encoded_len(n) * DOWNSAMPLE, 0.0);
    let len = data.len();
    Tensor::new(vec![1, len], data)
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub stem: Conv1d,
    pub blocks: Vec<Conv1d>,
    pub proj: Linear,
}

impl AudioEncoder {
    pub fn new(b: &mut Builder, name: &str) -> Self {
        let mut s = b.scope(name);
        let stem = Conv1d::new(
            &mut s,
            "stem",
            1,
            STEM_CHANNELS,
            STEM_KERNEL,
            1,
            Padding::Same,
        );
        let mut c_in = STEM_CHANNELS;
        let blocks = STRIDES
            .iter()
            .zip(CHANNELS)
            .enumerate()
            .map(|(i, (&stride, c_out))| {
                let k = 2 * stride;
                // left padding of k − s makes every block divide length exactly by s
                let conv = Conv1d::new(
                    &mut s,
                    &format!("block{i}"),
                    c_in,
                    c_out,
                    k,
                    stride,
                    Padding::Explicit(k - stride, 0),
                );
                c_in = c_out;
                conv
            })
            .collect();
        let proj = Linear::new(&mut s, "proj", c_in, ENCODER_DIM);
        AudioEncoder { stem, blocks, proj }
    }

    /// `[1 × N]` waveform (N a multiple of 320) → `[N/320 × 128]`.
    pub fn forward(&self, ctx: &mut Ctx, wave: Var) -> Result<Var> {
        let shape = ctx.tape.shape(wave).to_vec();
        if shape.len() != 2 || shape[0] != 1 || !shape[1].is_multiple_of(DOWNSAMPLE) {
            return Err(Error::dim(
                "encode_audio",
                format!("expected 1×N with N a multiple of {DOWNSAMPLE}, got {shape:?}"),
            ));
        }
        let mut x = self.stem.forward(ctx, wave)?;
        for conv in &self.blocks {
            let a = ctx.tape.elu(x);
            x = conv.forward(ctx, a)?;
        }
        let x = ctx.tape.elu(x);
        let x = ctx.tape.transpose(x)?;
        self.proj.forward(ctx, x)
    }

    pub fn encode(&self, ctx: &mut Ctx, audio: &AudioBuffer) -> Result<Var> {
        let w = waveform_tensor(audio)?;
        let v = ctx.tape.constant(w);
        self.forward(ctx, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use crate::nn::ParamStore;
    use crate::tensor::{grad_check_many, Coords, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn model() -> (ParamStore, AudioEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = AudioEncoder::new(&mut Builder::new(&mut store, &mut rng), "enc");
        (store, m)
    }

    fn encode(store: &ParamStore, m: &AudioEncoder, samples: Vec<f64>) -> Tensor {
        let a = AudioBuffer::new(samples, SAMPLE_RATE).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, store);
        let y = m.encode(&mut ctx, &a).unwrap();
        ctx.tape.value(y).clone()
    }

    #[test]
    fn downsampling_is_320() {
        assert_eq!(STRIDES.iter().product::<usize>(), DOWNSAMPLE);
        let (store, m) = model();
        assert_eq!(encode(&store, &m, vec![0.0; 32000]).shape(), &[100, 128]);
    }

    #[test]
    fn length_contract_over_random_lengths() {
        let (store, m) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.random_range(320..=65536);
            assert_eq!(
                encode(&store, &m, vec![0.01; n]).rows(),
                encoded_len(n),
                "n={n}"
            );
        }
        let a = AudioBuffer::new(vec![0.0; 319], SAMPLE_RATE).unwrap();
        let err = waveform_tensor(&a).unwrap_err().to_string();
        assert!(err.contains("320"), "{err}");
    }

    #[test]
    fn zero_waveform_gives_constant_interior_frames() {
        let (store, m) = model();
        let y = encode(&store, &m, vec![0.0; 6400]);
        for t in 2..y.rows() - 1 {
            for (a, b) in y.row(t).iter().zip(y.row(1)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shift_by_one_frame_of_samples() {
        let (store, m) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..6400).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut shifted = vec![0.0; 320];
        shifted.extend_from_slice(&x[..6400 - 320]);
        let a = encode(&store, &m, x);
        let b = encode(&store, &m, shifted);
        for t in 3..a.rows() - 3 {
            for (p, q) in a.row(t).iter().zip(b.row(t + 1)) {
                assert!((p - q).abs() < 1e-6, "frame {t}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (store, m) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wave = Tensor::uniform(vec![1, 1600], 0.5, &mut rng);
        let probe = Tensor::randn(vec![5, 128], 1.0, &mut rng);
        let report = grad_check_many(
            |t, v| {
                let mut ctx = Ctx::eval(t, &store);
                let y = m.forward(&mut ctx, v[0])?;
                let p = ctx.tape.constant(probe.clone());
                let w = ctx.tape.mul(y, p)?;
                Ok(ctx.tape.sum(w))
            },
            &[Arc::new(wave)],
            1e-5,
            Coords::Random {
                per_input: 80,
                seed: 4,
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
