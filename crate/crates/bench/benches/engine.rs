use std::hint::black_box;
use std::time::Duration;

use cif_tts::dsp::{mel_spectrogram, mfcc, stft, AudioBuffer, DEFAULT_MFCC_COEFFS, SAMPLE_RATE};
use cif_tts::eval::mcd_dtw;
use cif_tts::harness::{Config, Corpus, CorpusSpec, Trainer};
use cif_tts::{Padding, Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

/// Deterministic filler so benches need no RNG.
fn filled(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| (i as f64 * 0.618 + phase).sin()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn tone(seconds: f64) -> AudioBuffer {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let x = (0..n)
        .map(|i| 0.3 * (std::f64::consts::TAU * 180.0 * i as f64 / SAMPLE_RATE as f64).sin())
        .collect();
    AudioBuffer::new(x, SAMPLE_RATE).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_fwd_bwd");
    for n in [32usize, 128, 256] {
        let (a, b) = (filled(&[n, n], 0.1), filled(&[n, n], 0.7));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.leaf(a.clone()), t.leaf(b.clone()));
                let z = t.matmul(x, y).unwrap();
                let s = t.sum(z);
                t.backward(s).unwrap();
                black_box(t.grad(x).is_some())
            })
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let x = filled(&[128, 200], 0.3);
    let w = filled(&[128, 128, 9], 0.9);
    c.bench_function("conv1d_128x200_k9_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
            let y = t.conv1d(xv, wv, None, 1, Padding::Same).unwrap();
            let s = t.sum(y);
            t.backward(s).unwrap();
            black_box(t.grad(wv).is_some())
        })
    });
}

fn dsp(c: &mut Criterion) {
    let audio = tone(2.0);
    c.bench_function("stft_2s", |b| b.iter(|| black_box(stft(&audio).unwrap())));
    c.bench_function("mel_2s", |b| {
        b.iter(|| black_box(mel_spectrogram(&audio).unwrap()))
    });
    let m = mel_spectrogram(&audio).unwrap();
    let a = mfcc(&m, DEFAULT_MFCC_COEFFS).unwrap();
    let m2 = mel_spectrogram(&tone(1.7)).unwrap();
    let b2 = mfcc(&m2, DEFAULT_MFCC_COEFFS).unwrap();
    c.bench_function("mcd_dtw_2s_vs_1.7s", |b| {
        b.iter(|| black_box(mcd_dtw(&a, &b2).unwrap()))
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = Config {
        n_speakers: 2,
        n_utterances: 4,
        heldout_utterances: 0,
        ..Config::default()
    };
    let corpus = Corpus::generate(&CorpusSpec::from_config(&cfg)).unwrap();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut g = c.benchmark_group("training");
    g.sample_size(10).measurement_time(Duration::from_secs(20));
    g.bench_function("train_step_batch4", |b| {
        b.iter(|| black_box(trainer.train_step(&corpus.train).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, matmul, conv, dsp, train_step);
criterion_main!(benches);
