//! Seeded synthetic corpus: harmonic "speakers" reading phoneme strings
//! drawn from one shared inventory, with ground-truth variance targets.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{PhonemeSequence, VarianceTargets};
use crate::dsp::{
    encode_wav_pcm16, load_wav, mel_spectrogram, parse_wav, read_mel0, write_mel0, AudioBuffer,
    HOP, SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HARMONICS: usize = 32;
pub const MIN_DURATION: usize = 3;
pub const MAX_DURATION: usize = 8;
pub const MIN_PHONEMES: usize = 5;
pub const MAX_PHONEMES: usize = 9;
pub const F0_RANGE: (f64, f64) = (80.0, 400.0);
pub const MANIFEST: &str = "manifest.csv";
pub const HELDOUT_MANIFEST: &str = "heldout.csv";

/// Samples for `frames` STFT frames: `HOP · frames − HOP/2`, which maps to
/// exactly `frames` centred frames.
pub fn samples_for_frames(frames: usize) -> usize {
    HOP * frames - HOP / 2
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: usize,
    pub f0_base: f64,
    /// Unit-energy harmonic amplitudes.
    pub harmonic_amplitudes: Vec<f64>,
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
}

impl SyntheticSpeaker {
    pub fn draw(id: usize, seed: u64) -> Self {
        let mut r = stream_rng(seed, 1 + id as u64);
        let n: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
        let f0_base = (r.random_range(90f64.ln()..320f64.ln())).exp();
        let tilt = r.random_range(0.6..1.6);
        let mut amps: Vec<f64> = (1..=HARMONICS)
            .map(|k| (k as f64).powf(-tilt) * (0.6 * n.sample(&mut r)).exp())
            .collect();
        let e = amps.iter().map(|a| a * a).sum::<f64>().sqrt();
        amps.iter_mut().for_each(|a| *a /= e);
        SyntheticSpeaker {
            id,
            f0_base,
            harmonic_amplitudes: amps,
            vibrato_rate: r.random_range(4.0..7.0),
            vibrato_depth: r.random_range(0.005..0.03),
        }
    }
}

/// Formant pair of one phoneme; shared by every speaker.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Formants {
    pub centers: [f64; 2],
    pub bandwidths: [f64; 2],
}

impl Formants {
    fn gain(&self, f: f64) -> f64 {
        let g: f64 = (0..2)
            .map(|i| (-0.5 * ((f - self.centers[i]) / self.bandwidths[i]).powi(2)).exp())
            .sum();
        0.05 + g
    }
}

pub fn phoneme_inventory(vocab: usize, seed: u64) -> Vec<Formants> {
    let mut r = stream_rng(seed, 0);
    (0..vocab)
        .map(|_| Formants {
            centers: [r.random_range(250.0..900.0), r.random_range(850.0..2600.0)],
            bandwidths: [r.random_range(120.0..250.0), r.random_range(150.0..300.0)],
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub phonemes: PhonemeSequence,
    pub targets: VarianceTargets,
    pub audio: AudioBuffer,
    pub mel: Tensor,
}

/// Renders phoneme-level pitch (Hz), gain and durations through the
/// speaker's harmonic source. Amplitudes glide with a one-pole smoother so
/// phoneme boundaries do not click.
pub fn render(
    speaker: &SyntheticSpeaker,
    inventory: &[Formants],
    ids: &[usize],
    f0: &[f64],
    gain: &[f64],
    durations: &[usize],
) -> Vec<f64> {
    let frames: usize = durations.iter().sum();
    let n = samples_for_frames(frames);
    let sr = SAMPLE_RATE as f64;
    let nyquist = sr / 2.0;
    let mut out = Vec::with_capacity(n);
    let mut bounds = Vec::with_capacity(ids.len());
    let mut acc = 0;
    for &d in durations {
        acc += d;
        bounds.push(acc * HOP);
    }
    let mut phase = 0.0f64;
    let mut amp = vec![0.0f64; HARMONICS];
    let mut seg = 0;
    for i in 0..n {
        while i >= bounds[seg] {
            seg += 1;
        }
        let t = i as f64 / sr;
        let f = f0[seg] * (1.0 + speaker.vibrato_depth * (TAU * speaker.vibrato_rate * t).sin());
        phase = (phase + TAU * f / sr) % TAU;
        let form = &inventory[ids[seg]];
        let mut x = 0.0;
        for (k, a) in amp.iter_mut().enumerate() {
            let fk = (k + 1) as f64 * f;
            let target = if fk < nyquist {
                gain[seg] * speaker.harmonic_amplitudes[k] * form.gain(fk)
            } else {
                0.0
            };
            *a += 0.01 * (target - *a);
            x += *a * ((k + 1) as f64 * phase).sin();
        }
        out.push(x.clamp(-0.99, 0.99));
    }
    out
}

fn ln_rms(xs: &[f64]) -> f64 {
    let ms = xs.iter().map(|x| x * x).sum::<f64>() / xs.len().max(1) as f64;
    (ms.sqrt() + 1e-5).ln()
}

/// Draws and renders one utterance. The audio is round-tripped through
/// 16-bit PCM so in-memory and on-disk corpora agree exactly.
pub fn synthesize_utterance(
    id: String,
    speaker: &SyntheticSpeaker,
    inventory: &[Formants],
    seed: u64,
    stream: u64,
) -> Result<Utterance> {
    let mut r = stream_rng(seed, stream);
    let n: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    let l = r.random_range(MIN_PHONEMES..=MAX_PHONEMES);
    let ids: Vec<usize> = (0..l).map(|_| r.random_range(0..inventory.len())).collect();
    let durations: Vec<usize> = (0..l)
        .map(|_| r.random_range(MIN_DURATION..=MAX_DURATION))
        .collect();
    let f0: Vec<f64> = (0..l)
        .map(|_| (speaker.f0_base * (0.06 * n.sample(&mut r)).exp()).clamp(F0_RANGE.0, F0_RANGE.1))
        .collect();
    let gain: Vec<f64> = (0..l)
        .map(|_| (0.12f64.ln() + 0.25 * n.sample(&mut r)).exp())
        .collect();
    let raw = render(speaker, inventory, &ids, &f0, &gain, &durations);
    let audio = parse_wav(&encode_wav_pcm16(&AudioBuffer::new(raw, SAMPLE_RATE)?))?;
    let mut start = 0;
    let energy: Vec<f64> = durations
        .iter()
        .map(|&d| {
            let end = ((start + d) * HOP).min(audio.len());
            let e = ln_rms(&audio.samples()[start * HOP..end]);
            start += d;
            e
        })
        .collect();
    let pitch = f0.iter().map(|f| f.ln()).collect();
    let mel = mel_spectrogram(&audio)?.into_tensor();
    let targets = VarianceTargets::new(pitch, energy, durations)?;
    debug_assert_eq!(mel.rows(), targets.total_frames());
    Ok(Utterance {
        id,
        speaker: speaker.id,
        phonemes: PhonemeSequence::new(ids, inventory.len())?,
        targets,
        audio,
        mel,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub n_utterances: usize,
    pub heldout_utterances: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn from_config(c: &super::Config) -> Self {
        CorpusSpec {
            n_speakers: c.n_speakers,
            n_utterances: c.n_utterances,
            heldout_utterances: c.heldout_utterances,
            vocab_size: c.vocab_size,
            seed: c.seed,
        }
    }
}

/// Training and held-out utterances of the same speakers.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub heldout: Vec<Utterance>,
}

const HELDOUT_STREAM: u64 = 1 << 20;

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        if spec.n_speakers < 2 || spec.n_utterances < 2 {
            return Err(Error::usage(
                "a corpus needs at least 2 speakers and 2 utterances each",
            ));
        }
        let inventory = phoneme_inventory(spec.vocab_size, spec.seed);
        let speakers: Vec<SyntheticSpeaker> = (0..spec.n_speakers)
            .map(|i| SyntheticSpeaker::draw(i, spec.seed))
            .collect();
        let make = |count: usize, offset: u64, tag: char| -> Result<Vec<Utterance>> {
            let jobs: Vec<(usize, usize)> = (0..spec.n_speakers)
                .flat_map(|s| (0..count).map(move |u| (s, u)))
                .collect();
            jobs.par_iter()
                .map(|&(s, u)| {
                    let stream = offset + 1000 + (s * 1000 + u) as u64;
                    synthesize_utterance(
                        format!("s{s}_{tag}{u:02}"),
                        &speakers[s],
                        &inventory,
                        spec.seed,
                        stream,
                    )
                })
                .collect()
        };
        Ok(Corpus {
            train: make(spec.n_utterances, 0, 'u')?,
            heldout: make(spec.heldout_utterances, HELDOUT_STREAM, 'h')?,
        })
    }

    /// Writes `wav/`, `mel/`, the training manifest and, when non-empty,
    /// `heldout/` with its own manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_split(dir, "wav", "mel", MANIFEST, &self.train)?;
        if !self.heldout.is_empty() {
            write_split(
                dir,
                "heldout/wav",
                "heldout/mel",
                HELDOUT_MANIFEST,
                &self.heldout,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, vocab_size: usize) -> Result<Self> {
        let heldout = dir.join(HELDOUT_MANIFEST);
        Ok(Corpus {
            train: load_manifest(dir, &dir.join(MANIFEST), vocab_size)?,
            heldout: if heldout.exists() {
                load_manifest(dir, &heldout, vocab_size)?
            } else {
                Vec::new()
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub speaker_id: usize,
    pub wav: String,
    pub mel: String,
    pub frames: usize,
    pub phonemes: String,
    pub durations: String,
    pub pitch: String,
    pub energy: String,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn split<T: std::str::FromStr>(s: &str, what: &str, path: &Path) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|x| {
            x.parse().map_err(|_| Error::Format {
                what: path.display().to_string(),
                offset: 0,
                detail: format!("bad {what} value {x:?}"),
            })
        })
        .collect()
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_split(
    dir: &Path,
    wav_dir: &str,
    mel_dir: &str,
    manifest: &str,
    utts: &[Utterance],
) -> Result<()> {
    mkdir(&dir.join(wav_dir))?;
    mkdir(&dir.join(mel_dir))?;
    let rows: Vec<ManifestRow> = utts
        .par_iter()
        .map(|u| {
            let wav = format!("{wav_dir}/{}.wav", u.id);
            let mel = format!("{mel_dir}/{}.mel0", u.id);
            let bytes = encode_wav_pcm16(&u.audio);
            let wp = dir.join(&wav);
            std::fs::write(&wp, bytes).map_err(|e| Error::io(&wp, e))?;
            write_mel0(
                dir.join(&mel),
                &crate::dsp::MelSpectrogram::new(u.mel.clone())?,
            )?;
            Ok(ManifestRow {
                utterance_id: u.id.clone(),
                speaker_id: u.speaker,
                wav,
                mel,
                frames: u.mel.rows(),
                phonemes: join(u.phonemes.ids()),
                durations: join(&u.targets.durations),
                pitch: join(&u.targets.pitch),
                energy: join(&u.targets.energy),
            })
        })
        .collect::<Result<_>>()?;
    let path = dir.join(manifest);
    let csv_err = |e| Error::csv(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let csv_err = |e| Error::csv(path, e);
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn load_manifest(dir: &Path, path: &Path, vocab_size: usize) -> Result<Vec<Utterance>> {
    read_manifest(path)?
        .par_iter()
        .map(|row| {
            let audio = load_wav(dir.join(&row.wav))?;
            let mel = read_mel0(dir.join(&row.mel))?.into_tensor();
            let targets = VarianceTargets::new(
                split(&row.pitch, "pitch", path)?,
                split(&row.energy, "energy", path)?,
                split(&row.durations, "duration", path)?,
            )?;
            if targets.total_frames() != mel.rows() || mel.rows() != row.frames {
                return Err(Error::Format {
                    what: path.display().to_string(),
                    offset: 0,
                    detail: format!(
                        "{}: durations sum to {}, mel has {} frames",
                        row.utterance_id,
                        targets.total_frames(),
                        mel.rows()
                    ),
                });
            }
            Ok(Utterance {
                id: row.utterance_id.clone(),
                speaker: row.speaker_id,
                phonemes: PhonemeSequence::new(split(&row.phonemes, "phoneme", path)?, vocab_size)?,
                targets,
                audio,
                mel,
            })
        })
        .collect()
}

/// Paths of every file a corpus directory holds, for reporting.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for sub in ["wav", "mel"] {
        let p = dir.join(sub);
        for e in std::fs::read_dir(&p).map_err(|e| Error::io(&p, e))? {
            out.push(e.map_err(|e| Error::io(&p, e))?.path());
        }
    }
    out.sort();
    Ok(out)
}
