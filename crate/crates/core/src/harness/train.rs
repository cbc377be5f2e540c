//! Training loop, inference helpers and held-out metrics.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::data::Utterance;
use super::Config;
use crate::backbone::{AcousticModel, LossValues, PhonemeSequence, Reference, HIDDEN};
use crate::dsp::{mfcc, AudioBuffer, MelSpectrogram, DEFAULT_MFCC_COEFFS};
use crate::error::{Error, Result};
use crate::eval::{mcd_dtw, similarity_report, SimilarityReport};
use crate::nn::{clip_global_norm, Adam, Builder, Ctx, NoamSchedule, ParamStore};
use crate::speaker::SPEAKER_DIM;
use crate::tensor::{Tape, Tensor};

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: LossValues,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,total,mel,pitch,energy,duration,lr,grad_norm";

    /// Shortest round-trip formatting, so equal runs give equal bytes.
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.step, l.total, l.mel, l.pitch, l.energy, l.duration, self.lr, self.grad_norm
        )
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Utterance indices of the batch at `step`: epoch-wise shuffles of the
/// corpus, seeded only by `seed`, so every configuration sees the same order.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    let start = step as usize * batch;
    (start..start + batch)
        .map(|k| {
            let epoch = (k / n) as u64;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch, 0x5eed)));
            perm[k % n]
        })
        .collect()
}

/// Random training crop, or the whole clip when `crop` is 0 or too long.
pub fn crop_audio(audio: &AudioBuffer, crop: usize, rng: &mut impl Rng) -> Result<AudioBuffer> {
    if crop == 0 || audio.len() <= crop {
        return Ok(audio.clone());
    }
    let off = rng.random_range(0..=audio.len() - crop);
    AudioBuffer::new(
        audio.samples()[off..off + crop].to_vec(),
        audio.sample_rate(),
    )
}

/// Deterministic centred crop used for evaluation references.
pub fn center_crop(audio: &AudioBuffer, crop: usize) -> Result<AudioBuffer> {
    if crop == 0 || audio.len() <= crop {
        return Ok(audio.clone());
    }
    let off = (audio.len() - crop) / 2;
    AudioBuffer::new(
        audio.samples()[off..off + crop].to_vec(),
        audio.sample_rate(),
    )
}

pub fn build_model(config: &Config) -> Result<(ParamStore, AcousticModel)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0x1417, 0));
    let model = {
        let mut b = Builder::new(&mut store, &mut rng);
        AcousticModel::new(&mut b, config.model_config())?
    };
    Ok((store, model))
}

/// Inference model from a checkpoint trained under `config`.
pub fn load_model(config: &Config, ck: &Checkpoint) -> Result<(ParamStore, AcousticModel)> {
    let (mut store, model) = build_model(config)?;
    ck.check_hash(&config.hash())?;
    ck.restore(&mut store, config.adam())?;
    Ok((store, model))
}

pub struct Trainer {
    pub config: Config,
    pub hash: String,
    pub store: ParamStore,
    pub model: AcousticModel,
    pub adam: Adam,
    /// Steps completed.
    pub step: u64,
    schedule: NoamSchedule,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        let (store, model) = build_model(config)?;
        let adam = Adam::new(config.adam(), &store);
        Ok(Trainer {
            hash: config.hash(),
            schedule: NoamSchedule {
                model_dim: HIDDEN,
                warmup: config.warmup_steps,
                scale: config.lr_scale,
            },
            config: config.clone(),
            store,
            model,
            adam,
            step: 0,
            pool: super::thread_pool()?,
        })
    }

    pub fn from_checkpoint(config: &Config, ck: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        ck.check_hash(&t.hash)?;
        t.adam = ck.restore(&mut t.store, config.adam())?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.hash, self.step, &self.store, &self.adam)
    }

    fn sample_grads(
        &self,
        u: &Utterance,
        step: u64,
        slot: usize,
    ) -> Result<(Vec<Option<Tensor>>, LossValues)> {
        let seed = mix(self.config.seed, step, slot as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference =
            Reference::from_audio(&crop_audio(&u.audio, self.config.ref_crop, &mut rng)?)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::train(&mut tape, &self.store, rng.random());
        let (_, loss) = self
            .model
            .loss(&mut ctx, &u.phonemes, &reference, &u.targets, &u.mel)?;
        let values = loss.values(ctx.tape);
        ctx.tape.backward(loss.total)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        for (id, g) in ctx.param_grads() {
            grads[id.index()] = Some(g);
        }
        Ok((grads, values))
    }

    /// One optimizer step on the next batch of `data`.
    pub fn train_step(&mut self, data: &[Utterance]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::usage("training corpus is empty"));
        }
        let step = self.step;
        let idx = batch_indices(self.config.seed, step, data.len(), self.config.batch_size);
        let per_sample: Vec<_> = self.pool.install(|| {
            idx.par_iter()
                .enumerate()
                .map(|(slot, &i)| self.sample_grads(&data[i], step, slot))
                .collect::<Result<Vec<_>>>()
        })?;
        let inv = 1.0 / per_sample.len() as f64;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let mut loss = LossValues {
            total: 0.0,
            mel: 0.0,
            pitch: 0.0,
            energy: 0.0,
            duration: 0.0,
        };
        for (g, l) in per_sample {
            for (acc, gi) in grads.iter_mut().zip(g) {
                let Some(gi) = gi else { continue };
                match acc {
                    Some(a) => a
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(x, y)| *x += inv * y),
                    None => *acc = Some(gi.map(|y| inv * y)),
                }
            }
            loss.total += inv * l.total;
            loss.mel += inv * l.mel;
            loss.pitch += inv * l.pitch;
            loss.energy += inv * l.energy;
            loss.duration += inv * l.duration;
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !loss.total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at step {step} (loss {}, grad norm {grad_norm})",
                loss.total
            )));
        }
        let lr = self.schedule.lr(step + 1);
        self.adam.update(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok(StepLog {
            step,
            loss,
            lr,
            grad_norm,
        })
    }

    pub fn synthesize(
        &self,
        phonemes: &PhonemeSequence,
        reference: &AudioBuffer,
    ) -> Result<(Tensor, Vec<usize>)> {
        synthesize(&self.model, &self.store, phonemes, reference)
    }
}

/// Where and how often [`run_training`] writes.
pub struct RunOptions<'a> {
    pub out_dir: &'a Path,
    pub until: u64,
    pub checkpoint_every: u64,
}

pub struct RunOutcome {
    pub log: Vec<StepLog>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.ckpt"))
}

/// Trains until `opts.until` steps are complete, appending to `log.csv` and
/// writing periodic checkpoints plus a final one. A non-finite loss aborts
/// with a numerical error naming the last good checkpoint.
pub fn run_training(
    trainer: &mut Trainer,
    data: &[Utterance],
    opts: &RunOptions,
    mut on_step: impl FnMut(&StepLog),
) -> Result<RunOutcome> {
    let dir = opts.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.txt");
    std::fs::write(&cfg_path, trainer.config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = dir.join("log.csv");
    let fresh = trainer.step == 0;
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log_file, "{}", StepLog::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut last_good: Option<PathBuf> = None;
    let mut log = Vec::new();
    while trainer.step < opts.until {
        let row = trainer.train_step(data).map_err(|e| match e {
            Error::Numerical(m) => Error::Numerical(format!(
                "{m}; last good checkpoint: {}",
                last_good
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into())
            )),
            other => other,
        })?;
        writeln!(log_file, "{}", row.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        on_step(&row);
        log.push(row);
        if opts.checkpoint_every > 0 && trainer.step.is_multiple_of(opts.checkpoint_every) {
            let p = checkpoint_path(dir, trainer.step);
            trainer.checkpoint().save(&p)?;
            log::info!("step {}: saved {}", trainer.step, p.display());
            last_good = Some(p);
        }
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = dir.join("final.ckpt");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(RunOutcome {
        log,
        final_checkpoint,
    })
}

/// Zero-shot inference: predicted durations drive expansion.
pub fn synthesize(
    model: &AcousticModel,
    store: &ParamStore,
    phonemes: &PhonemeSequence,
    reference: &AudioBuffer,
) -> Result<(Tensor, Vec<usize>)> {
    let r = Reference::from_audio(reference)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::eval(&mut tape, store);
    let out = model.forward(&mut ctx, phonemes, &r, None)?;
    let mel = ctx.tape.value(out.mel).clone();
    if !mel.is_finite() {
        return Err(Error::Numerical("synthesized mel is not finite".into()));
    }
    Ok((mel, out.durations))
}

pub fn embed(model: &AcousticModel, store: &ParamStore, audio: &AudioBuffer) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::eval(&mut tape, store);
    let s = model.speaker.embed(&mut ctx, audio)?;
    Ok(ctx.tape.value(s).data().to_vec())
}

/// Teacher-forced mel L1 over `data` in inference mode.
pub fn mean_mel_l1(
    model: &AcousticModel,
    store: &ParamStore,
    data: &[Utterance],
    crop: usize,
) -> Result<f64> {
    let v: Vec<f64> = data
        .par_iter()
        .map(|u| {
            let r = Reference::from_audio(&center_crop(&u.audio, crop)?)?;
            let mut tape = Tape::new();
            let mut ctx = Ctx::eval(&mut tape, store);
            let (_, l) = model.loss(&mut ctx, &u.phonemes, &r, &u.targets, &u.mel)?;
            Ok(l.values(ctx.tape).mel)
        })
        .collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Mean MCD-DTW of zero-shot syntheses against the ground-truth mels, each
/// utterance conditioned on its own (cropped) recording.
pub fn mean_mcd_dtw(
    model: &AcousticModel,
    store: &ParamStore,
    data: &[Utterance],
    crop: usize,
) -> Result<f64> {
    let v: Vec<f64> = data
        .par_iter()
        .map(|u| {
            let (mel, _) = synthesize(model, store, &u.phonemes, &center_crop(&u.audio, crop)?)?;
            let a = mfcc(&MelSpectrogram::new(u.mel.clone())?, DEFAULT_MFCC_COEFFS)?;
            let b = mfcc(&MelSpectrogram::new(mel)?, DEFAULT_MFCC_COEFFS)?;
            Ok(mcd_dtw(&a, &b)?.value)
        })
        .collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Raw and mean-normalized similarity reports for `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityEval {
    pub raw: SimilarityReport,
    /// Cosines after subtracting the mean embedding of the background set.
    pub centered: SimilarityReport,
}

fn embed_all(
    model: &AcousticModel,
    store: &ParamStore,
    data: &[Utterance],
    crop: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    data.par_iter()
        .map(|u| {
            Ok((
                u.speaker.to_string(),
                embed(model, store, &center_crop(&u.audio, crop)?)?,
            ))
        })
        .collect()
}

/// Speaker-similarity reports on `data`, with `background` (normally the
/// training utterances) supplying the mean removed before centred scoring.
pub fn speaker_similarity(
    model: &AcousticModel,
    store: &ParamStore,
    data: &[Utterance],
    background: &[Utterance],
    crop: usize,
) -> Result<SimilarityEval> {
    let items = embed_all(model, store, data, crop)?;
    let bg = embed_all(model, store, background, crop)?;
    if bg.is_empty() {
        return Err(Error::usage("similarity background set is empty"));
    }
    let dim = SPEAKER_DIM;
    let mut mean = vec![0.0; dim];
    for (_, e) in &bg {
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x / bg.len() as f64;
        }
    }
    let centered: Vec<(String, Vec<f64>)> = items
        .iter()
        .map(|(s, e)| (s.clone(), e.iter().zip(&mean).map(|(x, m)| x - m).collect()))
        .collect();
    Ok(SimilarityEval {
        raw: similarity_report(&items)?,
        centered: similarity_report(&centered)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let n = 7;
        let mut seen = vec![0; n];
        for step in 0..7 {
            for i in batch_indices(3, step, n, 3) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 3));
        assert_eq!(batch_indices(3, 5, n, 3), batch_indices(3, 5, n, 3));
        assert_ne!(batch_indices(3, 0, n, 7), batch_indices(4, 0, n, 7));
    }

    #[test]
    fn crops_stay_inside() {
        let a = AudioBuffer::new((0..1000).map(|i| i as f64 / 1000.0).collect(), 22050).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c = crop_audio(&a, 400, &mut r).unwrap();
            assert_eq!(c.len(), 400);
        }
        assert_eq!(center_crop(&a, 400).unwrap().samples()[0], 0.3);
        assert_eq!(center_crop(&a, 0).unwrap().len(), 1000);
    }
}
