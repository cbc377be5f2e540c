//! Non-autoregressive acoustic model: phoneme encoder, speaker fusion
//! encoder, variance adapter with length regulator, and mel decoder, all
//! conditioned on one reference-derived speaker embedding.

mod fft;
mod loss;
mod saln;
mod variance;

pub use fft::{FftBlock, FftShape};
pub use loss::{reconstruction_loss, LossValues, LossVars};
pub use saln::{Norm, Saln, SALN_EPS};
pub use variance::{
    durations_from_log, expansion_indices, length_regulate, AdapterOutput, VarianceAdapter,
    VariancePredictor,
};

use crate::dsp::N_MELS;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Builder, Ctx, Linear, ParamId};
use crate::speaker::{SpeakerConfig, SpeakerEncoder};
use crate::tensor::{Tensor, Var};

pub const HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    ids: Vec<usize>,
    vocab_size: usize,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::usage("empty phoneme sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::usage(format!(
                "phoneme id {bad} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(PhonemeSequence { ids, vocab_size })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Per-phoneme ground truth: pitch in ln Hz, energy, and frame durations.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceTargets {
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub durations: Vec<usize>,
}

impl VarianceTargets {
    pub fn new(pitch: Vec<f64>, energy: Vec<f64>, durations: Vec<usize>) -> Result<Self> {
        let l = durations.len();
        if pitch.len() != l || energy.len() != l {
            return Err(Error::dim(
                "VarianceTargets",
                format!(
                    "pitch {}, energy {}, durations {l}",
                    pitch.len(),
                    energy.len()
                ),
            ));
        }
        if durations.contains(&0) {
            return Err(Error::usage("durations must be at least one frame"));
        }
        if pitch.iter().chain(&energy).any(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "VarianceTargets",
                detail: "non-finite pitch or energy".into(),
            });
        }
        Ok(VarianceTargets {
            pitch,
            energy,
            durations,
        })
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn log_durations(&self) -> Vec<f64> {
        self.durations.iter().map(|&d| (d as f64).ln()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InjectionSite {
    Encoder,
    Decoder,
    Both,
}

impl InjectionSite {
    pub fn encoder(self) -> bool {
        matches!(self, InjectionSite::Encoder | InjectionSite::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, InjectionSite::Decoder | InjectionSite::Both)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_filter: usize,
    pub ff_kernel: usize,
    pub dropout: f64,
    pub variance_dropout: f64,
    pub injection: InjectionSite,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 32,
            text_layers: 4,
            fusion_layers: 1,
            decoder_layers: 4,
            heads: 2,
            ff_filter: 256,
            ff_kernel: 9,
            dropout: 0.1,
            variance_dropout: 0.5,
            injection: InjectionSite::Both,
        }
    }
}

impl BackboneConfig {
    fn fft_shape(&self) -> FftShape {
        FftShape {
            dim: HIDDEN,
            heads: self.heads,
            filter: self.ff_filter,
            kernel: self.ff_kernel,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub speaker: SpeakerConfig,
    pub backbone: BackboneConfig,
}

fn run_blocks(ctx: &mut Ctx, blocks: &[FftBlock], mut x: Var, s: Var) -> Result<Var> {
    for b in blocks {
        let cond = b.is_adaptive().then_some(s);
        x = b.forward(ctx, x, cond)?;
    }
    Ok(x)
}

fn add_positions(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let pe = ctx.tape.constant(sinusoidal_positions(shape[0], shape[1]));
    ctx.tape.add(x, pe)
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub blocks: Vec<FftBlock>,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let mut s = b.scope(name);
        let embedding = s.xavier(
            "embedding",
            vec![cfg.vocab_size, HIDDEN],
            cfg.vocab_size,
            HIDDEN,
        );
        let blocks = (0..cfg.text_layers)
            .map(|i| FftBlock::new(&mut s, &format!("block{i}"), cfg.fft_shape(), false))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            embedding,
            blocks,
            vocab_size: cfg.vocab_size,
        })
    }

    /// `[L × H]` hidden sequence.
    pub fn forward(&self, ctx: &mut Ctx, p: &PhonemeSequence) -> Result<Var> {
        if p.vocab_size() != self.vocab_size {
            return Err(Error::usage(format!(
                "phonemes use a vocabulary of {}, model has {}",
                p.vocab_size(),
                self.vocab_size
            )));
        }
        let table = ctx.param(self.embedding);
        let x = ctx.tape.gather_rows(table, p.ids())?;
        let mut x = add_positions(ctx, x)?;
        for b in &self.blocks {
            x = b.forward(ctx, x, None)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct MelDecoder {
    pub blocks: Vec<FftBlock>,
    pub proj: Linear,
}

impl MelDecoder {
    pub fn new(b: &mut Builder, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let mut s = b.scope(name);
        let blocks = (0..cfg.decoder_layers)
            .map(|i| {
                FftBlock::new(
                    &mut s,
                    &format!("block{i}"),
                    cfg.fft_shape(),
                    cfg.injection.decoder(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(MelDecoder {
            blocks,
            proj: Linear::new(&mut s, "proj", HIDDEN, N_MELS),
        })
    }

    /// `[T × H]` expanded sequence → `[T × 80]` mel.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, s: Var) -> Result<Var> {
        let x = add_positions(ctx, x)?;
        let x = run_blocks(ctx, &self.blocks, x, s)?;
        self.proj.forward(ctx, x)
    }
}

/// Reference recording prepared for the speaker pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub wave: Tensor,
    pub mel: Tensor,
}

impl Reference {
    pub fn from_audio(audio: &crate::dsp::AudioBuffer) -> Result<Self> {
        let (wave, mel) = SpeakerEncoder::reference_inputs(audio)?;
        Ok(Reference { wave, mel })
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub mel: Var,
    pub pitch: Var,
    pub energy: Var,
    pub log_duration: Var,
    pub speaker: Var,
    /// Encoder-side hidden sequence after fusion, before the adapter.
    pub fused: Var,
    pub durations: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub speaker: SpeakerEncoder,
    pub text: TextEncoder,
    pub fusion: Vec<FftBlock>,
    pub adapter: VarianceAdapter,
    pub decoder: MelDecoder,
}

impl AcousticModel {
    pub fn new(b: &mut Builder, config: ModelConfig) -> Result<Self> {
        let bc = &config.backbone;
        let speaker = SpeakerEncoder::new(b, "speaker", config.speaker.clone())?;
        let text = TextEncoder::new(b, "text", bc)?;
        let fusion = {
            let mut s = b.scope("fusion");
            (0..bc.fusion_layers)
                .map(|i| {
                    FftBlock::new(
                        &mut s,
                        &format!("block{i}"),
                        bc.fft_shape(),
                        bc.injection.encoder(),
                    )
                })
                .collect::<Result<_>>()?
        };
        let adapter = VarianceAdapter::new(b, "variance", bc.variance_dropout);
        let decoder = MelDecoder::new(b, "decoder", bc)?;
        Ok(AcousticModel {
            config,
            speaker,
            text,
            fusion,
            adapter,
            decoder,
        })
    }

    /// Encoder half up to the fused hidden sequence.
    pub fn fusion_encode(&self, ctx: &mut Ctx, h: Var, s: Var) -> Result<Var> {
        run_blocks(ctx, &self.fusion, h, s)
    }

    /// Full forward pass. `wave` and `mel` are the reference inputs as tape
    /// vars; with `targets` the adapter is teacher-forced.
    pub fn forward_with(
        &self,
        ctx: &mut Ctx,
        p: &PhonemeSequence,
        wave: Var,
        ref_mel: Var,
        targets: Option<&VarianceTargets>,
    ) -> Result<ModelOutput> {
        let s = self.speaker.forward(ctx, wave, ref_mel)?;
        let h = self.text.forward(ctx, p)?;
        let fused = self.fusion_encode(ctx, h, s)?;
        let a = self.adapter.forward(ctx, fused, targets)?;
        let mel = self.decoder.forward(ctx, a.expanded, s)?;
        Ok(ModelOutput {
            mel,
            pitch: a.pitch,
            energy: a.energy,
            log_duration: a.log_duration,
            speaker: s,
            fused,
            durations: a.durations,
        })
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        p: &PhonemeSequence,
        reference: &Reference,
        targets: Option<&VarianceTargets>,
    ) -> Result<ModelOutput> {
        let w = ctx
            .tape
            .leaf_shared(std::sync::Arc::new(reference.wave.clone()), false);
        let m = ctx
            .tape
            .leaf_shared(std::sync::Arc::new(reference.mel.clone()), false);
        self.forward_with(ctx, p, w, m, targets)
    }

    /// Teacher-forced forward plus the reconstruction loss against `mel`.
    pub fn loss(
        &self,
        ctx: &mut Ctx,
        p: &PhonemeSequence,
        reference: &Reference,
        targets: &VarianceTargets,
        mel: &Tensor,
    ) -> Result<(ModelOutput, LossVars)> {
        if mel.rows() != targets.total_frames() {
            return Err(Error::dim(
                "model loss",
                format!(
                    "mel has {} frames, durations sum to {}",
                    mel.rows(),
                    targets.total_frames()
                ),
            ));
        }
        let out = self.forward(ctx, p, reference, Some(targets))?;
        let l = targets.len();
        let t = &mut *ctx.tape;
        let m = t.constant(mel.clone());
        let pt = t.constant(Tensor::from_parts(vec![l, 1], targets.pitch.clone()));
        let et = t.constant(Tensor::from_parts(vec![l, 1], targets.energy.clone()));
        let dt = t.constant(Tensor::from_parts(vec![l, 1], targets.log_durations()));
        let loss = reconstruction_loss(
            t,
            m,
            out.mel,
            pt,
            out.pitch,
            et,
            out.energy,
            dt,
            out.log_duration,
        )?;
        Ok((out, loss))
    }
}
