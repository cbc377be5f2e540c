//! Speaker pipeline: full audio representation minus aligned content
//! features, refined by a Transformer block and parallel streams, then pooled
//! across streams and time to one 128-dim embedding.

use crate::audio_encoder::{waveform_tensor, AudioEncoder, ENCODER_DIM};
use crate::content::ContentExtractor;
use crate::dsp::{mel_spectrogram, AudioBuffer};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Builder, Ctx, Linear, ParamId, TransformerBlock};
use crate::tensor::{Tape, Tensor, Var};

pub const SPEAKER_DIM: usize = 128;
pub const SPEAKER_FF_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamFusion {
    Attention,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemporalPooling {
    Attention,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerConfig {
    pub negation: bool,
    pub n_streams: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub fusion: StreamFusion,
    pub temporal: TemporalPooling,
    pub dropout: f64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        SpeakerConfig {
            negation: true,
            n_streams: 2,
            n_heads: 2,
            depth: 1,
            fusion: StreamFusion::Attention,
            temporal: TemporalPooling::Attention,
            dropout: 0.1,
        }
    }
}

/// `[T_e × T_c]` matrix of linear-interpolation weights mapping `t_c`
/// frames onto `t_e` uniformly spaced positions, endpoints to endpoints.
pub fn interpolation_matrix(t_c: usize, t_e: usize) -> Tensor {
    let mut m = vec![0.0; t_e * t_c];
    for i in 0..t_e {
        let p = if t_e == 1 {
            0.0
        } else {
            i as f64 * (t_c - 1) as f64 / (t_e - 1) as f64
        };
        let j = (p.floor() as usize).min(t_c - 1);
        let f = p - j as f64;
        m[i * t_c + j] += 1.0 - f;
        if f > 0.0 {
            m[i * t_c + j + 1] += f;
        }
    }
    Tensor::from_parts(vec![t_e, t_c], m)
}

/// Resamples a `[T_c × D]` content sequence to `t_e` frames.
pub fn align_content(tape: &mut Tape, content: Var, t_e: usize) -> Result<Var> {
    let t_c = tape.shape(content)[0];
    if t_e == 0 {
        return Err(Error::usage("align_content to zero frames"));
    }
    if t_c == t_e {
        return Ok(content);
    }
    let a = tape.constant(interpolation_matrix(t_c, t_e));
    tape.matmul(a, content)
}

/// Content-information-free sequence `full − content`.
pub fn negate(tape: &mut Tape, full: Var, content: Var) -> Result<Var> {
    if tape.shape(full) != tape.shape(content) {
        return Err(Error::shapes(
            "negate",
            tape.shape(full),
            tape.shape(content),
        ));
    }
    tape.sub(full, content)
}

/// Additive attention scoring `q · tanh(W x + b)` shared by the stream and
/// temporal pools.
#[derive(Clone, Debug)]
pub struct AttentionPool {
    pub proj: Linear,
    pub query: ParamId,
}

impl AttentionPool {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        AttentionPool {
            proj: Linear::new(&mut s, "proj", dim, dim),
            query: s.xavier("query", vec![dim, 1], dim, 1),
        }
    }

    /// `[T × D] → [T × 1]` scores.
    fn scores(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.proj.forward(ctx, x)?;
        let h = ctx.tape.tanh(h);
        let q = ctx.param(self.query);
        ctx.tape.matmul(h, q)
    }

    /// Per-position convex combination of the streams. Returns the pooled
    /// `[T × D]` sequence and the `[T × J]` weights.
    pub fn pool_streams(&self, ctx: &mut Ctx, streams: &[Var]) -> Result<(Var, Var)> {
        let first = *streams
            .first()
            .ok_or_else(|| Error::usage("attention pool over zero streams"))?;
        let shape = ctx.tape.shape(first).to_vec();
        for &s in streams {
            if ctx.tape.shape(s) != shape.as_slice() {
                return Err(Error::shapes(
                    "attention_pool_streams",
                    &shape,
                    ctx.tape.shape(s),
                ));
            }
        }
        let scores = streams
            .iter()
            .map(|&s| self.scores(ctx, s))
            .collect::<Result<Vec<_>>>()?;
        let scores = if scores.len() == 1 {
            scores[0]
        } else {
            ctx.tape.concat(&scores, 1)?
        };
        let weights = ctx.tape.softmax(scores, 1)?;
        let mut out: Option<Var> = None;
        for (j, &s) in streams.iter().enumerate() {
            let w = ctx.tape.narrow(weights, 1, j, 1)?;
            let term = ctx.tape.scale_rows(s, w)?;
            out = Some(match out {
                Some(acc) => ctx.tape.add(acc, term)?,
                None => term,
            });
        }
        Ok((out.expect("at least one stream"), weights))
    }

    /// Softmax-over-time pooling of `[T × D]` to `[1 × D]`; also returns the
    /// `[1 × T]` weights.
    pub fn pool_time(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let s = self.scores(ctx, x)?;
        let s = ctx.tape.transpose(s)?;
        let w = ctx.tape.softmax(s, 1)?;
        Ok((ctx.tape.matmul(w, x)?, w))
    }
}

#[derive(Clone, Debug)]
pub enum StreamCombiner {
    Attention(AttentionPool),
    Concat(Linear),
}

impl StreamCombiner {
    pub fn forward(&self, ctx: &mut Ctx, streams: &[Var]) -> Result<Var> {
        match self {
            StreamCombiner::Attention(p) => Ok(p.pool_streams(ctx, streams)?.0),
            StreamCombiner::Concat(lin) => {
                if streams.is_empty() {
                    return Err(Error::usage("concat pool over zero streams"));
                }
                let shape = ctx.tape.shape(streams[0]).to_vec();
                for &s in streams {
                    if ctx.tape.shape(s) != shape.as_slice() {
                        return Err(Error::shapes(
                            "concat_pool_streams",
                            &shape,
                            ctx.tape.shape(s),
                        ));
                    }
                }
                let cat = if streams.len() == 1 {
                    streams[0]
                } else {
                    ctx.tape.concat(streams, 1)?
                };
                lin.forward(ctx, cat)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum TemporalPool {
    Attention(AttentionPool),
    Mean,
}

impl TemporalPool {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        match self {
            TemporalPool::Attention(p) => Ok(p.pool_time(ctx, x)?.0),
            TemporalPool::Mean => {
                let d = ctx.tape.shape(x)[1];
                let m = ctx.tape.mean_axis(x, 0)?;
                ctx.tape.reshape(m, &[1, d])
            }
        }
    }
}

/// Sinusoidal positions followed by one encoder block.
#[derive(Clone, Debug)]
pub struct PreTransformer {
    pub block: TransformerBlock,
}

impl PreTransformer {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let pe = ctx.tape.constant(sinusoidal_positions(shape[0], shape[1]));
        let x = ctx.tape.add(x, pe)?;
        self.block.forward(ctx, x)
    }

    /// The block alone, without position encodings.
    pub fn forward_without_positions(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.block.forward(ctx, x)
    }
}

#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    pub config: SpeakerConfig,
    pub audio: AudioEncoder,
    /// Absent when negation is disabled.
    pub content: Option<ContentExtractor>,
    pub pre: PreTransformer,
    pub streams: Vec<Vec<TransformerBlock>>,
    pub combiner: StreamCombiner,
    pub temporal: TemporalPool,
}

/// Intermediate values of one speaker forward pass.
#[derive(Clone, Debug)]
pub struct SpeakerTrace {
    pub full: Var,
    pub content: Option<Var>,
    pub cif: Var,
    pub streams: Vec<Var>,
    pub pooled: Var,
    pub embedding: Var,
}

impl SpeakerEncoder {
    pub fn new(b: &mut Builder, name: &str, config: SpeakerConfig) -> Result<Self> {
        if config.n_streams < 1 {
            return Err(Error::usage("n_streams must be at least 1"));
        }
        if config.depth < 1 {
            return Err(Error::usage("stream depth must be at least 1"));
        }
        let mut s = b.scope(name);
        let d = SPEAKER_DIM;
        let (h, ff, p) = (config.n_heads, SPEAKER_FF_DIM, config.dropout);
        let audio = AudioEncoder::new(&mut s, "audio");
        let content = config
            .negation
            .then(|| ContentExtractor::new(&mut s, "content"));
        let pre = PreTransformer {
            block: TransformerBlock::new(&mut s, "pre", d, h, ff, p)?,
        };
        let streams = (0..config.n_streams)
            .map(|j| {
                (0..config.depth)
                    .map(|k| {
                        TransformerBlock::new(&mut s, &format!("stream{j}.block{k}"), d, h, ff, p)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let combiner = match config.fusion {
            StreamFusion::Attention => {
                StreamCombiner::Attention(AttentionPool::new(&mut s, "stream_pool", d))
            }
            StreamFusion::Concat => StreamCombiner::Concat(Linear::new(
                &mut s,
                "stream_concat",
                d * config.n_streams,
                d,
            )),
        };
        let temporal = match config.temporal {
            TemporalPooling::Attention => {
                TemporalPool::Attention(AttentionPool::new(&mut s, "time_pool", d))
            }
            TemporalPooling::Mean => TemporalPool::Mean,
        };
        Ok(SpeakerEncoder {
            config,
            audio,
            content,
            pre,
            streams,
            combiner,
            temporal,
        })
    }

    /// `wave: [1 × N]` (N a multiple of 320) and the reference log-mel
    /// `[T × 80]` → embedding `[1 × 128]`.
    pub fn forward(&self, ctx: &mut Ctx, wave: Var, mel: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, wave, mel)?.embedding)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, wave: Var, mel: Var) -> Result<SpeakerTrace> {
        debug_assert_eq!(ENCODER_DIM, SPEAKER_DIM);
        let full = self.audio.forward(ctx, wave)?;
        let t_e = ctx.tape.shape(full)[0];
        let (content, cif) = match &self.content {
            Some(extractor) => {
                let c = extractor.forward(ctx, mel)?;
                let c = align_content(ctx.tape, c, t_e)?;
                (Some(c), negate(ctx.tape, full, c)?)
            }
            None => (None, full),
        };
        let refined = self.pre.forward(ctx, cif)?;
        let mut streams = Vec::with_capacity(self.streams.len());
        for blocks in &self.streams {
            let mut x = refined;
            for blk in blocks {
                x = blk.forward(ctx, x)?;
            }
            streams.push(x);
        }
        let pooled = self.combiner.forward(ctx, &streams)?;
        let embedding = self.temporal.forward(ctx, pooled)?;
        Ok(SpeakerTrace {
            full,
            content,
            cif,
            streams,
            pooled,
            embedding,
        })
    }

    /// Reference inputs for [`SpeakerEncoder::forward`]: the padded
    /// waveform and its log-mel.
    pub fn reference_inputs(audio: &AudioBuffer) -> Result<(Tensor, Tensor)> {
        let wave = waveform_tensor(audio)?;
        let mel = mel_spectrogram(audio)?.into_tensor();
        Ok((wave, mel))
    }

    /// Inference-mode embedding of a reference recording.
    pub fn embed(&self, ctx: &mut Ctx, audio: &AudioBuffer) -> Result<Var> {
        let (wave, mel) = Self::reference_inputs(audio)?;
        let w = ctx.tape.constant(wave);
        let m = ctx.tape.constant(mel);
        self.forward(ctx, w, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SAMPLE_RATE;
    use crate::nn::{grad_check_model, ParamStore};
    use crate::tensor::Coords;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: SpeakerConfig, seed: u64) -> (ParamStore, SpeakerEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = SpeakerEncoder::new(&mut Builder::new(&mut store, &mut rng), "speaker", config)
            .unwrap();
        (store, enc)
    }

    fn tone(n: usize, f: f64) -> AudioBuffer {
        let x = (0..n)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * f * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        AudioBuffer::new(x, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn interpolation_examples() {
        let mut tape = Tape::new();
        let ramp = tape.constant(Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let y = align_content(&mut tape, ramp, 7).unwrap();
        let expect: Vec<f64> = (0..7).map(|i| 0.5 * i as f64).collect();
        assert_eq!(tape.value(y).data(), expect.as_slice());
        let same = align_content(&mut tape, ramp, 4).unwrap();
        assert_eq!(tape.value(same), tape.value(ramp));
        let c = tape.constant(Tensor::full(vec![3, 2], 1.5));
        let y = align_content(&mut tape, c, 8).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|&v| (v - 1.5).abs() < 1e-15));
        let one = align_content(&mut tape, c, 1).unwrap();
        assert_eq!(tape.value(one).data(), &[1.5, 1.5]);
    }

    #[test]
    fn negate_examples() {
        let mut tape = Tape::new();
        let full = tape.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
        let content = tape.constant(Tensor::from_rows(&[[0.5, 1.0]]).unwrap());
        let cif = negate(&mut tape, full, content).unwrap();
        assert_eq!(tape.value(cif).data(), &[0.5, 1.0]);
        let z = negate(&mut tape, full, full).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);
        let wide = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            negate(&mut tape, full, wide),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn stream_pool_identities() {
        let (store, enc) = build(SpeakerConfig::default(), 1);
        let StreamCombiner::Attention(pool) = &enc.combiner else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, &store);
        let s = ctx
            .tape
            .constant(Tensor::randn(vec![6, 128], 1.0, &mut rng));
        let (out, w) = pool.pool_streams(&mut ctx, &[s, s]).unwrap();
        assert!(ctx.tape.value(out).max_abs_diff(ctx.tape.value(s)) <= 1e-12);
        let (single, _) = pool.pool_streams(&mut ctx, &[s]).unwrap();
        assert_eq!(ctx.tape.value(single), ctx.tape.value(s));
        let s2 = ctx
            .tape
            .constant(Tensor::randn(vec![6, 128], 1.0, &mut rng));
        let (_, w2) = pool.pool_streams(&mut ctx, &[s, s2]).unwrap();
        for wv in [ctx.tape.value(w), ctx.tape.value(w2)] {
            for t in 0..6 {
                assert!((wv.row(t).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(wv.row(t).iter().all(|&x| x >= 0.0));
            }
        }
        let bad = ctx.tape.constant(Tensor::zeros(vec![5, 128]));
        assert!(pool.pool_streams(&mut ctx, &[s, bad]).is_err());
    }

    #[test]
    fn temporal_pool_identities() {
        let (store, enc) = build(SpeakerConfig::default(), 3);
        let TemporalPool::Attention(pool) = &enc.temporal else {
            unreachable!()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, &store);
        let one = ctx
            .tape
            .constant(Tensor::randn(vec![1, 128], 1.0, &mut rng));
        let (y, _) = pool.pool_time(&mut ctx, one).unwrap();
        assert_eq!(ctx.tape.value(y), ctx.tape.value(one));
        let row = Tensor::randn(vec![1, 128], 1.0, &mut rng);
        let mut d = Vec::new();
        for _ in 0..5 {
            d.extend_from_slice(row.data());
        }
        let c = ctx.tape.constant(Tensor::new(vec![5, 128], d).unwrap());
        let (y, w) = pool.pool_time(&mut ctx, c).unwrap();
        assert!(ctx.tape.value(y).max_abs_diff(&row) < 1e-12);
        assert!((ctx.tape.value(w).data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn concat_pool_shapes_and_bias_only_on_zero() {
        let cfg = SpeakerConfig {
            fusion: StreamFusion::Concat,
            ..SpeakerConfig::default()
        };
        let (store, enc) = build(cfg, 5);
        let StreamCombiner::Concat(lin) = &enc.combiner else {
            unreachable!()
        };
        assert_eq!(store.get(lin.weight).shape(), &[256, 128]);
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, &store);
        let z = ctx.tape.constant(Tensor::zeros(vec![3, 128]));
        let y = enc.combiner.forward(&mut ctx, &[z, z]).unwrap();
        let bias = store.get(lin.bias.unwrap());
        for t in 0..3 {
            assert_eq!(ctx.tape.value(y).row(t), bias.data());
        }
    }

    #[test]
    fn pre_transformer_without_positions_is_permutation_equivariant() {
        let (store, enc) = build(SpeakerConfig::default(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(vec![6, 128], 1.0, &mut rng);
        let perm = [5usize, 2, 0, 4, 1, 3];
        let mut xp = Vec::new();
        for &p in &perm {
            xp.extend_from_slice(x.row(p));
        }
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::eval(&mut tape, &store);
            let v = ctx.tape.constant(input);
            let y = enc.pre.forward_without_positions(&mut ctx, v).unwrap();
            ctx.tape.value(y).clone()
        };
        let y = run(x.clone());
        let yp = run(Tensor::new(vec![6, 128], xp).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, &store);
        let v = ctx.tape.constant(x);
        let y = enc.pre.forward(&mut ctx, v).unwrap();
        assert_eq!(ctx.tape.shape(y), &[6, 128]);
    }

    #[test]
    fn embedding_is_128_for_any_length_and_deterministic() {
        for negation in [true, false] {
            let cfg = SpeakerConfig {
                negation,
                ..SpeakerConfig::default()
            };
            let (store, enc) = build(cfg, 8);
            for n in [1600, 2345, 4000] {
                let a = tone(n, 220.0);
                let run = || {
                    let mut tape = Tape::new();
                    let mut ctx = Ctx::eval(&mut tape, &store);
                    let e = enc.embed(&mut ctx, &a).unwrap();
                    ctx.tape.value(e).clone()
                };
                let e = run();
                assert_eq!(e.shape(), &[1, 128]);
                assert!(e.is_finite());
                assert_eq!(e, run());
            }
        }
        assert!(SpeakerEncoder::new(
            &mut Builder::new(&mut ParamStore::new(), &mut ChaCha8Rng::seed_from_u64(0)),
            "s",
            SpeakerConfig {
                n_streams: 0,
                ..SpeakerConfig::default()
            }
        )
        .is_err());
    }

    #[test]
    fn single_stream_has_one_output() {
        let cfg = SpeakerConfig {
            n_streams: 1,
            ..SpeakerConfig::default()
        };
        let (store, enc) = build(cfg, 9);
        let (wave, mel) = SpeakerEncoder::reference_inputs(&tone(1600, 300.0)).unwrap();
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape, &store);
        let w = ctx.tape.constant(wave);
        let m = ctx.tape.constant(mel);
        let tr = enc.forward_traced(&mut ctx, w, m).unwrap();
        assert_eq!(tr.streams.len(), 1);
        assert_eq!(ctx.tape.value(tr.pooled), ctx.tape.value(tr.streams[0]));
    }

    #[test]
    fn end_to_end_gradient() {
        let (store, enc) = build(SpeakerConfig::default(), 10);
        let (wave, mel) = SpeakerEncoder::reference_inputs(&tone(1600, 180.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let probe = Tensor::randn(vec![1, 128], 1.0, &mut rng);
        let report = grad_check_model(
            &store,
            &[wave, mel],
            1e-5,
            Coords::Largest { per_input: 4 },
            |ctx, v| {
                let e = enc.forward(ctx, v[0], v[1])?;
                let p = ctx.tape.constant(probe.clone());
                let w = ctx.tape.mul(e, p)?;
                Ok(ctx.tape.sum(w))
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.kinks_skipped < report.coords_checked, "{report:?}");
    }
}
