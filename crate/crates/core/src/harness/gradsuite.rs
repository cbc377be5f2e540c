//! Finite-difference gradient suite over every tape op, every layer type and
//! the whole acoustic model at tiny shapes.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio_encoder::AudioEncoder;
use crate::backbone::{
    AcousticModel, FftBlock, FftShape, ModelConfig, PhonemeSequence, Reference, Saln,
    VarianceAdapter, VariancePredictor, VarianceTargets, HIDDEN,
};
use crate::content::{instance_norm, ContentExtractor, ConvBank};
use crate::dsp::{AudioBuffer, SAMPLE_RATE};
use crate::error::Result;
use crate::nn::{
    grad_check_model, Builder, Conv1d, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamStore,
    TransformerBlock,
};
use crate::speaker::{AttentionPool, SpeakerConfig, SpeakerEncoder};
use crate::tensor::{
    grad_check_many, op_cases, probe, Coords, GradCheckReport, Padding, Tensor, Var,
};

/// Pass threshold on the relative error metric.
pub const SUITE_THRESHOLD: f64 = 1e-4;
/// Central-difference step.
pub const SUITE_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < SUITE_THRESHOLD && self.report.coords_checked > 0
    }
}

type Check = Box<dyn Fn(f64) -> Result<GradCheckReport>>;

fn store_with<T>(seed: u64, f: impl FnOnce(&mut Builder) -> Result<T>) -> Result<(ParamStore, T)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Builder::new(&mut store, &mut rng))?;
    Ok((store, m))
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn tone(n: usize, f0: f64) -> AudioBuffer {
    let x = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE as f64;
            0.3 * (std::f64::consts::TAU * f0 * t).sin()
                + 0.1 * (2.0 * std::f64::consts::TAU * f0 * t).sin()
        })
        .collect();
    AudioBuffer::new(x, SAMPLE_RATE).expect("tone is a valid buffer")
}

/// Check of a parameterised module against all of its parameters and the
/// given inputs.
fn module<M: 'static>(
    seed: u64,
    build: impl FnOnce(&mut Builder) -> Result<M>,
    data: Vec<Tensor>,
    coords: Coords,
    f: impl Fn(&M, &mut Ctx, &[Var]) -> Result<Var> + 'static,
) -> Result<Check> {
    let (store, m) = store_with(seed, build)?;
    Ok(Box::new(move |h| {
        grad_check_model(&store, &data, h, coords, |ctx, v| {
            let y = f(&m, ctx, v)?;
            probe(ctx.tape, y, seed + 1)
        })
    }))
}

fn checks() -> Result<Vec<(String, Check)>> {
    let mut out: Vec<(String, Check)> = Vec::new();
    for case in op_cases() {
        let name = format!("op/{}", case.name);
        out.push((name, Box::new(move |h| case.check(5, h))));
    }
    let all = Coords::All;
    out.push((
        "layer/linear".into(),
        module(
            1,
            |b| Ok(Linear::new(b, "l", 5, 3)),
            vec![randn(&[4, 5], 2)],
            all,
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    out.push((
        "layer/conv1d_same".into(),
        module(
            3,
            |b| Ok(Conv1d::new(b, "c", 3, 2, 4, 1, Padding::Same)),
            vec![randn(&[3, 9], 4)],
            all,
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    out.push((
        "layer/conv1d_strided".into(),
        module(
            5,
            |b| Ok(Conv1d::new(b, "c", 2, 3, 8, 4, Padding::Explicit(4, 0))),
            vec![randn(&[2, 16], 6)],
            all,
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    out.push((
        "layer/layer_norm".into(),
        // the row-centring leaves single partials near zero, where the
        // relative metric only measures rounding noise
        module(
            7,
            |b| Ok(LayerNorm::new(b, "n", 6)),
            vec![randn(&[3, 6], 8)],
            Coords::Largest { per_input: 12 },
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    out.push((
        "layer/instance_norm".into(),
        Box::new(|h| {
            grad_check_many(
                |t, v| {
                    let (y, _) = instance_norm(t, v[0], 1e-5)?;
                    probe(t, y, 9)
                },
                &[Arc::new(randn(&[4, 7], 10))],
                h,
                Coords::All,
            )
        }),
    ));
    out.push((
        "layer/multi_head_attention".into(),
        module(
            11,
            |b| MultiHeadAttention::new(b, "a", 8, 2, 0.0),
            vec![randn(&[5, 8], 12)],
            all,
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    out.push((
        "layer/transformer_block".into(),
        module(
            13,
            |b| TransformerBlock::new(b, "t", 8, 2, 16, 0.0),
            vec![randn(&[4, 8], 14)],
            all,
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    out.push((
        "layer/conv_bank".into(),
        module(
            15,
            |b| Ok(ConvBank::new(b, "bank", 2)),
            vec![randn(&[2, 6], 16)],
            Coords::Largest { per_input: 40 },
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    out.push((
        "layer/attention_pool_streams".into(),
        module(
            17,
            |b| Ok(AttentionPool::new(b, "p", 6)),
            vec![randn(&[4, 6], 18), randn(&[4, 6], 19), randn(&[4, 6], 20)],
            all,
            |m, c, v| Ok(m.pool_streams(c, v)?.0),
        )?,
    ));
    out.push((
        "layer/attention_pool_time".into(),
        module(
            21,
            |b| Ok(AttentionPool::new(b, "p", 6)),
            vec![randn(&[5, 6], 22)],
            all,
            |m, c, v| Ok(m.pool_time(c, v[0])?.0),
        )?,
    ));
    out.push((
        "module/content_extractor".into(),
        module(
            23,
            |b| Ok(ContentExtractor::new(b, "content")),
            vec![randn(&[8, 80], 24)],
            Coords::Largest { per_input: 20 },
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    let wave = Tensor::uniform(vec![1, 1600], 0.5, &mut ChaCha8Rng::seed_from_u64(26));
    out.push((
        "module/audio_encoder".into(),
        module(
            25,
            |b| Ok(AudioEncoder::new(b, "audio")),
            vec![wave],
            Coords::Largest { per_input: 20 },
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    let (w, mel) = SpeakerEncoder::reference_inputs(&tone(1600, 180.0))?;
    out.push((
        "module/speaker_encoder".into(),
        module(
            27,
            |b| SpeakerEncoder::new(b, "speaker", SpeakerConfig::default()),
            vec![w, mel],
            Coords::Largest { per_input: 4 },
            |m, c, v| m.forward(c, v[0], v[1]),
        )?,
    ));
    out.push((
        "module/saln".into(),
        module(
            29,
            |b| Ok(Saln::new(b, "saln", HIDDEN)),
            vec![randn(&[3, HIDDEN], 30), randn(&[1, 128], 31)],
            Coords::Largest { per_input: 25 },
            |m, c, v| m.forward(c, v[0], v[1]),
        )?,
    ));
    let shape = FftShape {
        dim: HIDDEN,
        heads: 2,
        filter: 32,
        kernel: 3,
        dropout: 0.0,
    };
    for adaptive in [false, true] {
        let name = if adaptive {
            "module/fft_block_adaptive"
        } else {
            "module/fft_block"
        };
        out.push((
            name.into(),
            module(
                32,
                move |b| FftBlock::new(b, "fft", shape, adaptive),
                vec![randn(&[4, HIDDEN], 33), randn(&[1, 128], 34)],
                Coords::Largest { per_input: 10 },
                move |m, c, v| m.forward(c, v[0], adaptive.then_some(v[1])),
            )?,
        ));
    }
    out.push((
        "module/variance_predictor".into(),
        module(
            35,
            |b| Ok(VariancePredictor::new(b, "vp", 0.0)),
            vec![randn(&[4, HIDDEN], 36)],
            Coords::Largest { per_input: 10 },
            |m, c, v| m.forward(c, v[0]),
        )?,
    ));
    let targets = VarianceTargets::new(vec![5.0, 5.2, 4.9], vec![-2.0, -1.5, -2.4], vec![2, 1, 3])?;
    out.push((
        "module/variance_adapter".into(),
        module(
            37,
            |b| Ok(VarianceAdapter::new(b, "va", 0.0)),
            vec![randn(&[3, HIDDEN], 38)],
            Coords::Largest { per_input: 10 },
            move |m, c, v| {
                let o = m.forward(c, v[0], Some(&targets))?;
                let a = probe(c.tape, o.log_duration, 40)?;
                let b = probe(c.tape, o.pitch, 41)?;
                let e = probe(c.tape, o.energy, 42)?;
                let s = c.tape.add(a, b)?;
                let s = c.tape.add(s, e)?;
                let x = probe(c.tape, o.expanded, 43)?;
                c.tape.add(s, x)
            },
        )?,
    ));
    out.push(("model/end_to_end".into(), end_to_end()?));
    Ok(out)
}

fn end_to_end() -> Result<Check> {
    let (store, m) = store_with(44, |b| AcousticModel::new(b, ModelConfig::default()))?;
    let r = Reference::from_audio(&tone(1600, 210.0))?;
    let p = PhonemeSequence::new(vec![3, 1, 4, 1], m.config.backbone.vocab_size)?;
    let tg = VarianceTargets::new(
        vec![5.0, 5.1, 5.2, 5.3],
        vec![-2.0, -1.8, -1.6, -1.4],
        vec![2, 3, 1, 2],
    )?;
    Ok(Box::new(move |h| {
        grad_check_model(
            &store,
            &[r.wave.clone(), r.mel.clone()],
            h,
            Coords::Largest { per_input: 3 },
            |ctx, v| {
                let out = m.forward_with(ctx, &p, v[0], v[1], Some(&tg))?;
                let mut total = probe(ctx.tape, out.mel, 1)?;
                for (i, y) in [out.pitch, out.energy, out.log_duration]
                    .into_iter()
                    .enumerate()
                {
                    let l = probe(ctx.tape, y, 2 + i as u64)?;
                    total = ctx.tape.add(total, l)?;
                }
                Ok(total)
            },
        )
    }))
}

/// Names of every suite entry, in run order.
pub fn suite_names() -> Result<Vec<String>> {
    Ok(checks()?.into_iter().map(|(n, _)| n).collect())
}

/// Runs entries whose name contains `filter` (all when empty), reporting
/// each as it finishes.
pub fn run_suite(
    h: f64,
    filter: &str,
    mut on_entry: impl FnMut(&SuiteEntry),
) -> Result<Vec<SuiteEntry>> {
    let mut done = Vec::new();
    for (name, check) in checks()? {
        if !name.contains(filter) {
            continue;
        }
        let t0 = Instant::now();
        let report = check(h)?;
        let entry = SuiteEntry {
            name,
            report,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_entry(&entry);
        done.push(entry);
    }
    Ok(done)
}
