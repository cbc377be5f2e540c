//! Content extractor: a convolution bank followed by conv → instance norm →
//! ReLU blocks over the mel-spectrogram, with one average-pooling stage.

use crate::dsp::N_MELS;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv1d, Ctx, Linear};
use crate::tensor::{Padding, Tape, Tensor, Var};

pub const BANK_KERNELS: usize = 8;
pub const BANK_CHANNELS: usize = 32;
pub const BLOCK_CHANNELS: usize = 128;
pub const CONTENT_DIM: usize = 128;
pub const IN_EPS: f64 = 1e-5;

/// `C × W` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::dim(
                "FeatureMap",
                format!("expected C×W, got {:?}", values.shape()),
            ));
        }
        if !values.is_finite() {
            return Err(Error::Domain {
                op: "FeatureMap",
                detail: "non-finite value".into(),
            });
        }
        Ok(FeatureMap(values))
    }

    pub fn channels(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-channel statistics removed by an instance-norm stage.
#[derive(Clone, Debug, PartialEq)]
pub struct InStats {
    pub mu: Vec<f64>,
    /// `sqrt(var + eps)`.
    pub sigma: Vec<f64>,
    pub epsilon: f64,
}

impl InStats {
    pub fn of(x: &Tensor, eps: f64) -> Self {
        let w = x.cols() as f64;
        let (mut mu, mut sigma) = (Vec::new(), Vec::new());
        for c in 0..x.rows() {
            let row = x.row(c);
            let m = row.iter().sum::<f64>() / w;
            let v = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w;
            mu.push(m);
            sigma.push((v + eps).sqrt());
        }
        InStats {
            mu,
            sigma,
            epsilon: eps,
        }
    }
}

/// Instance normalization of a `[C × W]` var: each channel is centred and
/// scaled by `sqrt(var + eps)` over its own W values.
pub fn instance_norm(tape: &mut Tape, x: Var, eps: f64) -> Result<(Var, InStats)> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::usage(format!(
            "instance norm epsilon must be positive, got {eps}"
        )));
    }
    if tape.shape(x).len() != 2 {
        return Err(Error::dim(
            "instance_norm",
            format!("expected C×W, got {:?}", tape.shape(x)),
        ));
    }
    let stats = InStats::of(tape.value(x), eps);
    Ok((tape.normalize(x, 1, eps)?, stats))
}

/// Tape-free convenience form.
pub fn instance_norm_map(f: &FeatureMap, eps: f64) -> Result<(FeatureMap, InStats)> {
    let mut tape = Tape::new();
    let x = tape.constant(f.values().clone());
    let (y, stats) = instance_norm(&mut tape, x, eps)?;
    Ok((FeatureMap(tape.value(y).clone()), stats))
}

#[derive(Clone, Debug)]
pub struct ConvBank {
    pub convs: Vec<Conv1d>,
}

impl ConvBank {
    pub fn new(b: &mut Builder, name: &str, c_in: usize) -> Self {
        let mut s = b.scope(name);
        let convs = (1..=BANK_KERNELS)
            .map(|k| {
                Conv1d::new(
                    &mut s,
                    &format!("k{k}"),
                    c_in,
                    BANK_CHANNELS,
                    k,
                    1,
                    Padding::Same,
                )
            })
            .collect();
        ConvBank { convs }
    }

    pub fn out_channels(&self) -> usize {
        self.convs.len() * BANK_CHANNELS
    }

    /// `[C_in × T] → [256 × T]`, ReLU applied after concatenation.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        // the tensor type already forbids T = 0, so any input reaching here is valid
        let outs = self
            .convs
            .iter()
            .map(|c| c.forward(ctx, x))
            .collect::<Result<Vec<_>>>()?;
        let cat = ctx.tape.concat(&outs, 0)?;
        Ok(ctx.tape.relu(cat))
    }
}

#[derive(Clone, Debug)]
struct NormBlock {
    convs: [Conv1d; 2],
}

impl NormBlock {
    fn new(b: &mut Builder, name: &str, c_in: usize) -> Self {
        let mut s = b.scope(name);
        NormBlock {
            convs: [
                Conv1d::without_bias(&mut s, "conv1", c_in, BLOCK_CHANNELS, 3, 1, Padding::Same),
                Conv1d::without_bias(
                    &mut s,
                    "conv2",
                    BLOCK_CHANNELS,
                    BLOCK_CHANNELS,
                    3,
                    1,
                    Padding::Same,
                ),
            ],
        }
    }

    fn forward(&self, ctx: &mut Ctx, mut x: Var, trace: &mut Vec<(Var, Var)>) -> Result<Var> {
        for conv in &self.convs {
            let y = conv.forward(ctx, x)?;
            let (n, _) = instance_norm(ctx.tape, y, IN_EPS)?;
            trace.push((y, n));
            x = ctx.tape.relu(n);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct ContentExtractor {
    pub bank: ConvBank,
    block1: NormBlock,
    block2: NormBlock,
    pub proj: Linear,
}

impl ContentExtractor {
    pub fn new(b: &mut Builder, name: &str) -> Self {
        let mut s = b.scope(name);
        let bank = ConvBank::new(&mut s, "bank", N_MELS);
        let block1 = NormBlock::new(&mut s, "block1", bank.out_channels());
        let block2 = NormBlock::new(&mut s, "block2", BLOCK_CHANNELS);
        let proj = Linear::new(&mut s, "proj", BLOCK_CHANNELS, CONTENT_DIM);
        ContentExtractor {
            bank,
            block1,
            block2,
            proj,
        }
    }

    /// `[T × 80]` log-mel → `[floor(T/2) × 128]` content sequence.
    pub fn forward(&self, ctx: &mut Ctx, mel: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, mel)?.0)
    }

    /// Also returns `(input, output)` of every instance-norm stage, in order.
    pub fn forward_traced(&self, ctx: &mut Ctx, mel: Var) -> Result<(Var, Vec<(Var, Var)>)> {
        let shape = ctx.tape.shape(mel).to_vec();
        if shape.len() != 2 || shape[1] != N_MELS {
            return Err(Error::dim(
                "content_forward",
                format!("expected T×{N_MELS}, got {shape:?}"),
            ));
        }
        if shape[0] < 2 {
            return Err(Error::usage(format!(
                "content extractor needs at least 2 mel frames for pooling, got {}",
                shape[0]
            )));
        }
        let mut trace = Vec::with_capacity(4);
        let x = ctx.tape.transpose(mel)?;
        let x = self.bank.forward(ctx, x)?;
        let x = self.block1.forward(ctx, x, &mut trace)?;
        let x = ctx.tape.avg_pool(x, 2, 2)?;
        let x = self.block2.forward(ctx, x, &mut trace)?;
        let x = ctx.tape.transpose(x)?;
        Ok((self.proj.forward(ctx, x)?, trace))
    }
}
