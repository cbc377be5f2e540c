use super::HIDDEN;
use crate::error::Result;
use crate::nn::{Builder, Ctx, LayerNorm, Linear};
use crate::speaker::SPEAKER_DIM;
use crate::tensor::Var;

pub const SALN_EPS: f64 = 1e-5;

/// Style-adaptive layer norm: `g(s) ⊙ norm(i) + b(s)` with separate affine
/// heads for gain and bias. At init the heads output exactly 1 and 0 only
/// when `s = 0`; their Xavier weights let the embedding modulate from step 0.
#[derive(Clone, Debug)]
pub struct Saln {
    pub gain: Linear,
    pub bias: Linear,
    pub eps: f64,
}

impl Saln {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        let gain = Linear::with_bias_init(&mut s, "gain", SPEAKER_DIM, dim, 1.0);
        let bias = Linear::new(&mut s, "bias", SPEAKER_DIM, dim);
        Saln {
            gain,
            bias,
            eps: SALN_EPS,
        }
    }

    /// `(g, b)`, each `[1 × H]`, for embedding `s: [1 × 128]`.
    pub fn params(&self, ctx: &mut Ctx, s: Var) -> Result<(Var, Var)> {
        Ok((self.gain.forward(ctx, s)?, self.bias.forward(ctx, s)?))
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, s: Var) -> Result<Var> {
        let (g, b) = self.params(ctx, s)?;
        let axis = ctx.tape.shape(x).len() - 1;
        let n = ctx.tape.normalize(x, axis, self.eps)?;
        let y = ctx.tape.mul(n, g)?;
        ctx.tape.add(y, b)
    }
}

/// The normalization slot of an FFT block.
#[derive(Clone, Debug)]
pub enum Norm {
    Plain(LayerNorm),
    Adaptive(Saln),
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, adaptive: bool) -> Self {
        if adaptive {
            Norm::Adaptive(Saln::new(b, name, HIDDEN))
        } else {
            Norm::Plain(LayerNorm::new(b, name, HIDDEN))
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, s: Option<Var>) -> Result<Var> {
        match (self, s) {
            (Norm::Plain(ln), _) => ln.forward(ctx, x),
            (Norm::Adaptive(saln), Some(s)) => saln.forward(ctx, x, s),
            (Norm::Adaptive(_), None) => Err(crate::error::Error::usage(
                "style-adaptive norm needs a speaker embedding",
            )),
        }
    }
}
