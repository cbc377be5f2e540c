use super::saln::Norm;
use crate::error::Result;
use crate::nn::{Builder, Conv1d, Ctx, MultiHeadAttention};
use crate::tensor::{Padding, Var};

/// Feed-forward Transformer block: self-attention and a two-layer
/// convolutional feed-forward, each with a residual and a (possibly
/// style-adaptive) post-norm.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attention: MultiHeadAttention,
    pub norm1: Norm,
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub norm2: Norm,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FftShape {
    pub dim: usize,
    pub heads: usize,
    pub filter: usize,
    pub kernel: usize,
    pub dropout: f64,
}

impl FftBlock {
    pub fn new(b: &mut Builder, name: &str, shape: FftShape, adaptive: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let FftShape {
            dim,
            heads,
            filter,
            kernel,
            dropout,
        } = shape;
        Ok(FftBlock {
            attention: MultiHeadAttention::new(&mut s, "attention", dim, heads, dropout)?,
            norm1: Norm::new(&mut s, "norm1", adaptive),
            conv1: Conv1d::new(&mut s, "conv1", dim, filter, kernel, 1, Padding::Same),
            conv2: Conv1d::new(&mut s, "conv2", filter, dim, 1, 1, Padding::Same),
            norm2: Norm::new(&mut s, "norm2", adaptive),
            dropout,
        })
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self.norm1, Norm::Adaptive(_))
    }

    /// `x: [T × dim]`; `s` is required when the block is adaptive.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, s: Option<Var>) -> Result<Var> {
        let a = self.attention.forward(ctx, x)?;
        let a = ctx.dropout(a, self.dropout)?;
        let h = ctx.tape.add(x, a)?;
        let h = self.norm1.forward(ctx, h, s)?;
        let f = self.conv1.forward_time_major(ctx, h)?;
        let f = ctx.tape.relu(f);
        let f = self.conv2.forward_time_major(ctx, f)?;
        let f = ctx.dropout(f, self.dropout)?;
        let y = ctx.tape.add(h, f)?;
        self.norm2.forward(ctx, y, s)
    }
}
