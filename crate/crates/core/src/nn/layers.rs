use super::{Builder, Ctx, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor, Var};

/// `y = x·W + b` on row vectors, `x: [T × in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_bias_init(b, name, in_dim, out_dim, 0.0)
    }

    /// Bias initialised to a constant instead of zero.
    pub fn with_bias_init(
        b: &mut Builder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: f64,
    ) -> Self {
        let mut s = b.scope(name);
        Linear {
            weight: s.xavier("weight", vec![in_dim, out_dim], in_dim, out_dim),
            bias: Some(s.fill("bias", vec![out_dim], bias)),
            in_dim,
            out_dim,
        }
    }

    pub fn without_bias(b: &mut Builder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = b.scope(name);
        Linear {
            weight: s.xavier("weight", vec![in_dim, out_dim], in_dim, out_dim),
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Channel-major 1-D convolution layer, `x: [C_in × W]`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let mut conv = Self::without_bias(b, name, c_in, c_out, kernel, stride, padding);
        conv.bias = Some(b.scope(name).fill("bias", vec![c_out], 0.0));
        conv
    }

    /// For convolutions followed by a normalization that would cancel a bias.
    pub fn without_bias(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let mut s = b.scope(name);
        Conv1d {
            weight: s.xavier(
                "weight",
                vec![c_out, c_in, kernel],
                c_in * kernel,
                c_out * kernel,
            ),
            bias: None,
            stride,
            padding,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv1d(x, w, b, self.stride, self.padding)
    }

    /// Same convolution applied to a time-major `[T × C]` sequence.
    pub fn forward_time_major(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let xt = ctx.tape.transpose(x)?;
        let y = self.forward(ctx, xt)?;
        ctx.tape.transpose(y)
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        LayerNorm {
            gain: s.fill("gain", vec![dim], 1.0),
            bias: s.fill("bias", vec![dim], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let axis = ctx.tape.shape(x).len() - 1;
        let n = ctx.tape.normalize(x, axis, self.eps)?;
        let g = ctx.param(self.gain);
        let b = ctx.param(self.bias);
        let y = ctx.tape.mul(n, g)?;
        ctx.tape.add(y, b)
    }
}

/// Sinusoidal position table `[len × dim]`: even columns sin, odd cos.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::usage(format!(
                "{heads} attention heads do not divide width {dim}"
            )));
        }
        let mut s = b.scope(name);
        Ok(MultiHeadAttention {
            query: Linear::new(&mut s, "query", dim, dim),
            // a key bias only shifts every score in a row equally
            key: Linear::without_bias(&mut s, "key", dim, dim),
            value: Linear::new(&mut s, "value", dim, dim),
            output: Linear::new(&mut s, "output", dim, dim),
            heads,
            dropout,
        })
    }

    /// Self-attention over a `[T × dim]` sequence.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let dim = ctx.tape.shape(x)[1];
        let dh = dim / self.heads;
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ctx.tape.narrow(q, 1, h * dh, dh)?;
            let kh = ctx.tape.narrow(k, 1, h * dh, dh)?;
            let vh = ctx.tape.narrow(v, 1, h * dh, dh)?;
            let kt = ctx.tape.transpose(kh)?;
            let scores = ctx.tape.matmul(qh, kt)?;
            let scores = ctx.tape.scale(scores, scale);
            let attn = ctx.tape.softmax(scores, 1)?;
            let attn = ctx.dropout(attn, self.dropout)?;
            outs.push(ctx.tape.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            ctx.tape.concat(&outs, 1)?
        };
        self.output.forward(ctx, merged)
    }
}

/// Post-norm Transformer encoder block: self-attention, residual, layer norm,
/// position-wise ReLU feed-forward, residual, layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(TransformerBlock {
            attention: MultiHeadAttention::new(&mut s, "attention", dim, heads, dropout)?,
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            ff_in: Linear::new(&mut s, "ff_in", dim, ff_dim),
            ff_out: Linear::new(&mut s, "ff_out", ff_dim, dim),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            dropout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let a = self.attention.forward(ctx, x)?;
        let a = ctx.dropout(a, self.dropout)?;
        let h = ctx.tape.add(x, a)?;
        let h = self.norm1.forward(ctx, h)?;
        let f = self.ff_in.forward(ctx, h)?;
        let f = ctx.tape.relu(f);
        let f = self.ff_out.forward(ctx, f)?;
        let f = ctx.dropout(f, self.dropout)?;
        let y = ctx.tape.add(h, f)?;
        self.norm2.forward(ctx, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut store, &mut rng);
        assert!(MultiHeadAttention::new(&mut b, "a", 10, 3, 0.0).is_err());
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = {
            let mut b = Builder::new(&mut store, &mut rng);
            TransformerBlock::new(&mut b, "blk", 8, 2, 16, 0.0).unwrap()
        };
        let x = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::eval(&mut tape, &store);
            let v = ctx.tape.constant(input);
            let y = block.forward(&mut ctx, v).unwrap();
            ctx.tape.value(y).clone()
        };
        let y = run(x.clone());
        let mut xp = Vec::new();
        for &p in &perm {
            xp.extend_from_slice(x.row(p));
        }
        let yp = run(Tensor::new(vec![5, 8], xp).unwrap());
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positions_differ_per_row() {
        let pe = sinusoidal_positions(6, 16);
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(pe.row(i) != pe.row(j));
            }
        }
        assert_eq!(pe.at(0, 1), 1.0);
    }
}
