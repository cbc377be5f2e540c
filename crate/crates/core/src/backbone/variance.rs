use super::{VarianceTargets, HIDDEN};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv1d, Ctx, LayerNorm, Linear};
use crate::tensor::{Padding, Tensor, Var};

pub const VARIANCE_KERNEL: usize = 3;

/// Two conv → ReLU → LN → dropout stages and a scalar head, `[L × H] → [L × 1]`.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub head: Linear,
    pub dropout: f64,
}

impl VariancePredictor {
    pub fn new(b: &mut Builder, name: &str, dropout: f64) -> Self {
        let mut s = b.scope(name);
        let k = VARIANCE_KERNEL;
        VariancePredictor {
            conv1: Conv1d::new(&mut s, "conv1", HIDDEN, HIDDEN, k, 1, Padding::Same),
            norm1: LayerNorm::new(&mut s, "norm1", HIDDEN),
            conv2: Conv1d::new(&mut s, "conv2", HIDDEN, HIDDEN, k, 1, Padding::Same),
            norm2: LayerNorm::new(&mut s, "norm2", HIDDEN),
            head: Linear::new(&mut s, "head", HIDDEN, 1),
            dropout,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, h: Var) -> Result<Var> {
        let mut x = h;
        for (conv, norm) in [(&self.conv1, &self.norm1), (&self.conv2, &self.norm2)] {
            x = conv.forward_time_major(ctx, x)?;
            x = ctx.tape.relu(x);
            x = norm.forward(ctx, x)?;
            x = ctx.dropout(x, self.dropout)?;
        }
        self.head.forward(ctx, x)
    }
}

/// Row index pattern of the length regulator: phoneme `l` repeated `D_l` times.
pub fn expansion_indices(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(l, &d)| std::iter::repeat_n(l, d))
        .collect()
}

/// Repeats row `l` of `h` `durations[l]` times.
pub fn length_regulate(ctx: &mut Ctx, h: Var, durations: &[usize]) -> Result<Var> {
    let l = ctx.tape.shape(h)[0];
    if durations.len() != l {
        return Err(Error::dim(
            "length_regulate",
            format!("{} durations for {l} phonemes", durations.len()),
        ));
    }
    let idx = expansion_indices(durations);
    if idx.is_empty() {
        return Err(Error::usage("total duration is zero"));
    }
    ctx.tape.gather_rows(h, &idx)
}

/// Inference-time duration rule `max(1, round(exp(log_d)))`.
pub fn durations_from_log(log_d: &[f64]) -> Vec<usize> {
    log_d
        .iter()
        .map(|&v| {
            let d = v.clamp(-50.0, 50.0).exp().round();
            (d as usize).max(1)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AdapterOutput {
    pub expanded: Var,
    /// `[L × 1]` predictions.
    pub log_duration: Var,
    pub pitch: Var,
    pub energy: Var,
    /// Durations used for expansion (targets when teacher forcing).
    pub durations: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct VarianceAdapter {
    pub duration: VariancePredictor,
    pub pitch: VariancePredictor,
    pub energy: VariancePredictor,
    pub pitch_embed: Linear,
    pub energy_embed: Linear,
}

impl VarianceAdapter {
    pub fn new(b: &mut Builder, name: &str, dropout: f64) -> Self {
        let mut s = b.scope(name);
        VarianceAdapter {
            duration: VariancePredictor::new(&mut s, "duration", dropout),
            pitch: VariancePredictor::new(&mut s, "pitch", dropout),
            energy: VariancePredictor::new(&mut s, "energy", dropout),
            pitch_embed: Linear::new(&mut s, "pitch_embed", 1, HIDDEN),
            energy_embed: Linear::new(&mut s, "energy_embed", 1, HIDDEN),
        }
    }

    /// With targets, ground-truth pitch, energy and durations drive the
    /// embedding and expansion while predictions are still returned for the
    /// loss. Without targets the predictions drive everything.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        h: Var,
        targets: Option<&VarianceTargets>,
    ) -> Result<AdapterOutput> {
        let l = ctx.tape.shape(h)[0];
        if let Some(t) = targets {
            if t.len() != l {
                return Err(Error::dim(
                    "variance_adapter",
                    format!("targets cover {} phonemes, sequence has {l}", t.len()),
                ));
            }
        }
        let log_duration = self.duration.forward(ctx, h)?;
        let pitch = self.pitch.forward(ctx, h)?;
        let energy = self.energy.forward(ctx, h)?;
        let (p_in, e_in, durations) = match targets {
            Some(t) => {
                let p = ctx
                    .tape
                    .constant(Tensor::from_parts(vec![l, 1], t.pitch.clone()));
                let e = ctx
                    .tape
                    .constant(Tensor::from_parts(vec![l, 1], t.energy.clone()));
                (p, e, t.durations.clone())
            }
            None => {
                let d = durations_from_log(ctx.tape.value(log_duration).data());
                (pitch, energy, d)
            }
        };
        let pe = self.pitch_embed.forward(ctx, p_in)?;
        let ee = self.energy_embed.forward(ctx, e_in)?;
        let x = ctx.tape.add(h, pe)?;
        let x = ctx.tape.add(x, ee)?;
        let expanded = length_regulate(ctx, x, &durations)?;
        Ok(AdapterOutput {
            expanded,
            log_duration,
            pitch,
            energy,
            durations,
        })
    }
}
