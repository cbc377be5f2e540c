use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Loss terms as tape vars; `total` is their unweighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mel: Var,
    pub pitch: Var,
    pub energy: Var,
    pub duration: Var,
    pub total: Var,
}

/// Plain values of [`LossVars`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mel: f64,
    pub pitch: f64,
    pub energy: f64,
    pub duration: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Var| tape.value(x).item();
        LossValues {
            total: v(self.total),
            mel: v(self.mel),
            pitch: v(self.pitch),
            energy: v(self.energy),
            duration: v(self.duration),
        }
    }
}

fn same_shape(tape: &Tape, what: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shapes(what, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn mean_abs(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

fn mean_sq(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.mul(d, d)?;
    Ok(tape.mean(d2))
}

/// L1 on the mel plus L2 on pitch, energy and log-duration, each
/// mean-reduced. `log_d` holds `ln D` of the targets.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_loss(
    tape: &mut Tape,
    mel: Var,
    mel_hat: Var,
    pitch: Var,
    pitch_hat: Var,
    energy: Var,
    energy_hat: Var,
    log_d: Var,
    log_d_hat: Var,
) -> Result<LossVars> {
    same_shape(tape, "mel loss", mel, mel_hat)?;
    same_shape(tape, "pitch loss", pitch, pitch_hat)?;
    same_shape(tape, "energy loss", energy, energy_hat)?;
    same_shape(tape, "duration loss", log_d, log_d_hat)?;
    let mel = mean_abs(tape, mel, mel_hat)?;
    let pitch = mean_sq(tape, pitch, pitch_hat)?;
    let energy = mean_sq(tape, energy, energy_hat)?;
    let duration = mean_sq(tape, log_d, log_d_hat)?;
    let t = tape.add(mel, pitch)?;
    let t = tape.add(t, energy)?;
    let total = tape.add(t, duration)?;
    Ok(LossVars {
        mel,
        pitch,
        energy,
        duration,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_of(pairs: [(Tensor, Tensor); 4]) -> LossValues {
        let mut t = Tape::new();
        let v: Vec<Var> = pairs
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .map(|x| t.constant(x))
            .collect();
        let l =
            reconstruction_loss(&mut t, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]).unwrap();
        l.values(&t)
    }

    #[test]
    fn examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Tensor::randn(vec![6, 80], 1.0, &mut rng);
        let p = Tensor::randn(vec![3, 1], 1.0, &mut rng);
        let e = Tensor::randn(vec![3, 1], 1.0, &mut rng);
        let d = Tensor::randn(vec![3, 1], 1.0, &mut rng);
        let perfect = loss_of([
            (m.clone(), m.clone()),
            (p.clone(), p.clone()),
            (e.clone(), e.clone()),
            (d.clone(), d.clone()),
        ]);
        assert_eq!(perfect.total, 0.0);
        let shifted = loss_of([
            (m.clone(), m.map(|x| x + 1.0)),
            (p.clone(), p.clone()),
            (e.clone(), e.clone()),
            (d.clone(), d.clone()),
        ]);
        assert!((shifted.total - 1.0).abs() < 1e-12);
        let noisy = loss_of([
            (m.clone(), Tensor::randn(vec![6, 80], 1.0, &mut rng)),
            (p.clone(), Tensor::randn(vec![3, 1], 1.0, &mut rng)),
            (e, Tensor::randn(vec![3, 1], 1.0, &mut rng)),
            (d, Tensor::randn(vec![3, 1], 1.0, &mut rng)),
        ]);
        assert!(noisy.total >= 0.0 && noisy.mel >= 0.0 && noisy.duration >= 0.0);
        let sum = noisy.mel + noisy.pitch + noisy.energy + noisy.duration;
        assert!((noisy.total - sum).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![4, 80]));
        let b = t.constant(Tensor::zeros(vec![5, 80]));
        let s = t.constant(Tensor::zeros(vec![2, 1]));
        let r = reconstruction_loss(&mut t, a, b, s, s, s, s, s, s);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
