//! Central-difference gradient verification.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    /// Analytic and finite-difference derivatives at `worst`.
    pub worst_values: (f64, f64),
    pub coords_checked: usize,
    /// Coordinates left out because `x ± h` moved a ReLU or abs input across
    /// its kink, where a central difference does not estimate the derivative.
    pub kinks_skipped: usize,
}

/// Relative error between an analytic and a finite-difference derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Arc<Tensor>]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_branch_tracking();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf_shared(Arc::clone(t), false))
        .collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::usage("grad_check function must return a scalar"));
    }
    Ok((v.item(), tape.branch_signature()))
}

/// Which coordinates of each input a check visits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coords {
    All,
    /// `per_input` coordinates drawn uniformly with a seeded RNG.
    Random {
        per_input: usize,
        seed: u64,
    },
    /// Up to `per_input` kink-free coordinates taken in order of decreasing
    /// analytic magnitude, trying at most `4 * per_input` candidates. Deep
    /// models have many near-zero partials whose central difference is
    /// dominated by rounding in `f`; this picks the ones a difference can
    /// actually resolve.
    Largest {
        per_input: usize,
    },
}

impl Coords {
    /// Candidate coordinates and how many of them should be checked.
    fn candidates(self, grad: &[f64], rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
        let n = grad.len();
        match self {
            Coords::Random { per_input, .. } if per_input < n => {
                (sample(rng, n, per_input).into_vec(), per_input)
            }
            Coords::Largest { per_input } if per_input < n => {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
                idx.truncate(4 * per_input);
                (idx, per_input)
            }
            _ => ((0..n).collect(), n),
        }
    }
}

/// Max relative error of the analytic gradient of scalar `f` at `x` against
/// central differences with step `h`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |t: &mut Tape, v: &[Var]| f(t, v[0]),
        &[Arc::new(x.clone())],
        h,
        Coords::All,
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input form; `coords` keeps whole-model checks tractable when inputs
/// include large weight tensors.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Arc<Tensor>],
    h: f64,
    coords: Coords,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::usage(format!(
            "grad_check step {h} outside (0, 1e-2]"
        )));
    }
    let mut tape = Tape::with_branch_tracking();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf_shared(Arc::clone(t), true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.branch_signature();
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        coords_checked: 0,
        kinks_skipped: 0,
    };
    let seed = match coords {
        Coords::Random { seed, .. } => seed,
        _ => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (j, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic = tape
            .grad(vars[j])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let (candidates, wanted) = coords.candidates(&analytic, &mut rng);
        let mut perturbed: Vec<Arc<Tensor>> = inputs.to_vec();
        let mut done = 0;
        for c in candidates {
            if done == wanted {
                break;
            }
            let mut t = (**input).clone();
            let orig = t.data()[c];
            t.data_mut()[c] = orig + h;
            perturbed[j] = Arc::new(t.clone());
            let (fp, sp) = eval_scalar(&f, &perturbed)?;
            t.data_mut()[c] = orig - h;
            perturbed[j] = Arc::new(t);
            let (fm, sm) = eval_scalar(&f, &perturbed)?;
            if sp != base || sm != base {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[c], numeric);
            report.coords_checked += 1;
            done += 1;
            if err.is_nan() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (j, c);
                report.worst_values = (analytic[c], numeric);
                if err.is_nan() {
                    return Ok(report);
                }
            }
        }
        perturbed[j] = Arc::clone(input);
    }
    Ok(report)
}

/// Weighted sum against a fixed random tensor, so every output coordinate
/// contributes a distinct gradient.
pub fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(Tensor::randn(t.shape(y).to_vec(), 1.0, &mut r));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable op with the input shapes it is checked at.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

impl OpCase {
    fn new(name: &'static str, shapes: Vec<Vec<usize>>, f: OpFn) -> Self {
        OpCase { name, shapes, f }
    }

    /// Worst report over `points` random inputs.
    pub fn check(&self, points: u64, h: f64) -> Result<GradCheckReport> {
        let mut worst: Option<GradCheckReport> = None;
        for point in 0..points {
            let mut r = ChaCha8Rng::seed_from_u64(100 + point);
            let inputs: Vec<Arc<Tensor>> = self
                .shapes
                .iter()
                .map(|s| Arc::new(Tensor::randn(s.clone(), 1.0, &mut r)))
                .collect();
            let f = self.f;
            let rep = grad_check_many(
                |t, v| {
                    let y = f(t, v)?;
                    probe(t, y, 99)
                },
                &inputs,
                h,
                Coords::All,
            )?;
            worst = Some(match worst {
                Some(mut w) => {
                    w.coords_checked += rep.coords_checked;
                    w.kinks_skipped += rep.kinks_skipped;
                    if rep.max_rel_error > w.max_rel_error || rep.max_rel_error.is_nan() {
                        w.max_rel_error = rep.max_rel_error;
                        w.worst = rep.worst;
                        w.worst_values = rep.worst_values;
                    }
                    w
                }
                None => rep,
            });
        }
        worst.ok_or_else(|| Error::usage("op check needs at least one point"))
    }
}

/// Every differentiable tape op.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase::new("add", vec![vec![3, 4], vec![4]], |t, v| t.add(v[0], v[1])),
        OpCase::new("sub", vec![vec![3, 4], vec![1, 4]], |t, v| {
            t.sub(v[0], v[1])
        }),
        OpCase::new("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.mul(v[0], v[1])
        }),
        OpCase::new("mul_bcast", vec![vec![4], vec![3, 4]], |t, v| {
            t.mul(v[0], v[1])
        }),
        OpCase::new("scale", vec![vec![5]], |t, v| Ok(t.scale(v[0], -1.7))),
        OpCase::new("relu", vec![vec![7]], |t, v| Ok(t.relu(v[0]))),
        OpCase::new("elu", vec![vec![7]], |t, v| Ok(t.elu(v[0]))),
        OpCase::new("exp", vec![vec![7]], |t, v| Ok(t.exp(v[0]))),
        OpCase::new("tanh", vec![vec![7]], |t, v| Ok(t.tanh(v[0]))),
        OpCase::new("abs", vec![vec![7]], |t, v| Ok(t.abs(v[0]))),
        OpCase::new("log", vec![vec![5]], |t, v| {
            let e = t.exp(v[0]);
            t.log(e)
        }),
        OpCase::new("softmax0", vec![vec![4, 3]], |t, v| t.softmax(v[0], 0)),
        OpCase::new("softmax1", vec![vec![4, 3]], |t, v| t.softmax(v[0], 1)),
        OpCase::new("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        OpCase::new("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        OpCase::new("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        OpCase::new(
            "conv_same",
            vec![vec![3, 9], vec![2, 3, 4], vec![2]],
            |t, v| t.conv1d(v[0], v[1], Some(v[2]), 1, Padding::Same),
        ),
        OpCase::new("conv_strided", vec![vec![2, 12], vec![3, 2, 4]], |t, v| {
            t.conv1d(v[0], v[1], None, 2, Padding::Explicit(2, 0))
        }),
        OpCase::new("normalize1", vec![vec![3, 6]], |t, v| {
            t.normalize(v[0], 1, 1e-5)
        }),
        OpCase::new("normalize0", vec![vec![5, 2]], |t, v| {
            t.normalize(v[0], 0, 1e-5)
        }),
        OpCase::new("mean_axis", vec![vec![3, 4, 2]], |t, v| {
            t.mean_axis(v[0], 1)
        }),
        OpCase::new("var_axis", vec![vec![3, 4, 2]], |t, v| t.var_axis(v[0], 2)),
        OpCase::new("sum", vec![vec![3, 2]], |t, v| Ok(t.sum(v[0]))),
        OpCase::new("mean", vec![vec![3, 2]], |t, v| Ok(t.mean(v[0]))),
        OpCase::new("concat0", vec![vec![2, 3], vec![1, 3]], |t, v| {
            t.concat(&[v[0], v[1]], 0)
        }),
        OpCase::new("concat1", vec![vec![2, 3], vec![2, 2]], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        OpCase::new("narrow", vec![vec![4, 5]], |t, v| t.narrow(v[0], 1, 1, 3)),
        OpCase::new("pad", vec![vec![2, 3]], |t, v| t.pad(v[0], 1, 2, 1)),
        OpCase::new("gather", vec![vec![3, 2]], |t, v| {
            t.gather_rows(v[0], &[2, 0, 2, 1])
        }),
        OpCase::new("scale_rows", vec![vec![3, 4], vec![3]], |t, v| {
            t.scale_rows(v[0], v[1])
        }),
        OpCase::new("avg_pool", vec![vec![2, 7]], |t, v| t.avg_pool(v[0], 2, 2)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::randn(vec![6], 1.0, &mut rng());
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // 3e-6 sits inside the ±1e-5 stencil around the ReLU kink.
        let x = Arc::new(Tensor::vector(vec![3e-6, 0.8, -0.4, 2.0]));
        let rep = grad_check_many(
            |t, v| {
                Ok({
                    let r = t.relu(v[0]);
                    t.sum(r)
                })
            },
            &[x],
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert_eq!(rep.kinks_skipped, 1);
        assert_eq!(rep.coords_checked, 3);
        assert!(rep.max_rel_error < 1e-9);
    }

    #[test]
    fn largest_walks_the_ranking() {
        let g = [0.1, -3.0, 0.0, 2.0, 0.5];
        let mut r = rng();
        let (c, k) = Coords::Largest { per_input: 2 }.candidates(&g, &mut r);
        assert_eq!(k, 2);
        assert_eq!(c, vec![1, 3, 4, 0, 2]);
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.5).is_err());
        assert!(grad_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
    }

    #[test]
    fn every_op_passes_at_five_points() {
        for case in op_cases() {
            let rep = case.check(5, 1e-5).unwrap();
            assert!(rep.max_rel_error < 1e-4, "{}: {rep:?}", case.name);
        }
    }
}
