//! Mel-cepstral distortion and speaker-embedding similarity.

use crate::dsp::MfccMatrix;
use crate::error::{Error, Result};

/// `10·√2 / ln 10`, the dB scaling of the per-frame cepstral distance.
pub const MCD_SCALE: f64 = 10.0 * std::f64::consts::SQRT_2 / std::f64::consts::LN_10;

#[derive(Clone, Debug, PartialEq)]
pub struct McdResult {
    pub value: f64,
    /// Frames averaged over: `T` for the plain form, DTW path length otherwise.
    pub path_length: usize,
    pub aligned: bool,
    /// DTW alignment from `(0, 0)` to `(T₁−1, T₂−1)`; empty for the plain form.
    pub path: Vec<(usize, usize)>,
}

fn check_coeffs(a: &MfccMatrix, b: &MfccMatrix) -> Result<()> {
    if a.num_coeffs() != b.num_coeffs() {
        return Err(Error::dim(
            "mcd",
            format!(
                "{} vs {} cepstral coefficients",
                a.num_coeffs(),
                b.num_coeffs()
            ),
        ));
    }
    Ok(())
}

fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn frame(m: &MfccMatrix, t: usize) -> &[f64] {
    let k = m.num_coeffs();
    &m.coeffs().data()[t * k..(t + 1) * k]
}

/// Frame-by-frame MCD of two equal-length matrices.
pub fn mcd_plain(s: &MfccMatrix, s_hat: &MfccMatrix) -> Result<McdResult> {
    check_coeffs(s, s_hat)?;
    let t = s.num_frames();
    if t != s_hat.num_frames() {
        return Err(Error::usage(format!(
            "mcd_plain needs equal frame counts ({t} vs {}); use mcd_dtw for unequal lengths",
            s_hat.num_frames()
        )));
    }
    if t == 0 {
        return Err(Error::usage("mcd_plain needs at least one frame"));
    }
    let total: f64 = (0..t)
        .map(|i| frame_distance(frame(s, i), frame(s_hat, i)))
        .sum();
    Ok(McdResult {
        value: MCD_SCALE * total / t as f64,
        path_length: t,
        aligned: false,
        path: Vec::new(),
    })
}

/// MCD along the minimum-cost DTW alignment (diagonal, up and right steps),
/// normalized by the path length.
pub fn mcd_dtw(s: &MfccMatrix, s_hat: &MfccMatrix) -> Result<McdResult> {
    check_coeffs(s, s_hat)?;
    let (n, m) = (s.num_frames(), s_hat.num_frames());
    if n == 0 || m == 0 {
        return Err(Error::usage("mcd_dtw needs non-empty inputs"));
    }
    let dist: Vec<f64> = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| frame_distance(frame(s, i), frame(s_hat, j)))
        .collect();
    let mut cost = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    cost[(i - 1) * m + j - 1]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    cost[(i - 1) * m + j]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    cost[i * m + j - 1]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            cost[i * m + j] = best + dist[i * m + j];
        }
    }
    // Backtrack, preferring the diagonal on ties.
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = cost[(i - 1) * m + j - 1];
            let up = cost[(i - 1) * m + j];
            let left = cost[i * m + j - 1];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    let total: f64 = path.iter().map(|&(i, j)| dist[i * m + j]).sum();
    Ok(McdResult {
        value: MCD_SCALE * total / path.len() as f64,
        path_length: path.len(),
        aligned: true,
        path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    /// Mean pairwise cosine within each speaker, in first-appearance order.
    pub intra: Vec<(String, f64)>,
    /// Mean over speakers of `intra`.
    pub intra_mean: f64,
    /// Mean cosine over all cross-speaker pairs.
    pub inter_mean: f64,
    pub margin: f64,
    /// Zero vectors left out of every mean.
    pub excluded_zero: usize,
}

fn cosine(a: &[f64], an: f64, b: &[f64], bn: f64) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (an * bn)).clamp(-1.0, 1.0)
}

/// Within- versus across-speaker cosine similarity of embeddings.
pub fn similarity_report<S: AsRef<str>, V: AsRef<[f64]>>(
    items: &[(S, V)],
) -> Result<SimilarityReport> {
    let mut speakers: Vec<String> = Vec::new();
    let mut rows: Vec<(usize, &[f64], f64)> = Vec::new();
    let mut excluded_zero = 0;
    let dim = items.first().map(|x| x.1.as_ref().len()).unwrap_or(0);
    for (sid, v) in items {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::dim(
                "similarity_report",
                format!("embedding of length {} vs {dim}", v.len()),
            ));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            excluded_zero += 1;
            continue;
        }
        let k = match speakers.iter().position(|s| s == sid.as_ref()) {
            Some(k) => k,
            None => {
                speakers.push(sid.as_ref().to_string());
                speakers.len() - 1
            }
        };
        rows.push((k, v, norm));
    }
    if speakers.len() < 2 {
        return Err(Error::usage(format!(
            "similarity_report needs at least 2 speakers with nonzero embeddings, got {} ({excluded_zero} zero vectors excluded)",
            speakers.len()
        )));
    }
    let mut intra_sum = vec![0.0; speakers.len()];
    let mut intra_n = vec![0usize; speakers.len()];
    let (mut inter_sum, mut inter_n) = (0.0, 0usize);
    for (a, &(ka, va, na)) in rows.iter().enumerate() {
        for &(kb, vb, nb) in &rows[a + 1..] {
            let c = cosine(va, na, vb, nb);
            if ka == kb {
                intra_sum[ka] += c;
                intra_n[ka] += 1;
            } else {
                inter_sum += c;
                inter_n += 1;
            }
        }
    }
    if let Some(k) = intra_n.iter().position(|&n| n == 0) {
        return Err(Error::usage(format!(
            "speaker {} has fewer than 2 nonzero embeddings",
            speakers[k]
        )));
    }
    let intra: Vec<(String, f64)> = speakers
        .into_iter()
        .zip(intra_sum.iter().zip(&intra_n).map(|(s, &n)| s / n as f64))
        .collect();
    let intra_mean = intra.iter().map(|x| x.1).sum::<f64>() / intra.len() as f64;
    let inter_mean = inter_sum / inter_n as f64;
    Ok(SimilarityReport {
        intra,
        intra_mean,
        inter_mean,
        margin: intra_mean - inter_mean,
        excluded_zero,
    })
}
