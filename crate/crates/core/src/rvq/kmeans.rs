use rand::Rng;

use super::{l2_normalize, sq_dist};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KmeansStatus {
    /// Lloyd iterations run before assignments stopped changing.
    pub iterations: usize,
    /// Centroids filled with perturbed duplicates for lack of distinct
    /// samples; non-zero means the codebook is degenerate.
    pub padded: usize,
}

/// k-means++ seeding and Lloyd iterations for `n × d` samples. Assignment
/// uses the normalized distance of the quantizer; centroids are raw means.
pub fn kmeans_init<R: Rng + ?Sized>(
    samples: &[f64],
    d: usize,
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Result<(Tensor, KmeansStatus)> {
    if d == 0 || k == 0 || samples.len() % d != 0 {
        return Err(Error::Config(format!(
            "k-means over {} values with dim {d} and k {k}",
            samples.len()
        )));
    }
    let n = samples.len() / d;
    if n < k {
        return Err(Error::Config(format!(
            "k-means needs at least {k} samples, got {n}"
        )));
    }
    let row = |i: usize| &samples[i * d..(i + 1) * d];
    let normed: Vec<Vec<f64>> = (0..n).map(|i| l2_normalize(row(i))).collect();

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut padded = 0;
    let first = rng.gen_range(0..n);
    centers.push(row(first).to_vec());
    let mut nearest: Vec<f64> = normed
        .iter()
        .map(|x| sq_dist(x, &normed[first]))
        .collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        if total <= 0.0 {
            let i = rng.gen_range(0..n);
            let jitter = 1e-3 * row(i).iter().map(|v| v.abs()).fold(1e-3, f64::max);
            centers.push(row(i).iter().map(|v| v + jitter * rng.gen_range(-1.0..1.0)).collect());
            padded += 1;
            continue;
        }
        let mut target = rng.gen_range(0.0..total);
        let mut pick = n - 1;
        for (i, w) in nearest.iter().enumerate() {
            if target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        if nearest[pick] <= 0.0 {
            pick = nearest.iter().rposition(|w| *w > 0.0).unwrap_or(pick);
        }
        centers.push(row(pick).to_vec());
        for (m, x) in nearest.iter_mut().zip(&normed) {
            *m = m.min(sq_dist(x, &normed[pick]));
        }
    }
    if padded > 0 {
        log::warn!("k-means: only {} distinct directions for {k} codes", k - padded);
    }

    let mut assign = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..iters {
        let keys: Vec<Vec<f64>> = centers.iter().map(|c| l2_normalize(c)).collect();
        let mut changed = false;
        for (i, x) in normed.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (j, c) in keys.iter().enumerate() {
                let dist = sq_dist(x, c);
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let data = centers.into_iter().flatten().collect();
    Ok((Tensor::new(vec![k, d], data)?, KmeansStatus { iterations, padded }))
}
