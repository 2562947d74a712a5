use serde::{Deserialize, Serialize};

use super::BackboneModel;
use crate::dataset::Sample;
use crate::error::{Error, Result};

/// Mean of the per-patch features of each sample.
pub fn pooled_features(model: &BackboneModel, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let f = model.extract_features(&s.grid)?;
            let (p, d) = (f.shape()[0], f.shape()[1]);
            let mut v = vec![0.0; d];
            for r in 0..p {
                for (a, x) in v.iter_mut().zip(f.row(r)) {
                    *a += x / p as f64;
                }
            }
            Ok(v)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iters: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// Multinomial logistic regression on standardized features, fitted by
/// full-batch gradient descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[classes][dim + 1]`, bias last.
    pub weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Contract(format!("{} feature rows for {} labels", x.len(), y.len())));
        }
        if let Some(&c) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Lookup {
                what: "probe classes",
                index: c,
                len: classes,
            });
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut probe = Self {
            mean,
            scale,
            weights: vec![vec![0.0; d + 1]; classes],
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..cfg.iters {
            let mut grad = vec![vec![0.0; d + 1]; classes];
            for (zi, &yi) in z.iter().zip(y) {
                let p = probe.probs_std(zi);
                for (c, g) in grad.iter_mut().enumerate() {
                    let e = p[c] - f64::from(u8::from(c == yi));
                    for (gj, zj) in g.iter_mut().zip(zi.iter().chain(std::iter::once(&1.0))) {
                        *gj += e * zj / n;
                    }
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                for (j, (wj, gj)) in w.iter_mut().zip(g).enumerate() {
                    let reg = if j < d { cfg.l2 * *wj } else { 0.0 };
                    *wj -= cfg.lr * (gj + reg);
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn probs_std(&self, z: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w[..z.len()].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[z.len()])
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, r: &[f64]) -> usize {
        let p = self.probs_std(&self.standardize(r));
        let mut best = 0;
        for (i, v) in p.iter().enumerate() {
            if *v > p[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &c)| self.predict(r) == c).count();
        hits as f64 / x.len().max(1) as f64
    }
}
