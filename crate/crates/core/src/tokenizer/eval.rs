use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::TokenizerModel;
use crate::dataset::{batch_indices, Sample};
use crate::encoder::PatchBatch;
use crate::error::{Error, Result};
use crate::signal::{bandpass, BandSpec};
use crate::spectral::{inverse_spectrum, SpectralTarget};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub band: String,
    pub mse: f64,
    pub patches: usize,
}

/// Reconstruction error per frequency band, raw signal first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandReport {
    pub split: String,
    pub rows: Vec<BandRow>,
}

impl BandReport {
    pub const HEADER: &'static str = "split,band,mse,patches";

    pub fn get(&self, band: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.band == band).map(|r| r.mse)
    }

    pub fn csv(reports: &[BandReport]) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in reports {
            for row in &r.rows {
                writeln!(s, "{},{},{},{}", r.split, row.band, row.mse, row.patches).unwrap();
            }
        }
        s
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Band-wise comparison of original and reconstructed patches. Band errors
/// use the central half of each band-passed patch; the raw error uses the
/// whole patch.
pub fn band_errors(
    originals: &[&[f64]],
    reconstructions: &[Vec<f64>],
    sample_rate: f64,
    bands: &[BandSpec],
    split: &str,
) -> Result<BandReport> {
    if originals.len() != reconstructions.len() {
        return Err(Error::Contract(format!(
            "{} originals vs {} reconstructions",
            originals.len(),
            reconstructions.len()
        )));
    }
    for b in bands {
        b.edges(sample_rate)?;
    }
    let n = originals.len();
    if n == 0 {
        return Err(Error::Empty("no patches to evaluate".into()));
    }
    let mut raw = 0.0;
    let mut per_band = vec![0.0; bands.len()];
    for (x, y) in originals.iter().zip(reconstructions) {
        if x.len() != y.len() {
            return Err(Error::Contract("reconstruction length differs from patch".into()));
        }
        raw += mse(x, y);
        let w = x.len();
        let (lo, hi) = (w / 4, w - w / 4);
        for (acc, b) in per_band.iter_mut().zip(bands) {
            let fx = bandpass(x, b, sample_rate)?;
            let fy = bandpass(y, b, sample_rate)?;
            *acc += mse(&fx[lo..hi], &fy[lo..hi]);
        }
    }
    let mut rows = vec![BandRow {
        band: "raw".into(),
        mse: raw / n as f64,
        patches: n,
    }];
    for (b, acc) in bands.iter().zip(per_band) {
        rows.push(BandRow {
            band: b.name.clone(),
            mse: acc / n as f64,
            patches: n,
        });
    }
    Ok(BandReport {
        split: split.to_string(),
        rows,
    })
}

/// Waveform reconstruction of every patch of every sample, in order.
pub fn reconstruct(model: &TokenizerModel, samples: &[Sample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let w = model.patch_len();
    let mut out = Vec::new();
    for idx in batch_indices(samples.len(), batch_size, None) {
        let grids: Vec<_> = idx.iter().map(|&i| &samples[i].grid).collect();
        let batch = PatchBatch::from_grids(&grids)?;
        for p in model.predict(&batch)? {
            out.push(inverse_spectrum(&SpectralTarget {
                log_amp: p.log_amp_hat,
                sin_phase: p.sin_hat,
                cos_phase: p.cos_hat,
                patch_len: w,
            }));
        }
    }
    Ok(out)
}

/// Reconstructs `samples` through the model and reports band-wise errors.
pub fn eval_per_band(
    model: &TokenizerModel,
    samples: &[Sample],
    bands: &[BandSpec],
    split: &str,
    batch_size: usize,
) -> Result<BandReport> {
    let rate = samples
        .first()
        .ok_or_else(|| Error::Empty("no samples to evaluate".into()))?
        .grid
        .sample_rate;
    for b in bands {
        b.edges(rate)?;
    }
    let recon = reconstruct(model, samples, batch_size)?;
    let originals: Vec<&[f64]> = samples
        .iter()
        .flat_map(|s| (0..s.grid.len()).map(move |i| s.grid.patch(i)))
        .collect();
    band_errors(&originals, &recon, rate, bands, split)
}
