//! Recordings, patch segmentation, band-pass filtering, resampling and the
//! synthetic multi-band generator.

mod filter;
mod io;
mod synth;

pub use filter::{bandpass, Butterworth};
pub use io::{
    load_electrodes, load_recording, save_electrodes, save_recording, RecordingFormat,
};
pub use synth::{montage, synth_generate, BandComponents, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multichannel sampled signal, channel-major `C × T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub sample_rate: f64,
    pub channels: Vec<String>,
    /// One row per channel, all rows the same length.
    pub data: Vec<Vec<f64>>,
    /// Optional class id per trial or per recording.
    pub labels: Option<Vec<usize>>,
}

impl Recording {
    pub fn new(sample_rate: f64, channels: Vec<String>, data: Vec<Vec<f64>>) -> Result<Self> {
        let rec = Self {
            sample_rate,
            channels,
            data,
            labels: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(Error::Config(format!(
                "sample rate must be positive, got {}",
                self.sample_rate
            )));
        }
        if self.data.len() != self.channels.len() {
            return Err(Error::Contract(format!(
                "{} channel names but {} data rows",
                self.channels.len(),
                self.data.len()
            )));
        }
        let t = self.samples();
        for (c, row) in self.data.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Contract(format!(
                    "channel {} has {} samples, expected {}",
                    self.channels[c],
                    row.len(),
                    t
                )));
            }
            if let Some(i) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    index: i,
                    context: format!("channel {}", self.channels[c]),
                });
            }
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn samples(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn duration(&self) -> f64 {
        self.samples() as f64 / self.sample_rate
    }

    /// Linear-interpolation resampling to `target_rate`.
    ///
    /// This is an approximation: no anti-alias filter is applied, so the
    /// caller must band-limit before downsampling.
    pub fn resample_linear(&self, target_rate: f64) -> Result<Recording> {
        if !(target_rate > 0.0) {
            return Err(Error::Config(format!(
                "target rate must be positive, got {target_rate}"
            )));
        }
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        let t = self.samples();
        let out_len = if t == 0 {
            0
        } else {
            ((t - 1) as f64 * target_rate / self.sample_rate).floor() as usize + 1
        };
        let ratio = self.sample_rate / target_rate;
        let data = self
            .data
            .iter()
            .map(|row| {
                (0..out_len)
                    .map(|i| {
                        let pos = i as f64 * ratio;
                        let lo = (pos.floor() as usize).min(t - 1);
                        let hi = (lo + 1).min(t - 1);
                        let frac = pos - lo as f64;
                        row[lo] + (row[hi] - row[lo]) * frac
                    })
                    .collect()
            })
            .collect();
        Ok(Recording {
            sample_rate: target_rate,
            channels: self.channels.clone(),
            data,
            labels: self.labels.clone(),
        })
    }
}

/// Global electrode list; patch provenance indexes into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElectrodeList(pub Vec<String>);

impl ElectrodeList {
    pub fn from_recordings<'a>(recs: impl IntoIterator<Item = &'a Recording>) -> Self {
        let mut names: Vec<String> = Vec::new();
        for r in recs {
            for c in &r.channels {
                if !names.contains(c) {
                    names.push(c.clone());
                }
            }
        }
        Self(names)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Non-overlapping single-channel windows with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `P × w`, row-major.
    pub patches: Vec<f64>,
    /// Per patch: index into the global electrode list.
    pub channel_idx: Vec<usize>,
    /// Per patch: time slot.
    pub slot_idx: Vec<usize>,
    pub patch_len: usize,
    pub sample_rate: f64,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.channel_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel_idx.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.patches[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn num_slots(&self) -> usize {
        self.slot_idx.iter().max().map_or(0, |m| m + 1)
    }

    /// Subset of patches in the given order.
    pub fn select(&self, idx: &[usize]) -> PatchGrid {
        let mut patches = Vec::with_capacity(idx.len() * self.patch_len);
        for &i in idx {
            patches.extend_from_slice(self.patch(i));
        }
        PatchGrid {
            patches,
            channel_idx: idx.iter().map(|&i| self.channel_idx[i]).collect(),
            slot_idx: idx.iter().map(|&i| self.slot_idx[i]).collect(),
            patch_len: self.patch_len,
            sample_rate: self.sample_rate,
        }
    }

    /// Splits into samples of `slots` consecutive time slots across all
    /// channels, with slot indices re-based to the window. A trailing
    /// window shorter than `slots` is dropped.
    pub fn windows(&self, slots: usize) -> Vec<PatchGrid> {
        let total = self.num_slots();
        if slots == 0 {
            return vec![];
        }
        (0..total / slots)
            .map(|wi| {
                let lo = wi * slots;
                let idx: Vec<usize> = (0..self.len())
                    .filter(|&i| self.slot_idx[i] >= lo && self.slot_idx[i] < lo + slots)
                    .collect();
                let mut g = self.select(&idx);
                for s in &mut g.slot_idx {
                    *s -= lo;
                }
                g
            })
            .collect()
    }

    /// Concatenates grids that share patch length and sample rate.
    pub fn concat(grids: &[PatchGrid]) -> Result<PatchGrid> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Empty("no patch grids to concatenate".into()))?;
        let mut out = PatchGrid {
            patches: vec![],
            channel_idx: vec![],
            slot_idx: vec![],
            patch_len: first.patch_len,
            sample_rate: first.sample_rate,
        };
        for g in grids {
            if g.patch_len != first.patch_len {
                return Err(Error::Contract(format!(
                    "patch length {} vs {}",
                    g.patch_len, first.patch_len
                )));
            }
            out.patches.extend_from_slice(&g.patches);
            out.channel_idx.extend_from_slice(&g.channel_idx);
            out.slot_idx.extend_from_slice(&g.slot_idx);
        }
        Ok(out)
    }
}

/// Cuts every channel into consecutive windows of `w` samples, dropping a
/// trailing remainder shorter than `w`. Patches are ordered channel-major:
/// all slots of the first channel, then the next channel.
pub fn segment_patches(rec: &Recording, w: usize, electrodes: &ElectrodeList) -> Result<PatchGrid> {
    let t = rec.samples();
    if w == 0 || t < w {
        return Err(Error::Empty(format!(
            "recording has {t} samples, fewer than one patch of {w}"
        )));
    }
    let slots = t / w;
    let mut grid = PatchGrid {
        patches: Vec::with_capacity(rec.num_channels() * slots * w),
        channel_idx: vec![],
        slot_idx: vec![],
        patch_len: w,
        sample_rate: rec.sample_rate,
    };
    for (c, row) in rec.data.iter().enumerate() {
        let name = &rec.channels[c];
        let global = electrodes.index_of(name).ok_or(Error::Lookup {
            what: "global electrode list",
            index: c,
            len: electrodes.len(),
        })?;
        for s in 0..slots {
            grid.patches.extend_from_slice(&row[s * w..(s + 1) * w]);
            grid.channel_idx.push(global);
            grid.slot_idx.push(s);
        }
    }
    Ok(grid)
}

/// Named frequency band. `high = None` means open-ended (clamped to
/// 0.95 × Nyquist when filtering).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub name: String,
    pub low: f64,
    pub high: Option<f64>,
}

/// Fraction of Nyquist used as the upper edge of open-ended bands.
pub const OPEN_BAND_NYQUIST_FRACTION: f64 = 0.95;

impl BandSpec {
    pub fn new(name: &str, low: f64, high: Option<f64>) -> Self {
        Self {
            name: name.to_string(),
            low,
            high,
        }
    }

    /// Edges realizable at `sample_rate`.
    pub fn edges(&self, sample_rate: f64) -> Result<(f64, f64)> {
        let nyq = sample_rate / 2.0;
        let high = match self.high {
            Some(h) => {
                if h >= nyq {
                    return Err(Error::Config(format!(
                        "band {}: upper edge {h} Hz at or above Nyquist {nyq} Hz",
                        self.name
                    )));
                }
                h
            }
            None => OPEN_BAND_NYQUIST_FRACTION * nyq,
        };
        if self.low < 0.0 || self.low >= high {
            return Err(Error::Config(format!(
                "band {}: edges [{}, {}] Hz invalid at {} Hz sampling",
                self.name, self.low, high, sample_rate
            )));
        }
        Ok((self.low, high))
    }

    /// delta, theta, alpha, beta, gamma.
    pub fn eeg_bands() -> Vec<BandSpec> {
        vec![
            BandSpec::new("delta", 0.5, Some(4.0)),
            BandSpec::new("theta", 4.0, Some(8.0)),
            BandSpec::new("alpha", 8.0, Some(13.0)),
            BandSpec::new("beta", 13.0, Some(30.0)),
            BandSpec::new("gamma", 30.0, None),
        ]
    }
}

#[cfg(test)]
mod tests;
