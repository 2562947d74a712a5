//! Recordings cut into fixed-size samples with a per-recording validation
//! tail.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::{segment_patches, ElectrodeList, PatchGrid, Recording};

/// One training sample: `slots` consecutive patch slots across every
/// channel of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub grid: PatchGrid,
    /// Index of the source recording.
    pub recording: usize,
    /// Class label of the source recording, when known.
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub electrodes: ElectrodeList,
    pub patch_len: usize,
    pub slots: usize,
}

impl Dataset {
    /// Segments every recording into `w`-sample patches, groups them into
    /// samples of `slots` time slots and holds out the last
    /// `val_fraction` of each recording's samples.
    pub fn from_recordings(
        recordings: &[Recording],
        electrodes: Option<ElectrodeList>,
        w: usize,
        slots: usize,
        val_fraction: f64,
    ) -> Result<Self> {
        if recordings.is_empty() {
            return Err(Error::Config("dataset has no recordings".into()));
        }
        if slots == 0 {
            return Err(Error::Config("samples need at least one slot".into()));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {val_fraction} outside [0, 1)"
            )));
        }
        let electrodes = electrodes.unwrap_or_else(|| ElectrodeList::from_recordings(recordings));
        let channels = recordings[0].num_channels();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (r, rec) in recordings.iter().enumerate() {
            if rec.num_channels() != channels {
                return Err(Error::Contract(format!(
                    "recording {r} has {} channels, expected {channels}",
                    rec.num_channels()
                )));
            }
            let grid = segment_patches(rec, w, &electrodes)?;
            let windows = grid.windows(slots);
            let n_val = if val_fraction > 0.0 && windows.len() >= 2 {
                ((windows.len() as f64 * val_fraction).round() as usize).max(1)
            } else {
                0
            };
            let split = windows.len() - n_val;
            let label = rec.labels.as_ref().and_then(|l| l.first().copied());
            for (i, g) in windows.into_iter().enumerate() {
                let s = Sample {
                    grid: g,
                    recording: r,
                    label,
                };
                if i < split {
                    train.push(s);
                } else {
                    val.push(s);
                }
            }
        }
        if train.is_empty() {
            return Err(Error::Config(format!(
                "no training samples: recordings shorter than {slots} patches of {w}"
            )));
        }
        Ok(Self {
            train,
            val,
            electrodes,
            patch_len: w,
            slots,
        })
    }
}

/// Sample indices grouped into batches, shuffled when `seed` is given.
pub fn batch_indices(n: usize, batch_size: usize, seed: Option<u64>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(s) = seed {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
