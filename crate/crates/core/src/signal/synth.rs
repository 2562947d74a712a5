use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::filter::passband_core;
use super::{BandSpec, Recording};
use crate::error::{Error, Result};

const MONTAGE: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz", "C4", "T8", "P7", "P3", "Pz",
    "P4", "P8", "O1", "O2",
];

/// Channel names for a synthetic montage of `n` electrodes.
pub fn montage(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match MONTAGE.get(i) {
            Some(s) => s.to_string(),
            None => format!("E{}", i + 1),
        })
        .collect()
}

/// Components are drawn from the flat core of each band so that the band's
/// own filter keeps them almost unattenuated.
const CORE_FRACTION: f64 = 0.6;

/// Sinusoidal components drawn inside one band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandComponents {
    pub band: BandSpec,
    pub count: usize,
    /// Amplitude range `[min, max]`.
    pub amplitude: (f64, f64),
}

/// Recipe for a synthetic multi-band recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub components: Vec<BandComponents>,
    /// RMS of the added 1/f noise.
    pub noise_level: f64,
    /// Seconds.
    pub duration: f64,
    pub sample_rate: f64,
    pub channels: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// One component per EEG band with amplitudes in `[0.5, 1.5]`.
    pub fn all_bands(sample_rate: f64, channels: usize, duration: f64, seed: u64) -> Self {
        Self {
            components: BandSpec::eeg_bands()
                .into_iter()
                .map(|band| BandComponents {
                    band,
                    count: 1,
                    amplitude: (0.5, 1.5),
                })
                .collect(),
            noise_level: 0.05,
            duration,
            sample_rate,
            channels,
            seed,
        }
    }

    /// A recording where `dominant` carries most of the power and the other
    /// bands are weak.
    pub fn dominated_by(
        dominant: &str,
        sample_rate: f64,
        channels: usize,
        duration: f64,
        seed: u64,
    ) -> Self {
        let mut spec = Self::all_bands(sample_rate, channels, duration, seed);
        for c in &mut spec.components {
            c.amplitude = if c.band.name == dominant {
                (1.5, 2.5)
            } else {
                (0.1, 0.4)
            };
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) || !(self.duration > 0.0) || self.channels == 0 {
            return Err(Error::Config(format!(
                "synth needs positive rate, duration and channel count (got {}, {}, {})",
                self.sample_rate, self.duration, self.channels
            )));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Config("noise level must be non-negative".into()));
        }
        for c in &self.components {
            let (lo, hi) = c.amplitude;
            if lo < 0.0 || hi < lo {
                return Err(Error::Config(format!(
                    "band {}: amplitude range [{lo}, {hi}] invalid",
                    c.band.name
                )));
            }
            c.band.edges(self.sample_rate)?;
        }
        Ok(())
    }
}

/// Sum of random in-band sinusoids plus pink noise; a pure function of the
/// spec.
pub fn synth_generate(spec: &SynthSpec) -> Result<Recording> {
    spec.validate()?;
    let n = (spec.duration * spec.sample_rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.channels);
    for _ in 0..spec.channels {
        let mut row = vec![0.0; n];
        for comp in &spec.components {
            let (lo, hi) = comp.band.edges(spec.sample_rate)?;
            let (lo, hi) = passband_core(lo, hi, spec.sample_rate, CORE_FRACTION);
            for _ in 0..comp.count {
                let f = rng.gen_range(lo..hi);
                let (amin, amax) = comp.amplitude;
                let a = if amax > amin {
                    rng.gen_range(amin..amax)
                } else {
                    amin
                };
                let phase = rng.gen_range(0.0..TAU);
                for (t, v) in row.iter_mut().enumerate() {
                    *v += a * (TAU * f * t as f64 / spec.sample_rate + phase).cos();
                }
            }
        }
        if spec.noise_level > 0.0 {
            let noise = pink_noise(n, &mut rng);
            for (v, e) in row.iter_mut().zip(noise) {
                *v += spec.noise_level * e;
            }
        }
        data.push(row);
    }
    Recording::new(spec.sample_rate, montage(spec.channels), data)
}

/// Unit-RMS noise with a 1/sqrt(f) amplitude profile (DC removed).
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n];
    }
    let mut buf: Vec<Complex64> = (0..n)
        .map(|_| Complex64::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    buf[0] = Complex64::new(0.0, 0.0);
    for (k, v) in buf.iter_mut().enumerate().skip(1) {
        let f = k.min(n - k) as f64;
        *v /= f.sqrt();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter().map(|v| v / rms).collect()
    } else {
        out
    }
}
