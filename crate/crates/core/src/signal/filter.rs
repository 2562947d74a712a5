use rustfft::num_complex::Complex64;

use super::BandSpec;
use crate::error::Result;

/// Prototype order of the band-pass design (the band-pass itself has twice
/// as many poles).
pub const BUTTERWORTH_ORDER: usize = 4;

/// Digital Butterworth band-pass as a cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Butterworth {
    /// Each section is `[b0, b1, b2, a1, a2]` with `a0 = 1`.
    pub sections: Vec<[f64; 5]>,
}

impl Butterworth {
    /// Band-pass design via bilinear transform with pre-warped edges.
    pub fn bandpass(order: usize, low: f64, high: f64, sample_rate: f64) -> Self {
        let fs2 = 2.0 * sample_rate;
        let warp = |f: f64| fs2 * (std::f64::consts::PI * f / sample_rate).tan();
        let (wl, wh) = (warp(low), warp(high));
        let bw = wh - wl;
        let w0sq = wl * wh;

        let mut poles = Vec::with_capacity(2 * order);
        for k in 0..order {
            let theta = std::f64::consts::PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta) * (bw / 2.0);
            let disc = (p * p - w0sq).sqrt();
            for s in [p + disc, p - disc] {
                poles.push((fs2 + s) / (fs2 - s));
            }
        }
        // one section per conjugate pair; zeros at z = +1 and z = -1
        let mut sections: Vec<[f64; 5]> = poles
            .iter()
            .filter(|p| p.im > 0.0)
            .map(|p| [1.0, 0.0, -1.0, -2.0 * p.re, p.norm_sqr()])
            .collect();
        sections.sort_by(|a, b| a[4].partial_cmp(&b[4]).unwrap());

        let mut filt = Self { sections };
        // unity gain at the digital image of the analog centre frequency
        let w0 = 2.0 * (w0sq.sqrt() / fs2).atan();
        let g = filt.response(w0).norm();
        filt.sections[0][0] /= g;
        filt.sections[0][2] /= g;
        filt
    }

    /// Complex frequency response at normalized angular frequency `omega`
    /// (radians per sample).
    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| {
            acc * (s[0] + s[1] * z1 + s[2] * z2) / (1.0 + s[3] * z1 + s[4] * z2)
        })
    }

    /// Causal filtering with transposed direct-form II sections, starting
    /// from the given per-section state.
    fn run(&self, x: &mut [f64], mut state: Vec<[f64; 2]>) {
        for (s, z) in self.sections.iter().zip(state.iter_mut()) {
            for v in x.iter_mut() {
                let xin = *v;
                let y = s[0] * xin + z[0];
                z[0] = s[1] * xin - s[3] * y + z[1];
                z[1] = s[2] * xin - s[4] * y;
                *v = y;
            }
        }
    }

    /// Steady-state section states for a unit step, scaled per section by
    /// the DC gain of the preceding sections.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut gain_in = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let g = (s[0] + s[1] + s[2]) / (1.0 + s[3] + s[4]);
                let z1 = s[2] - s[4] * g;
                let z0 = s[1] - s[3] * g + z1;
                let state = [z0 * gain_in, z1 * gain_in];
                gain_in *= g;
                state
            })
            .collect()
    }

    /// Samples for the slowest pole to decay by 1e-3.
    fn settle_len(&self) -> usize {
        let r = self
            .sections
            .iter()
            .map(|s| s[4].abs().sqrt())
            .fold(0.0, f64::max);
        if r <= 0.0 || r >= 1.0 {
            return 0;
        }
        ((1e-3f64).ln() / r.ln()).ceil() as usize
    }

    /// Zero-phase forward-backward filtering with odd-extension padding.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return vec![];
        }
        let pad = (3 * (2 * self.sections.len() + 1))
            .max(self.settle_len())
            .min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
        }
        let zi = self.step_state();
        let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();

        let first = ext[0];
        self.run(&mut ext, scaled(first));
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, scaled(first));
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Sub-interval of `[low, high]` where the band-pass prototype frequency
/// stays within `±fraction`, i.e. the flat core of the passband.
pub fn passband_core(low: f64, high: f64, sample_rate: f64, fraction: f64) -> (f64, f64) {
    let fs2 = 2.0 * sample_rate;
    let warp = |f: f64| fs2 * (std::f64::consts::PI * f / sample_rate).tan();
    let unwarp = |w: f64| sample_rate / std::f64::consts::PI * (w / fs2).atan();
    let (wl, wh) = (warp(low), warp(high));
    let bw = wh - wl;
    let w0sq = wl * wh;
    let half = fraction * bw / 2.0;
    let root = (half * half + w0sq).sqrt();
    (unwarp(root - half), unwarp(root + half))
}

/// Zero-phase 4th-order Butterworth band-pass of a single trace.
pub fn bandpass(x: &[f64], band: &BandSpec, sample_rate: f64) -> Result<Vec<f64>> {
    let (low, high) = band.edges(sample_rate)?;
    let filt = Butterworth::bandpass(BUTTERWORTH_ORDER, low.max(1e-3), high, sample_rate);
    Ok(filt.filtfilt(x))
}
