//! Fourier-domain reconstruction targets and the tokenizer's loss terms.
//!
//! A patch of `w` samples (w even) maps to `w/2 + 1` one-sided bins. The
//! amplitude of bin `k` is scaled so that a unit-amplitude cosine sitting
//! exactly on bin `k` has `A = 1`: `2/w` for interior bins, `1/w` for DC and
//! Nyquist. Phase is the principal angle of the DFT coefficient with the
//! `e^{-2πikt/w}` convention, so `sin` lands at `-π/2`.
//!
//! Targets and predictions are stored as `log(1 + A)`, `sin φ` and `cos φ`.
//! The time-domain reconstruction used by the temporal loss is the real
//! synthesis `x[t] = Σ_k A_k cos(2πkt/w + φ_k)`, which is the exact inverse
//! of the forward transform under this scaling.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor on the predicted phase-vector norm.
pub const PHASE_NORM_EPS: f64 = 1e-8;

pub fn num_bins(w: usize) -> usize {
    w / 2 + 1
}

pub fn check_patch_len(w: usize) -> Result<()> {
    if w == 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "patch length must be even and positive, got {w}"
        )));
    }
    Ok(())
}

/// Spectral reconstruction target of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTarget {
    pub log_amp: Vec<f64>,
    pub sin_phase: Vec<f64>,
    pub cos_phase: Vec<f64>,
    pub patch_len: usize,
}

/// Decoder output for one patch; no norm constraint on the phase pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePrediction {
    pub log_amp_hat: Vec<f64>,
    pub sin_hat: Vec<f64>,
    pub cos_hat: Vec<f64>,
}

impl From<&SpectralTarget> for PhasePrediction {
    fn from(t: &SpectralTarget) -> Self {
        Self {
            log_amp_hat: t.log_amp.clone(),
            sin_hat: t.sin_phase.clone(),
            cos_hat: t.cos_phase.clone(),
        }
    }
}

/// How the cosine-similarity term is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseDenominator {
    /// Divide by the predicted vector's norm (target is unit-norm).
    #[default]
    PredictedNorm,
    /// Divide by the predicted norm squared.
    PredictedNormSquared,
}

/// Weights and toggles for the tokenizer objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_circle: f64,
    pub log_amp: bool,
    pub unit: bool,
    pub temporal: bool,
    pub denominator: PhaseDenominator,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_circle: 0.4,
            log_amp: true,
            unit: true,
            temporal: true,
            denominator: PhaseDenominator::PredictedNorm,
        }
    }
}

/// Per-term values of the tokenizer objective (without the quantization
/// loss, which the caller adds).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub log_amp: f64,
    pub unit: f64,
    pub temporal: f64,
    pub total: f64,
}

/// One-sided amplitude/phase spectrum of a real patch.
pub fn forward_spectrum(patch: &[f64]) -> Result<SpectralTarget> {
    let w = patch.len();
    check_patch_len(w)?;
    if let Some(i) = patch.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            context: "patch sample".into(),
        });
    }
    let mut buf: Vec<Complex64> = patch.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(w).process(&mut buf);
    let nb = num_bins(w);
    let mut t = SpectralTarget {
        log_amp: Vec::with_capacity(nb),
        sin_phase: Vec::with_capacity(nb),
        cos_phase: Vec::with_capacity(nb),
        patch_len: w,
    };
    for (k, c) in buf.iter().take(nb).enumerate() {
        let scale = if k == 0 || k == w / 2 { 1.0 } else { 2.0 } / w as f64;
        let amp = c.norm() * scale;
        let phi = c.im.atan2(c.re);
        t.log_amp.push(amp.ln_1p());
        t.sin_phase.push(phi.sin());
        t.cos_phase.push(phi.cos());
    }
    Ok(t)
}

/// Time-domain patch from a (possibly predicted) spectral target.
/// Negative amplitudes from `exp(log_amp) - 1` are clamped to zero.
pub fn inverse_spectrum(target: &SpectralTarget) -> Vec<f64> {
    let w = target.patch_len;
    let nb = target.log_amp.len();
    let mut buf = vec![Complex64::new(0.0, 0.0); w];
    for k in 0..nb.min(w / 2 + 1) {
        let amp = target.log_amp[k].exp_m1().max(0.0);
        let (s, c) = (target.sin_phase[k], target.cos_phase[k]);
        let norm = (s * s + c * c).sqrt();
        let (s, c) = if norm > 0.0 { (s / norm, c / norm) } else { (0.0, 1.0) };
        let coeff = if k == 0 || k == w / 2 {
            Complex64::new(c, s) * (amp * w as f64)
        } else {
            Complex64::new(c, s) * (amp * w as f64 / 2.0)
        };
        buf[k] += coeff;
        if k != 0 && k != w / 2 {
            buf[w - k] += coeff.conj();
        }
    }
    FftPlanner::new().plan_fft_inverse(w).process(&mut buf);
    buf.iter().map(|c| c.re / w as f64).collect()
}

/// Squared chord length between two points on the unit circle.
pub fn chord_loss(phi1: f64, phi2: f64) -> f64 {
    (phi1.sin() - phi2.sin()).powi(2) + (phi1.cos() - phi2.cos()).powi(2)
}

/// Squared difference of raw angles; discontinuous at ±π.
pub fn raw_phase_mse(phi_hat: f64, phi: f64) -> f64 {
    (phi_hat - phi).powi(2)
}

/// Serializes a target as `bin,log_amp,sin,cos` rows.
pub fn target_csv(target: &SpectralTarget) -> String {
    let mut s = String::from("bin,log_amp,sin,cos\n");
    for k in 0..target.log_amp.len() {
        writeln!(
            s,
            "{},{},{},{}",
            k, target.log_amp[k], target.sin_phase[k], target.cos_phase[k]
        )
        .unwrap();
    }
    s
}

/// Spectral targets of a batch of patches, stacked as `[M, bins]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    pub log_amp: Tensor,
    pub sin_phase: Tensor,
    pub cos_phase: Tensor,
    /// Original patches, `[M, w]`.
    pub signal: Tensor,
}

impl TargetBatch {
    /// `patches` is `M × w`, row-major.
    pub fn from_patches(patches: &[f64], w: usize) -> Result<Self> {
        check_patch_len(w)?;
        let m = patches.len() / w;
        let nb = num_bins(w);
        let mut la = Vec::with_capacity(m * nb);
        let mut sp = Vec::with_capacity(m * nb);
        let mut cp = Vec::with_capacity(m * nb);
        for p in patches.chunks(w) {
            let t = forward_spectrum(p)?;
            la.extend(t.log_amp);
            sp.extend(t.sin_phase);
            cp.extend(t.cos_phase);
        }
        Ok(Self {
            log_amp: Tensor::new(vec![m, nb], la)?,
            sin_phase: Tensor::new(vec![m, nb], sp)?,
            cos_phase: Tensor::new(vec![m, nb], cp)?,
            signal: Tensor::new(vec![m, w], patches.to_vec())?,
        })
    }
}

/// Predicted spectra on a tape, each `[M, bins]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub log_amp: Var,
    pub sin: Var,
    pub cos: Var,
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub log_amp: Var,
    pub unit: Var,
    pub temporal: Var,
    pub total: Var,
}

/// Cosine synthesis basis `[w, bins]` and sine basis, for the real inverse.
pub fn synthesis_basis(w: usize) -> (Tensor, Tensor) {
    let nb = num_bins(w);
    let mut c = Vec::with_capacity(w * nb);
    let mut s = Vec::with_capacity(w * nb);
    for t in 0..w {
        for k in 0..nb {
            let a = TAU * (k * t % w) as f64 / w as f64;
            c.push(a.cos());
            s.push(a.sin());
        }
    }
    (
        Tensor::new(vec![w, nb], c).unwrap(),
        Tensor::new(vec![w, nb], s).unwrap(),
    )
}

/// `max(‖(cos, sin)‖², ε²)` on the tape.
fn clamped_sq_norm(tape: &mut Tape, sin: Var, cos: Var) -> Result<Var> {
    let s2 = tape.square(sin)?;
    let c2 = tape.square(cos)?;
    let sq = tape.add(s2, c2)?;
    Ok(tape.clamp_min(sq, PHASE_NORM_EPS * PHASE_NORM_EPS))
}

/// Differentiable inverse: `[M, bins]` predictions to `[M, w]` waveforms.
pub fn inverse_on_tape(tape: &mut Tape, pred: PredictionVars, w: usize) -> Result<Var> {
    let amp = tape.exp(pred.log_amp);
    let amp = tape.add_scalar(amp, -1.0);
    let amp = tape.relu(amp);
    let sq = clamped_sq_norm(tape, pred.sin, pred.cos)?;
    let norm = tape.sqrt(sq);
    let re = tape.mul(amp, pred.cos)?;
    let re = tape.div(re, norm)?;
    let im = tape.mul(amp, pred.sin)?;
    let im = tape.div(im, norm)?;
    let (bc, bs) = synthesis_basis(w);
    let bc = tape.constant(bc);
    let bs = tape.constant(bs);
    let xc = tape.linear(re, bc, None)?;
    let xs = tape.linear(im, bs, None)?;
    tape.sub(xc, xs)
}

/// Unit-circle phase loss, mean over all bins of all patches.
pub fn unit_circle_on_tape(
    tape: &mut Tape,
    sin: Var,
    cos: Var,
    target_sin: Var,
    target_cos: Var,
    lambda_circle: f64,
    denominator: PhaseDenominator,
) -> Result<Var> {
    let dot_c = tape.mul(cos, target_cos)?;
    let dot_s = tape.mul(sin, target_sin)?;
    let dot = tape.add(dot_c, dot_s)?;
    let sq = clamped_sq_norm(tape, sin, cos)?;
    let denom = match denominator {
        PhaseDenominator::PredictedNorm => tape.sqrt(sq),
        PhaseDenominator::PredictedNormSquared => sq,
    };
    let cos_sim = tape.div(dot, denom)?;
    let mean_sim = tape.mean(cos_sim);
    let one_minus = tape.scale(mean_sim, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);

    let s2 = tape.square(sin)?;
    let c2 = tape.square(cos)?;
    let raw_sq = tape.add(s2, c2)?;
    let dev = tape.add_scalar(raw_sq, -1.0);
    let dev2 = tape.square(dev)?;
    let pen = tape.mean(dev2);
    let pen = tape.scale(pen, lambda_circle);
    tape.add(one_minus, pen)
}

fn mse_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d)?;
    Ok(tape.mean(d2))
}

/// Log-amplitude MSE + unit-circle loss + temporal MSE on the tape.
pub fn tokenizer_loss_on_tape(
    tape: &mut Tape,
    pred: PredictionVars,
    target: &TargetBatch,
    weights: &LossWeights,
) -> Result<LossVars> {
    let shape = tape.shape(pred.log_amp).to_vec();
    for v in [pred.sin, pred.cos] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::Contract(format!(
                "prediction heads disagree: {:?} vs {:?}",
                tape.shape(v),
                shape
            )));
        }
    }
    if target.log_amp.shape() != shape.as_slice() {
        return Err(Error::Contract(format!(
            "prediction {:?} vs target {:?}",
            shape,
            target.log_amp.shape()
        )));
    }
    let w = target.signal.shape()[1];
    let tla = tape.constant(target.log_amp.clone());
    let tsin = tape.constant(target.sin_phase.clone());
    let tcos = tape.constant(target.cos_phase.clone());
    let tsig = tape.constant(target.signal.clone());

    let zero = || Tensor::scalar(0.0);
    let log_amp = if weights.log_amp {
        mse_on_tape(tape, pred.log_amp, tla)?
    } else {
        tape.constant(zero())
    };
    let unit = if weights.unit {
        unit_circle_on_tape(
            tape,
            pred.sin,
            pred.cos,
            tsin,
            tcos,
            weights.lambda_circle,
            weights.denominator,
        )?
    } else {
        tape.constant(zero())
    };
    let temporal = if weights.temporal {
        let xhat = inverse_on_tape(tape, pred, w)?;
        mse_on_tape(tape, xhat, tsig)?
    } else {
        tape.constant(zero())
    };
    let total = tape.add(log_amp, unit)?;
    let total = tape.add(total, temporal)?;
    Ok(LossVars {
        log_amp,
        unit,
        temporal,
        total,
    })
}

fn prediction_batch(tape: &mut Tape, preds: &[&PhasePrediction]) -> Result<PredictionVars> {
    let nb = preds.first().map_or(0, |p| p.log_amp_hat.len());
    let m = preds.len();
    let gather = |f: &dyn Fn(&PhasePrediction) -> &Vec<f64>| -> Result<Tensor> {
        let mut v = Vec::with_capacity(m * nb);
        for p in preds {
            let row = f(p);
            if row.len() != nb {
                return Err(Error::Contract(format!(
                    "prediction has {} bins, expected {nb}",
                    row.len()
                )));
            }
            v.extend_from_slice(row);
        }
        Tensor::new(vec![m, nb], v)
    };
    Ok(PredictionVars {
        log_amp: tape.constant(gather(&|p| &p.log_amp_hat)?),
        sin: tape.constant(gather(&|p| &p.sin_hat)?),
        cos: tape.constant(gather(&|p| &p.cos_hat)?),
    })
}

/// Unit-circle loss of one patch's phase prediction.
pub fn unit_circle_loss(
    pred: &PhasePrediction,
    target: &SpectralTarget,
    lambda_circle: f64,
) -> Result<f64> {
    let nb = target.sin_phase.len();
    if pred.sin_hat.len() != nb || pred.cos_hat.len() != nb || target.cos_phase.len() != nb {
        return Err(Error::Contract(format!(
            "phase arrays differ in length: sin_hat {}, cos_hat {}, target {}",
            pred.sin_hat.len(),
            pred.cos_hat.len(),
            nb
        )));
    }
    let mut tape = Tape::new();
    let row = |v: &Vec<f64>| Tensor::new(vec![1, v.len()], v.clone()).unwrap();
    let s = tape.constant(row(&pred.sin_hat));
    let c = tape.constant(row(&pred.cos_hat));
    let ts = tape.constant(row(&target.sin_phase));
    let tc = tape.constant(row(&target.cos_phase));
    let l = unit_circle_on_tape(
        &mut tape,
        s,
        c,
        ts,
        tc,
        lambda_circle,
        PhaseDenominator::PredictedNorm,
    )?;
    Ok(tape.value(l).item())
}

/// Tokenizer objective of one patch (excluding the quantization loss).
pub fn tokenizer_loss(
    pred: &PhasePrediction,
    target: &SpectralTarget,
    patch: &[f64],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    if patch.len() != target.patch_len {
        return Err(Error::Contract(format!(
            "patch has {} samples, target was built from {}",
            patch.len(),
            target.patch_len
        )));
    }
    let batch = TargetBatch {
        log_amp: Tensor::new(vec![1, target.log_amp.len()], target.log_amp.clone())?,
        sin_phase: Tensor::new(vec![1, target.sin_phase.len()], target.sin_phase.clone())?,
        cos_phase: Tensor::new(vec![1, target.cos_phase.len()], target.cos_phase.clone())?,
        signal: Tensor::new(vec![1, patch.len()], patch.to_vec())?,
    };
    let mut tape = Tape::new();
    let pv = prediction_batch(&mut tape, &[pred])?;
    let l = tokenizer_loss_on_tape(&mut tape, pv, &batch, weights)?;
    Ok(LossBreakdown {
        log_amp: tape.value(l.log_amp).item(),
        unit: tape.value(l.unit).item(),
        temporal: tape.value(l.temporal).item(),
        total: tape.value(l.total).item(),
    })
}

#[cfg(test)]
mod tests;
