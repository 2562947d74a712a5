use std::f64::consts::{FRAC_PI_2, PI, TAU};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check;

/// Direct O(w²) DFT, independent of the FFT path.
fn dft_oracle(x: &[f64]) -> Vec<(f64, f64)> {
    let w = x.len();
    (0..=w / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let a = -TAU * (k * t) as f64 / w as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            let scale = if k == 0 || k == w / 2 { 1.0 } else { 2.0 } / w as f64;
            ((re * re + im * im).sqrt() * scale, im.atan2(re))
        })
        .collect()
}

fn cosine(freq: f64, n: usize, rate: f64) -> Vec<f64> {
    (0..n).map(|t| (TAU * freq * t as f64 / rate).cos()).collect()
}

#[test]
fn cosine_on_bin_has_unit_amplitude() {
    let x = cosine(10.0, 200, 200.0);
    let t = forward_spectrum(&x).unwrap();
    let oracle = dft_oracle(&x);
    assert!((t.log_amp[10] - 2f64.ln()).abs() < 1e-12);
    assert!((t.cos_phase[10] - 1.0).abs() < 1e-12);
    for (k, (a, _)) in oracle.iter().enumerate() {
        assert!(((t.log_amp[k].exp_m1()) - a).abs() < 1e-10);
        if k != 10 {
            assert!(t.log_amp[k] < 1e-12);
        }
    }
}

#[test]
fn sine_has_minus_half_pi_phase() {
    let x: Vec<f64> = (0..200)
        .map(|t| (TAU * 5.0 * t as f64 / 200.0).sin())
        .collect();
    let t = forward_spectrum(&x).unwrap();
    let (_, phi) = dft_oracle(&x)[5];
    assert!((phi + FRAC_PI_2).abs() < 1e-10);
    assert!((t.sin_phase[5] + 1.0).abs() < 1e-12);
}

#[test]
fn zero_patch_has_zero_amplitude() {
    let t = forward_spectrum(&[0.0; 64]).unwrap();
    assert!(t.log_amp.iter().all(|v| *v == 0.0));
    assert_eq!(t.log_amp.len(), 33);
}

#[test]
fn odd_patch_is_rejected() {
    assert!(matches!(
        forward_spectrum(&[0.0; 63]),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn random_patches_match_dft_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for w in [8, 64, 200] {
        let x: Vec<f64> = (0..w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = forward_spectrum(&x).unwrap();
        for (k, (a, phi)) in dft_oracle(&x).into_iter().enumerate() {
            assert!((t.log_amp[k].exp_m1() - a).abs() < 1e-10);
            if a > 1e-9 {
                // compare angles on the circle
                assert!(chord_loss(t.sin_phase[k].atan2(t.cos_phase[k]), phi) < 1e-16);
            }
        }
    }
}

#[test]
fn target_is_on_unit_circle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = forward_spectrum(&x).unwrap();
    for k in 0..t.sin_phase.len() {
        assert!((t.sin_phase[k].powi(2) + t.cos_phase[k].powi(2) - 1.0).abs() < 1e-9);
        assert!(t.log_amp[k] >= 0.0);
    }
}

#[test]
fn inverse_of_zero_target_is_zero() {
    let t = forward_spectrum(&[0.0; 32]).unwrap();
    assert!(inverse_spectrum(&t).iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn inverse_of_pure_cosine_matches_waveform() {
    let x = cosine(10.0, 200, 200.0);
    let y = inverse_spectrum(&forward_spectrum(&x).unwrap());
    for (a, b) in y.iter().zip(&x) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn inverse_clamps_negative_amplitude() {
    let t = SpectralTarget {
        log_amp: vec![-1.0; 5],
        sin_phase: vec![0.0; 5],
        cos_phase: vec![1.0; 5],
        patch_len: 8,
    };
    assert!(inverse_spectrum(&t).iter().all(|v| *v == 0.0));
}

#[test]
fn tape_inverse_agrees_with_fft_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = 64;
    let x: Vec<f64> = (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = forward_spectrum(&x).unwrap();
    let mut tape = Tape::new();
    let row = |v: &Vec<f64>| Tensor::new(vec![1, v.len()], v.clone()).unwrap();
    let pv = PredictionVars {
        log_amp: tape.constant(row(&t.log_amp)),
        sin: tape.constant(row(&t.sin_phase)),
        cos: tape.constant(row(&t.cos_phase)),
    };
    let y = inverse_on_tape(&mut tape, pv, w).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&x) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn unit_loss_zero_at_exact_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = forward_spectrum(&x).unwrap();
    let l = unit_circle_loss(&PhasePrediction::from(&t), &t, 0.4).unwrap();
    assert!(l.abs() < 1e-12);
}

#[test]
fn unit_loss_zero_prediction_hits_clamp() {
    let t = forward_spectrum(&cosine(3.0, 16, 16.0)).unwrap();
    let pred = PhasePrediction {
        log_amp_hat: t.log_amp.clone(),
        sin_hat: vec![0.0; 9],
        cos_hat: vec![0.0; 9],
    };
    // similarity 0, penalty (0 - 1)^2 = 1 per bin
    let l = unit_circle_loss(&pred, &t, 0.4).unwrap();
    assert!((l - 1.4).abs() < 1e-12);
}

#[test]
fn unit_loss_is_continuous_across_pi() {
    let a = PI - 1e-3;
    let b = -PI + 1e-3;
    let pred = PhasePrediction {
        log_amp_hat: vec![0.0],
        sin_hat: vec![a.sin()],
        cos_hat: vec![a.cos()],
    };
    let target = SpectralTarget {
        log_amp: vec![0.0],
        sin_phase: vec![b.sin()],
        cos_phase: vec![b.cos()],
        patch_len: 0,
    };
    let l = unit_circle_loss(&pred, &target, 0.4).unwrap();
    let expect = 1.0 - (2e-3f64).cos();
    assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");
    assert!(l < 2.1e-6);
}

#[test]
fn unit_loss_rejects_length_mismatch() {
    let t = forward_spectrum(&[0.0; 8]).unwrap();
    let pred = PhasePrediction {
        log_amp_hat: vec![0.0; 5],
        sin_hat: vec![0.0; 4],
        cos_hat: vec![0.0; 5],
    };
    assert!(matches!(
        unit_circle_loss(&pred, &t, 0.4),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn printed_denominator_variant_differs_off_circle() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let c = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let ts = tape.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let tc = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let a = unit_circle_on_tape(&mut tape, s, c, ts, tc, 0.0, PhaseDenominator::PredictedNorm)
        .unwrap();
    let b = unit_circle_on_tape(
        &mut tape,
        s,
        c,
        ts,
        tc,
        0.0,
        PhaseDenominator::PredictedNormSquared,
    )
    .unwrap();
    assert!(tape.value(a).item().abs() < 1e-15);
    assert!((tape.value(b).item() - 0.5).abs() < 1e-15);
}

#[test]
fn tokenizer_loss_exact_prediction_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = forward_spectrum(&x).unwrap();
    let l = tokenizer_loss(&PhasePrediction::from(&t), &t, &x, &LossWeights::default()).unwrap();
    assert!(l.total.abs() < 1e-12, "{l:?}");
}

#[test]
fn tokenizer_loss_rotated_phase_gives_unit_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = forward_spectrum(&x).unwrap();
    let mut pred = PhasePrediction::from(&t);
    for v in pred.sin_hat.iter_mut().chain(pred.cos_hat.iter_mut()) {
        *v = -*v;
    }
    let l = tokenizer_loss(&pred, &t, &x, &LossWeights::default()).unwrap();
    assert!((l.unit - 2.0).abs() < 1e-12);
    assert!(l.log_amp.abs() < 1e-15);
    // rotating every phase by π negates the waveform
    let energy = x.iter().map(|v| v * v).sum::<f64>() / 64.0;
    assert!((l.temporal - 4.0 * energy).abs() < 1e-9);
}

#[test]
fn tokenizer_loss_zero_on_zero() {
    let x = vec![0.0; 16];
    let t = forward_spectrum(&x).unwrap();
    let pred = PhasePrediction {
        log_amp_hat: vec![0.0; 9],
        sin_hat: vec![0.0; 9],
        cos_hat: vec![1.0; 9],
    };
    let l = tokenizer_loss(&pred, &t, &x, &LossWeights::default()).unwrap();
    assert_eq!(l.total, 0.0);
}

#[test]
fn breakdown_terms_sum_to_total() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = forward_spectrum(&x).unwrap();
    let pred = PhasePrediction {
        log_amp_hat: (0..17).map(|_| rng.gen_range(0.0..1.0)).collect(),
        sin_hat: (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        cos_hat: (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let l = tokenizer_loss(&pred, &t, &x, &LossWeights::default()).unwrap();
    assert!((l.log_amp + l.unit + l.temporal - l.total).abs() < 1e-12);
}

#[test]
fn chord_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let a = rng.gen_range(-PI..PI);
        let b = rng.gen_range(-PI..PI);
        let c = chord_loss(a, b);
        assert!((c - (2.0 - 2.0 * (a - b).cos())).abs() < 1e-12);
        assert!((c - 4.0 * ((a - b) / 2.0).sin().powi(2)).abs() < 1e-12);
    }
    assert_eq!(chord_loss(1.3, 1.3), 0.0);
    assert!((chord_loss(0.0, PI) - 4.0).abs() < 1e-12);
}

#[test]
fn raw_phase_mse_jumps_at_boundary() {
    let eps = 1e-3;
    assert!(raw_phase_mse(PI - eps, -PI + eps) > 4.0 * PI * PI - 0.1);
    assert!(chord_loss(PI - eps, -PI + eps) <= 5.0 * eps * eps);
}

#[test]
fn target_csv_layout() {
    let t = forward_spectrum(&cosine(1.0, 4, 4.0)).unwrap();
    let csv = target_csv(&t);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "bin,log_amp,sin,cos");
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("1,"));
}

#[test]
fn tokenizer_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = 16;
    let nb = num_bins(w);
    let x: Vec<f64> = (0..2 * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target = TargetBatch::from_patches(&x, w).unwrap();
    let init = Tensor::uniform(&[3, 2, nb], 0.9, &mut rng);
    let weights = LossWeights::default();
    let report = grad_check(
        |tape, p| {
            let la = tape.slice(p, 0, 0, 1)?;
            let la = tape.reshape(la, &[2, nb])?;
            // keep amplitudes positive so the clamp is inactive
            let la = tape.add_scalar(la, 1.0);
            let s = tape.slice(p, 0, 1, 1)?;
            let s = tape.reshape(s, &[2, nb])?;
            let c = tape.slice(p, 0, 2, 1)?;
            let c = tape.reshape(c, &[2, nb])?;
            let l = tokenizer_loss_on_tape(
                tape,
                PredictionVars {
                    log_amp: la,
                    sin: s,
                    cos: c,
                },
                &target,
                &weights,
            )?;
            Ok(l.total)
        },
        &init,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

proptest! {
    #[test]
    fn round_trip_and_parseval(seed in 0u64..1000, half in 1usize..40) {
        let w = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t = forward_spectrum(&x).unwrap();
        let y = inverse_spectrum(&t);
        for (a, b) in y.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let implied: f64 = t.log_amp.iter().enumerate().map(|(k, l)| {
            let a = l.exp_m1();
            if k == 0 || k == w / 2 { w as f64 * a * a } else { w as f64 * a * a / 2.0 }
        }).sum();
        prop_assert!((energy - implied).abs() <= 1e-6 * energy.max(1e-12));
    }

    #[test]
    fn unit_loss_permutation_invariant_and_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb = 9;
        let phi: Vec<f64> = (0..nb).map(|_| rng.gen_range(-PI..PI)).collect();
        let target = SpectralTarget {
            log_amp: vec![0.0; nb],
            sin_phase: phi.iter().map(|p| p.sin()).collect(),
            cos_phase: phi.iter().map(|p| p.cos()).collect(),
            patch_len: 16,
        };
        let pred = PhasePrediction {
            log_amp_hat: vec![0.0; nb],
            sin_hat: (0..nb).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            cos_hat: (0..nb).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        };
        let l = unit_circle_loss(&pred, &target, 0.4).unwrap();
        prop_assert!(l >= 0.0);
        let mut perm: Vec<usize> = (0..nb).collect();
        perm.reverse();
        perm.swap(0, 3);
        let p = |v: &Vec<f64>| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pt = SpectralTarget {
            log_amp: p(&target.log_amp),
            sin_phase: p(&target.sin_phase),
            cos_phase: p(&target.cos_phase),
            patch_len: 16,
        };
        let pp = PhasePrediction {
            log_amp_hat: p(&pred.log_amp_hat),
            sin_hat: p(&pred.sin_hat),
            cos_hat: p(&pred.cos_hat),
        };
        let lp = unit_circle_loss(&pp, &pt, 0.4).unwrap();
        prop_assert!((l - lp).abs() < 1e-12);
    }
}
