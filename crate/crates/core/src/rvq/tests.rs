use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check;

fn book(rows: &[&[f64]]) -> Codebook {
    let d = rows[0].len();
    Codebook::new(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap())
}

/// Independent scan: cosine-based distance, first minimum wins.
fn brute_force(p: &[f64], book: &Codebook) -> usize {
    let pn = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = (0, f64::INFINITY);
    for j in 0..book.size() {
        let e = book.entry(j);
        let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = p.iter().zip(e).map(|(a, b)| a * b).sum();
        let d = match (pn > 0.0, en > 0.0) {
            (true, true) => 2.0 - 2.0 * dot / (pn * en),
            (true, false) | (false, true) => 1.0,
            (false, false) => 0.0,
        };
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

#[test]
fn exact_member_is_selected() {
    let b = book(&[&[5.0, -5.0, 0.0], &[0.3, 0.1, 0.7], &[-2.0, 0.0, 1.0]]);
    let (j, z) = quantize_level(&[0.3, 0.1, 0.7], &b, DistanceMetric::Normalized).unwrap();
    assert_eq!(j, 1);
    assert_eq!(z, &[0.3, 0.1, 0.7]);
}

#[test]
fn collinear_codeword_wins_and_is_returned_raw() {
    let b = book(&[&[2.0, 0.0], &[0.0, 3.0]]);
    let (j, z) = quantize_level(&[1.0, 0.0], &b, DistanceMetric::Normalized).unwrap();
    assert_eq!((j, z), (0, &[2.0, 0.0][..]));
}

#[test]
fn euclidean_flag_uses_raw_distance() {
    let b = book(&[&[10.0, 0.0], &[0.0, 1.0]]);
    let (n, _) = quantize_level(&[1.0, 0.2], &b, DistanceMetric::Normalized).unwrap();
    let (e, _) = quantize_level(&[1.0, 0.2], &b, DistanceMetric::Euclidean).unwrap();
    assert_eq!((n, e), (0, 1));
}

#[test]
fn ties_go_to_lowest_index() {
    let b = book(&[&[0.0, 1.0], &[1.0, 0.0], &[3.0, 0.0]]);
    assert_eq!(quantize_level(&[1.0, 0.0], &b, DistanceMetric::Normalized).unwrap().0, 1);
    let b = book(&[&[1.0, 1.0], &[1.0, -1.0]]);
    assert_eq!(quantize_level(&[1.0, 0.0], &b, DistanceMetric::Normalized).unwrap().0, 0);
}

#[test]
fn empty_codebook_is_a_config_error() {
    let b = Codebook::new(Tensor::zeros(&[0, 2]));
    assert!(matches!(
        quantize_level(&[1.0, 0.0], &b, DistanceMetric::Normalized),
        Err(Error::Config(_))
    ));
}

#[test]
fn random_queries_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = Codebook::random(16, 6, &mut rng);
    for _ in 0..100 {
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (j, _) = quantize_level(&p, &b, DistanceMetric::Normalized).unwrap();
        assert_eq!(j, brute_force(&p, &b));
    }
}

#[test]
fn single_level_exact_member_has_zero_residual() {
    let b = book(&[&[1.0, 2.0], &[-0.5, 0.25]]);
    let a = quantize_codes(&[-0.5, 0.25], 2, &[b], DistanceMetric::Normalized).unwrap();
    assert_eq!(a.final_residual, vec![0.0, 0.0]);
    assert_eq!(a.reconstruction, vec![-0.5, 0.25]);
}

#[test]
fn two_orthogonal_levels_recover_the_sum() {
    let b1 = book(&[&[3.0, 0.0], &[0.0, 1.0]]);
    let b2 = book(&[&[3.0, 0.0], &[0.0, 1.0]]);
    let a = quantize_codes(&[3.0, 1.0], 2, &[b1, b2], DistanceMetric::Normalized).unwrap();
    assert_eq!(a.indices, vec![vec![0, 1]]);
    assert_eq!(a.final_residual, vec![0.0, 0.0]);
}

#[test]
fn non_finite_input_is_rejected() {
    let b = book(&[&[1.0, 0.0]]);
    assert!(matches!(
        quantize_codes(&[f64::NAN, 0.0], 2, &[b], DistanceMetric::Normalized),
        Err(Error::NonFinite { index: 0, .. })
    ));
}

#[test]
fn commitment_loss_examples() {
    let p = [1.0, 0.0];
    let z = [0.0, 0.0];
    assert!((quantization_loss(&[&p], &[&z], 0.25).unwrap() - 0.125).abs() < 1e-15);
    assert_eq!(quantization_loss(&[&p, &z], &[&p, &z], 0.25).unwrap(), 0.0);
    let a = quantization_loss(&[&p], &[&z], 0.25).unwrap();
    let b = quantization_loss(&[&p], &[&z], 0.5).unwrap();
    assert!((b - 2.0 * a).abs() < 1e-15);
    assert!(quantization_loss(&[&p], &[], 0.25).is_err());
}

#[test]
fn tape_commitment_loss_matches_plain_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let books: Vec<Codebook> = (0..3).map(|_| Codebook::random(8, 4, &mut rng)).collect();
    let h = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let a = quantize_codes(h.data(), 4, &books, DistanceMetric::Normalized).unwrap();
    let mut tape = Tape::new();
    let hv = tape.constant(h);
    let l = quantization_loss_on_tape(&mut tape, hv, &a, 0.25).unwrap();
    let ps: Vec<&[f64]> = a.residuals.iter().map(Vec::as_slice).collect();
    let zs: Vec<&[f64]> = a.codewords.iter().map(Vec::as_slice).collect();
    let plain = quantization_loss(&ps, &zs, 0.25).unwrap();
    assert!((tape.value(l).item() - plain).abs() < 1e-12);
}

#[test]
fn straight_through_forward_and_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let mut tape = Tape::new();
    let pv = tape.var(p);
    let st = tape.straight_through(pv, &q).unwrap();
    assert_eq!(tape.value(st), &q);
    let s = tape.sum(st);
    let mut g = tape.backward(s).unwrap();
    assert!(g.take(pv).unwrap().data().iter().all(|v| *v == 1.0));
}

#[test]
fn stack_gradient_with_frozen_assignment_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let cfg = RvqConfig {
        levels: 2,
        codebook_size: 8,
        code_dim: 4,
        ..RvqConfig::desk()
    };
    let stack = RvqStack::new(&mut store, "rvq", 6, cfg, &mut rng).unwrap();
    let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
    // freeze the code choice at the unperturbed input; the quantizer then
    // acts as the constant shift `recon - h(x0)`
    let frozen = stack.encode(&store, &x).unwrap();
    let recon = Tensor::new(vec![3, 4], frozen.reconstruction.clone()).unwrap();
    let shift = {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let h = stack.project_down(&mut tape, &store, xv).unwrap();
        let d: Vec<f64> = recon.data().iter().zip(tape.value(h).data()).map(|(r, h)| r - h).collect();
        Tensor::new(vec![3, 4], d).unwrap()
    };
    let loss = |tape: &mut Tape, xv: Var, st: bool| -> crate::Result<Var> {
        let h = stack.project_down(tape, &store, xv)?;
        let q = if st {
            tape.straight_through(h, &recon)?
        } else {
            let c = tape.constant(shift.clone());
            tape.add(h, c)?
        };
        let y = stack.project_up(tape, &store, q)?;
        let y = tape.square(y)?;
        let y = tape.sum(y);
        let lq = quantization_loss_on_tape(tape, h, &frozen, 0.25)?;
        tape.add(y, lq)
    };
    let report = grad_check(|tape, xv| loss(tape, xv, false), &x, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);

    let mut tape = Tape::new();
    let xv = tape.var(x.clone());
    let l = loss(&mut tape, xv, true).unwrap();
    let mut g = tape.backward(l).unwrap();
    for (a, b) in g.take(xv).unwrap().data().iter().zip(&report.analytic) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn stack_forward_telescopes_and_decodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let stack = RvqStack::new(&mut store, "rvq", 8, RvqConfig { codebook_size: 16, ..RvqConfig::desk() }, &mut rng).unwrap();
    let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = stack.forward(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.shape(out.quantized), &[4, 8]);
    let dec = stack.decode_indices(&store, &out.assignment.indices).unwrap();
    for (a, b) in dec.data().iter().zip(tape.value(out.quantized).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(stack.encode(&store, &x).unwrap(), out.assignment);
}

#[test]
fn ema_converges_to_repeated_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut b = Codebook::random(4, 3, &mut rng);
    let cfg = RvqConfig {
        dead_window: usize::MAX,
        ..RvqConfig::desk()
    };
    let u = [0.7, -1.2, 2.5];
    for _ in 0..2000 {
        let batch: Vec<(usize, &[f64])> = (0..8).map(|_| (2, &u[..])).collect();
        ema_update(&mut b, &batch, &cfg, &mut rng);
    }
    for (e, t) in b.entry(2).iter().zip(&u) {
        assert!((e - t).abs() < 1e-3, "{e} vs {t}");
    }
    assert!(b.entries.all_finite());
    assert!(b.cluster_size.iter().all(|c| *c >= 0.0));
}

#[test]
fn empty_batch_only_decays_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut b = Codebook::random(4, 3, &mut rng);
    let before = b.entries.clone();
    ema_update(&mut b, &[], &RvqConfig::desk(), &mut rng);
    assert_eq!(b.entries, before);
    assert!(b.cluster_size.iter().all(|c| (*c - 0.99).abs() < 1e-15));
}

#[test]
fn dead_code_reinit_respects_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut b = Codebook::random(2, 2, &mut rng);
    let cfg = RvqConfig {
        dead_window: 5,
        ..RvqConfig::desk()
    };
    let u = [1.0, 1.0];
    let batch: Vec<(usize, &[f64])> = vec![(0, &u[..]); 4];
    // code 1 falls below threshold on the first update and must survive
    // four more before reinitialization
    let mut fired = Vec::new();
    for _ in 0..5 {
        fired.push(ema_update(&mut b, &batch, &cfg, &mut rng));
    }
    assert_eq!(fired, vec![0, 0, 0, 0, 1]);
    assert!(b.entry(1).iter().all(|v| (v - 1.0).abs() < 2e-3));
    assert_eq!(b.low_usage[1], 0);
}

#[test]
fn kmeans_recovers_cluster_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut samples = Vec::new();
    let mut sums = [[0.0; 2]; 2];
    for i in 0..40 {
        let c = i % 2;
        let base = if c == 0 { [5.0, 0.0] } else { [0.0, 5.0] };
        let p = [base[0] + rng.gen_range(-0.5..0.5), base[1] + rng.gen_range(-0.5..0.5)];
        sums[c][0] += p[0] / 20.0;
        sums[c][1] += p[1] / 20.0;
        samples.extend_from_slice(&p);
    }
    let (c, status) = kmeans_init(&samples, 2, 2, 20, &mut rng).unwrap();
    assert_eq!(status.padded, 0);
    for m in sums {
        let hit = (0..2).any(|j| c.row(j).iter().zip(&m).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(hit, "{m:?} not in {:?}", c.data());
    }
}

#[test]
fn kmeans_with_k_equal_n_permutes_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let samples: Vec<f64> = (0..6)
        .flat_map(|i| {
            let a = i as f64 * 0.9;
            [a.cos() * (1.0 + i as f64), a.sin()]
        })
        .collect();
    let (c, status) = kmeans_init(&samples, 2, 6, 10, &mut rng).unwrap();
    assert_eq!(status.padded, 0);
    let mut got: Vec<Vec<u64>> = (0..6).map(|j| c.row(j).iter().map(|v| v.to_bits()).collect()).collect();
    let mut want: Vec<Vec<u64>> = samples.chunks(2).map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn kmeans_is_deterministic_and_pads_duplicates() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let a = kmeans_init(&samples, 2, 4, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = kmeans_init(&samples, 2, 4, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);

    let dup = [1.0, 0.0, 2.0, 0.0, 1.0, 0.0];
    let (c, status) = kmeans_init(&dup, 2, 3, 5, &mut rng).unwrap();
    assert_eq!(status.padded, 2);
    assert!(c.all_finite());
    assert!(kmeans_init(&dup, 2, 4, 5, &mut rng).is_err());
}

proptest! {
    #[test]
    fn telescoping_holds(seed in 0u64..500, levels in 1usize..6, rows in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books: Vec<Codebook> = (0..levels).map(|_| Codebook::random(8, 5, &mut rng)).collect();
        let p: Vec<f64> = (0..rows * 5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let a = quantize_codes(&p, 5, &books, DistanceMetric::Normalized).unwrap();
        for i in 0..p.len() {
            let s: f64 = a.codewords.iter().map(|z| z[i]).sum::<f64>() + a.final_residual[i];
            prop_assert!((s - p[i]).abs() <= 1e-10);
        }
        let again = quantize_codes(&p, 5, &books, DistanceMetric::Normalized).unwrap();
        prop_assert_eq!(a.indices, again.indices);
    }

    #[test]
    fn ema_stays_finite(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Codebook::random(8, 3, &mut rng);
        let cfg = RvqConfig { dead_window: 3, ..RvqConfig::desk() };
        for _ in 0..20 {
            let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let pairs: Vec<(usize, &[f64])> = xs.iter().map(|x| (rng.gen_range(0..8), x.as_slice())).collect();
            ema_update(&mut b, &pairs, &cfg, &mut rng);
            prop_assert!(b.entries.all_finite());
            prop_assert!(b.cluster_size.iter().all(|c| *c >= 0.0));
        }
    }
}
