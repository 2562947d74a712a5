use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check;

fn tiny_cfg() -> EncoderConfig {
    EncoderConfig {
        patch_len: 16,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_hidden: 16,
        branches: BranchConfig::reference(),
        groups: 4,
        num_electrodes: 4,
        max_slots: 4,
        qk_norm: true,
    }
}

fn batch(b: usize, p: usize, w: usize, seed: u64) -> PatchBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchBatch {
        patches: Tensor::randn(&[b, p, w], 1.0, &mut rng),
        channel_idx: (0..b * p).map(|i| i % 3).collect(),
        slot_idx: (0..b * p).map(|i| (i % p) % 4).collect(),
    }
}

fn build(cfg: EncoderConfig, seed: u64) -> (ParamStore, MultiScaleEncoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = MultiScaleEncoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
    (store, enc)
}

#[test]
fn reference_branches_flatten_to_patch_length() {
    for b in BranchConfig::reference() {
        assert_eq!(b.output_extent(200).unwrap(), (8, 25));
        assert_eq!(b.output_extent(64).unwrap(), (8, 8));
        b.validate(200, 4).unwrap();
        b.validate(64, 4).unwrap();
    }
}

#[test]
fn mismatched_branch_is_rejected() {
    let b = BranchConfig::new([21, 9], [0, 0]);
    assert!(matches!(b.validate(200, 4), Err(Error::Config(_))));
    let mut cfg = EncoderConfig::desk();
    cfg.patch_len = 60;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = EncoderConfig::desk();
    cfg.branches.clear();
    assert!(cfg.validate().is_err());
}

#[test]
fn zero_patch_gives_zero_feature() {
    let (store, enc) = build(EncoderConfig::desk(), 1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 64]));
    for b in &enc.branches {
        let f = b.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(f), &[2, 64]);
        assert!(tape.value(f).data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn paper_branch_output_length() {
    let mut cfg = EncoderConfig::paper();
    cfg.depth = 0;
    let (store, enc) = build(cfg, 2);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = tape.constant(Tensor::randn(&[1, 200], 1.0, &mut rng));
    let f = enc.branches[0].forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.shape(f), &[1, 200]);
}

#[test]
fn paper_scale_output_extents() {
    let (store, enc) = build(EncoderConfig::paper(), 4);
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &store, &batch(1, 3, 200, 5)).unwrap();
    assert_eq!(out.len(), 4);
    for o in out {
        assert_eq!(tape.shape(o), &[3, 200]);
    }
}

#[test]
fn zero_tables_leave_features_unchanged() {
    let (mut store, enc) = build(tiny_cfg(), 6);
    store.set_value(enc.tables.spatial, Tensor::zeros(&[4, 16])).unwrap();
    store.set_value(enc.tables.temporal, Tensor::zeros(&[4, 16])).unwrap();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let f = tape.constant(Tensor::randn(&[3, 16], 1.0, &mut rng));
    let h = enc.tables.add(&mut tape, &store, f, &[0, 1, 2], &[0, 1, 2]).unwrap();
    assert_eq!(tape.value(h), tape.value(f));
}

#[test]
fn same_channel_gets_same_spatial_row() {
    let (mut store, enc) = build(tiny_cfg(), 8);
    store.set_value(enc.tables.temporal, Tensor::zeros(&[4, 16])).unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::zeros(&[3, 16]));
    let h = enc.tables.add(&mut tape, &store, f, &[2, 1, 2], &[0, 1, 3]).unwrap();
    let v = tape.value(h);
    assert_eq!(v.row(0), v.row(2));
    assert_eq!(v.row(0), store.value(enc.tables.spatial).row(2));
}

#[test]
fn swapping_slots_swaps_temporal_contribution() {
    let (store, enc) = build(tiny_cfg(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let feats = Tensor::randn(&[2, 16], 1.0, &mut rng);
    let mut tape = Tape::new();
    let f = tape.constant(feats);
    let a = enc.tables.add(&mut tape, &store, f, &[1, 1], &[0, 3]).unwrap();
    let b = enc.tables.add(&mut tape, &store, f, &[1, 1], &[3, 0]).unwrap();
    let te = store.value(enc.tables.temporal);
    for p in 0..2 {
        let (ra, rb) = (tape.value(a).row(p), tape.value(b).row(p));
        for j in 0..16 {
            let expect = te.row(3)[j] - te.row(0)[j];
            let got = rb[j] - ra[j];
            let sign = if p == 0 { 1.0 } else { -1.0 };
            assert!((got - sign * expect).abs() < 1e-12);
        }
    }
}

#[test]
fn out_of_range_provenance_is_a_lookup_error() {
    let (store, enc) = build(tiny_cfg(), 11);
    let mut b = batch(1, 2, 16, 12);
    b.channel_idx[1] = 4;
    let mut tape = Tape::new();
    assert!(matches!(
        enc.forward(&mut tape, &store, &b),
        Err(Error::Lookup { index: 4, len: 4, .. })
    ));
}

#[test]
fn depth_zero_is_the_input_projection() {
    let mut cfg = tiny_cfg();
    cfg.depth = 0;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let t = Transformer::new(&mut store, "t", cfg.transformer(), &mut rng).unwrap();
    let x = Tensor::randn(&[2, 3, 16], 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = t.forward(&mut tape, &store, xv).unwrap();
    let w = store.value(store.id("t.input_proj.weight").unwrap());
    for r in 0..6 {
        for o in 0..8 {
            let expect: f64 = (0..16).map(|i| w.row(o)[i] * x.data()[r * 16 + i]).sum();
            assert!((tape.value(y).data()[r * 8 + o] - expect).abs() < 1e-12);
        }
    }

    let mut cfg = cfg.transformer();
    cfg.input_dim = cfg.dim;
    let t = Transformer::new(&mut ParamStore::new(), "u", cfg, &mut rng).unwrap();
    let xv = tape.constant(Tensor::randn(&[1, 2, 8], 1.0, &mut rng));
    let y = t.forward(&mut tape, &ParamStore::new(), xv).unwrap();
    assert_eq!(tape.value(y), tape.value(xv));
}

#[test]
fn single_patch_ignores_query_and_key_weights() {
    let (store, enc) = build(tiny_cfg(), 14);
    let b = batch(2, 1, 16, 15);
    let mut tape = Tape::new();
    let before = enc.forward(&mut tape, &store, &b).unwrap();
    let mut other = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for name in ["q", "k"] {
        let id = other.id(&format!("enc.transformer.block0.attn.{name}.weight")).unwrap();
        other.set_value(id, Tensor::randn(&[8, 8], 3.0, &mut rng)).unwrap();
    }
    let mut tape2 = Tape::new();
    let after = enc.forward(&mut tape2, &other, &b).unwrap();
    for (x, y) in before.iter().zip(&after) {
        for (a, c) in tape.value(*x).data().iter().zip(tape2.value(*y).data()) {
            assert!((a - c).abs() < 1e-12);
        }
    }
}

#[test]
fn permuting_branches_permutes_outputs() {
    let (store, enc) = build(tiny_cfg(), 17);
    let b = batch(2, 3, 16, 18);
    let mut tape = Tape::new();
    let tokens = enc.embed(&mut tape, &store, &b).unwrap();
    let fwd = enc.contextualize(&mut tape, &store, &tokens, 2).unwrap();
    let rev: Vec<Var> = tokens.iter().rev().copied().collect();
    let bwd = enc.contextualize(&mut tape, &store, &rev, 2).unwrap();
    for (i, v) in fwd.iter().enumerate() {
        let u = bwd[fwd.len() - 1 - i];
        for (a, c) in tape.value(*v).data().iter().zip(tape.value(u).data()) {
            assert!((a - c).abs() < 1e-12);
        }
    }
}

#[test]
fn single_branch_config_runs() {
    let mut cfg = tiny_cfg();
    cfg.branches.truncate(1);
    let (store, enc) = build(cfg, 19);
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &store, &batch(2, 3, 16, 20)).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(tape.shape(out[0]), &[6, 8]);
}

#[test]
fn seeded_construction_is_deterministic() {
    let (s1, e1) = build(tiny_cfg(), 21);
    let (s2, e2) = build(tiny_cfg(), 21);
    let b = batch(1, 3, 16, 22);
    let (mut t1, mut t2) = (Tape::new(), Tape::new());
    let o1 = e1.forward(&mut t1, &s1, &b).unwrap();
    let o2 = e2.forward(&mut t2, &s2, &b).unwrap();
    for (a, c) in o1.iter().zip(&o2) {
        assert_eq!(t1.value(*a), t2.value(*c));
    }
}

#[test]
fn branch_features_are_local_to_their_patch() {
    let (store, enc) = build(tiny_cfg(), 23);
    let b = batch(1, 4, 16, 24);
    let mut changed = b.clone();
    for v in &mut changed.patches.data_mut()[16..32] {
        *v += 0.5;
    }
    let mut tape = Tape::new();
    let f1 = enc.embed(&mut tape, &store, &b).unwrap();
    let f2 = enc.embed(&mut tape, &store, &changed).unwrap();
    for (a, c) in f1.iter().zip(&f2) {
        let (a, c) = (tape.value(*a), tape.value(*c));
        for p in 0..4 {
            let same = a.row(p) == c.row(p);
            assert_eq!(same, p != 1, "patch {p}");
        }
    }
}

#[test]
fn permuting_patches_with_provenance_permutes_representations() {
    let (store, enc) = build(tiny_cfg(), 25);
    let b = batch(1, 4, 16, 26);
    let perm = [2, 0, 3, 1];
    let w = 16;
    let mut data = Vec::new();
    for &i in &perm {
        data.extend_from_slice(&b.patches.data()[i * w..(i + 1) * w]);
    }
    let pb = PatchBatch {
        patches: Tensor::new(vec![1, 4, w], data).unwrap(),
        channel_idx: perm.iter().map(|&i| b.channel_idx[i]).collect(),
        slot_idx: perm.iter().map(|&i| b.slot_idx[i]).collect(),
    };
    let mut tape = Tape::new();
    let o1 = enc.forward(&mut tape, &store, &b).unwrap();
    let o2 = enc.forward(&mut tape, &store, &pb).unwrap();
    for (a, c) in o1.iter().zip(&o2) {
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in tape.value(*a).row(i).iter().zip(tape.value(*c).row(k)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoder_input_gradient_matches_finite_differences() {
    let (store, enc) = build(tiny_cfg(), 27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let head = Tensor::randn(&[1, 8], 1.0, &mut rng);
    let b = batch(1, 3, 16, 29);
    let report = grad_check(
        |tape, x| {
            let m = 3;
            let flat = tape.reshape(x, &[m, 16])?;
            let mut feats = Vec::new();
            for br in &enc.branches {
                let f = br.forward(tape, &store, flat)?;
                feats.push(enc.tables.add(tape, &store, f, &b.channel_idx, &b.slot_idx)?);
            }
            let reps = enc.contextualize(tape, &store, &feats, 1)?;
            let hv = tape.constant(head.clone());
            let mut total = None;
            for r in reps {
                let y = tape.linear(r, hv, None)?;
                let y = tape.square(y)?;
                let s = tape.sum(y);
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        },
        &b.patches,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

#[test]
fn batch_from_grids_checks_sizes() {
    let g = PatchGrid {
        patches: vec![0.0; 32],
        channel_idx: vec![0, 1],
        slot_idx: vec![0, 0],
        patch_len: 16,
        sample_rate: 16.0,
    };
    let h = g.select(&[0]);
    let b = PatchBatch::from_grids(&[&g, &g]).unwrap();
    assert_eq!(b.patches.shape(), &[2, 2, 16]);
    assert!(PatchBatch::from_grids(&[&g, &h]).is_err());
    assert!(PatchBatch::from_grids(&[]).is_err());
}
