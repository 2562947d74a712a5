use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::Dataset;
use crate::encoder::BranchConfig;
use crate::signal::{synth_generate, BandSpec, SynthSpec};
use crate::spectral::{tokenizer_loss_on_tape, TargetBatch};
use crate::tensor::{grad_check, CosineSchedule};

fn tiny() -> TokenizerConfig {
    TokenizerConfig {
        encoder: EncoderConfig {
            patch_len: 16,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_hidden: 16,
            branches: BranchConfig::reference()[..2].to_vec(),
            groups: 4,
            num_electrodes: 4,
            max_slots: 4,
            qk_norm: true,
        },
        rvq: RvqConfig {
            levels: 2,
            codebook_size: 8,
            code_dim: 4,
            ..RvqConfig::desk()
        },
        decoder_depth: 1,
        fusion: Fusion::Sum,
        loss: LossWeights::default(),
    }
}

fn tiny_data() -> Dataset {
    let recs: Vec<_> = (0..2)
        .map(|s| synth_generate(&SynthSpec::all_bands(64.0, 2, 8.0, s)).unwrap())
        .collect();
    Dataset::from_recordings(&recs, None, 16, 2, 0.1).unwrap()
}

fn tiny_batch(data: &Dataset, n: usize) -> PatchBatch {
    let grids: Vec<_> = data.train[..n].iter().map(|s| &s.grid).collect();
    PatchBatch::from_grids(&grids).unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        warmup_epochs: 1,
        kmeans_iters: 3,
        kmeans_batches: 4,
        ..TrainConfig::desk()
    }
}

#[test]
fn heads_emit_half_plus_one_bins() {
    let mut cfg = tiny();
    cfg.encoder.patch_len = 200;
    cfg.encoder.dim = 20;
    let m = TokenizerModel::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = PatchBatch {
        patches: Tensor::randn(&[1, 2, 200], 1.0, &mut rng),
        channel_idx: vec![0, 1],
        slot_idx: vec![0, 0],
    };
    let p = m.predict(&batch).unwrap();
    assert_eq!(p.len(), 2);
    assert!(p.iter().all(|q| q.log_amp_hat.len() == 101 && q.sin_hat.len() == 101));
}

#[test]
fn zero_representations_and_zero_heads_predict_zero() {
    let mut m = TokenizerModel::new(tiny(), 3).unwrap();
    for (id, p) in m.store.clone().iter() {
        if p.name.starts_with("head.") {
            m.store.set_value(id, Tensor::zeros(p.value.shape())).unwrap();
        }
    }
    let mut tape = Tape::new();
    let z: Vec<Var> = (0..2).map(|_| tape.constant(Tensor::zeros(&[4, 8]))).collect();
    let pred = m.decode(&mut tape, &z, 2).unwrap();
    for v in [pred.log_amp, pred.sin, pred.cos] {
        assert!(tape.value(v).data().iter().all(|x| *x == 0.0));
    }
}

#[test]
fn odd_patch_length_is_rejected() {
    let mut cfg = tiny();
    cfg.encoder.patch_len = 15;
    assert!(matches!(TokenizerModel::new(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn prediction_is_deterministic() {
    let data = tiny_data();
    let b = tiny_batch(&data, 2);
    let m1 = TokenizerModel::new(tiny(), 4).unwrap();
    let m2 = TokenizerModel::new(tiny(), 4).unwrap();
    assert_eq!(m1.predict(&b).unwrap(), m2.predict(&b).unwrap());
}

#[test]
fn tokens_round_trip_through_detokenize() {
    let data = tiny_data();
    let b = tiny_batch(&data, 2);
    let m = TokenizerModel::new(tiny(), 5).unwrap();
    let tokens = m.tokenize(&b).unwrap();
    assert_eq!(tokens.len(), 2);
    assert!(tokens.iter().flatten().flatten().all(|&i| i < 8));
    let direct = m.predict(&b).unwrap();
    let via = m.detokenize(&tokens, 2).unwrap();
    for (a, c) in direct.iter().zip(&via) {
        for (x, y) in a.log_amp_hat.iter().zip(&c.log_amp_hat) {
            assert!((x - y).abs() < 1e-10);
        }
    }
    assert!(matches!(m.detokenize(&tokens[..1], 2), Err(Error::Compat { .. })));
}

#[test]
fn concat_fusion_runs() {
    let mut cfg = tiny();
    cfg.fusion = Fusion::Concat;
    let data = tiny_data();
    let m = TokenizerModel::new(cfg, 6).unwrap();
    assert_eq!(m.predict(&tiny_batch(&data, 1)).unwrap().len(), 4);
}

#[test]
fn train_steps_are_reproducible_and_terms_sum() {
    let data = tiny_data();
    let b = tiny_batch(&data, 3);
    let cfg = tiny_train();
    let run = || {
        let mut m = TokenizerModel::new(tiny(), 7).unwrap();
        let sched = CosineSchedule {
            base_lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: 0,
            total_steps: 10,
        };
        let mut st = TrainState::new(sched, 1);
        (0..2)
            .map(|_| train_step(&mut m, &mut st, &b, &cfg.optimizer(), 3.0).unwrap())
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    for l in &a {
        assert!((l.log_amp + l.unit + l.temporal + l.lq - l.total).abs() < 1e-9);
        assert_eq!(l.raw_mse, l.temporal);
    }
}

#[test]
fn overfits_a_single_batch() {
    let data = tiny_data();
    let b = tiny_batch(&data, 2);
    let mut m = TokenizerModel::new(tiny(), 13).unwrap();
    let sched = CosineSchedule {
        base_lr: 3e-3,
        min_lr: 3e-3,
        warmup_steps: 0,
        total_steps: 200,
    };
    let mut st = TrainState::new(sched, 1);
    let opt = tiny_train().optimizer();
    let first = train_step(&mut m, &mut st, &b, &opt, 3.0).unwrap().total;
    let mut last = first;
    for _ in 0..199 {
        last = train_step(&mut m, &mut st, &b, &opt, 3.0).unwrap().total;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn warmup_starts_below_base_rate() {
    let cfg = TrainConfig::paper();
    let sched = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * 10,
        total_steps: cfg.epochs * 10,
    };
    assert_eq!(cfg.lr, 5e-5);
    assert!(sched.lr(0) < 5e-5);
}

#[test]
fn zero_epochs_returns_untouched_model() {
    let data = tiny_data();
    let mut m = TokenizerModel::new(tiny(), 8).unwrap();
    let before = m.to_checkpoint().to_bytes();
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_train()
    };
    let out = train_tokenizer(&mut m, &data, &cfg).unwrap();
    assert!(out.curves.is_empty());
    assert_eq!(m.to_checkpoint().to_bytes(), before);
}

#[test]
fn seeded_training_reproduces_curves() {
    let data = tiny_data();
    let run = || {
        let mut m = TokenizerModel::new(tiny(), 9).unwrap();
        let out = train_tokenizer(&mut m, &data, &tiny_train()).unwrap();
        CurveRow::csv(&out.curves)
    };
    let a = run();
    assert_eq!(a, run());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], CURVE_HEADER);
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1].starts_with("1,train,"));
    assert!(lines[2].starts_with("1,val,"));
}

#[test]
fn empty_dataset_is_a_config_error() {
    assert!(matches!(
        Dataset::from_recordings(&[], None, 16, 2, 0.1),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let data = tiny_data();
    let mut m = TokenizerModel::new(tiny(), 10).unwrap();
    train_tokenizer(&mut m, &data, &TrainConfig { epochs: 1, ..tiny_train() }).unwrap();
    let bytes = m.to_checkpoint().to_bytes();
    let back = TokenizerModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    let again = TokenizerModel::from_checkpoint(&back.to_checkpoint()).unwrap();
    let b = tiny_batch(&data, 2);
    assert_eq!(back.predict(&b).unwrap(), again.predict(&b).unwrap());
}

#[test]
fn identity_reconstruction_has_zero_band_error() {
    let data = tiny_data();
    let originals: Vec<&[f64]> = data.val[0].grid.patches.chunks(16).collect();
    let recon: Vec<Vec<f64>> = originals.iter().map(|p| p.to_vec()).collect();
    let bands = vec![BandSpec::new("delta", 0.5, Some(4.0)), BandSpec::new("gamma", 6.0, None)];
    let r = band_errors(&originals, &recon, 64.0, &bands, "val").unwrap();
    let names: Vec<&str> = r.rows.iter().map(|x| x.band.as_str()).collect();
    assert_eq!(names, vec!["raw", "delta", "gamma"]);
    assert!(r.rows.iter().all(|x| x.mse == 0.0 && x.patches == originals.len()));
}

#[test]
fn band_report_covers_eeg_bands_and_ignores_order() {
    let recs = vec![synth_generate(&SynthSpec::all_bands(64.0, 2, 8.0, 1)).unwrap()];
    let data = Dataset::from_recordings(&recs, None, 64, 2, 0.0).unwrap();
    let m = TokenizerModel::new(
        TokenizerConfig {
            encoder: EncoderConfig {
                patch_len: 64,
                ..tiny().encoder
            },
            ..tiny()
        },
        11,
    )
    .unwrap();
    let bands = BandSpec::eeg_bands();
    let r = eval_per_band(&m, &data.train, &bands, "train", 8).unwrap();
    let names: Vec<&str> = r.rows.iter().map(|x| x.band.as_str()).collect();
    assert_eq!(names, vec!["raw", "delta", "theta", "alpha", "beta", "gamma"]);
    assert!(r.rows.iter().all(|x| x.mse >= 0.0));

    let mut rev = data.train.clone();
    rev.reverse();
    let r2 = eval_per_band(&m, &rev, &bands, "train", 8).unwrap();
    for (a, b) in r.rows.iter().zip(&r2.rows) {
        assert!((a.mse - b.mse).abs() <= 1e-12 * a.mse.max(1.0));
    }
    let csv = BandReport::csv(&[r]);
    assert!(csv.starts_with("split,band,mse,patches\ntrain,raw,"));

    let high = vec![BandSpec::new("x", 10.0, Some(40.0))];
    assert!(matches!(
        eval_per_band(&m, &data.train, &high, "train", 8),
        Err(Error::Config(_))
    ));
}

#[test]
fn tokenizer_loss_gradient_with_frozen_codes() {
    let data = tiny_data();
    let b = tiny_batch(&data, 1);
    let m = TokenizerModel::new(tiny(), 12).unwrap();
    let codes = m.freeze_codes(&b).unwrap();
    let x0 = b.patches.clone().reshaped(&[b.num_patches(), 16]).unwrap();

    let mut tape = Tape::new();
    let f = m.forward(&mut tape, &b).unwrap();
    let target = TargetBatch::from_patches(b.patches.data(), 16).unwrap();
    let lv = tokenizer_loss_on_tape(&mut tape, f.pred, &target, &m.cfg.loss).unwrap();
    let live = tape.value(lv.total).item() + tape.value(f.quant_loss).item();
    let mut t2 = Tape::new();
    let xv = t2.constant(x0.clone());
    let frozen = m.frozen_code_loss(&mut t2, xv, &b, &codes).unwrap();
    assert!((t2.value(frozen).item() - live).abs() < 1e-10);
    for (a, c) in f.assignments.iter().zip(&codes.assignments) {
        assert_eq!(a.indices, c.indices);
    }

    let report = grad_check(|tape, x| m.frozen_code_loss(tape, x, &b, &codes), &x0, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
}

#[test]
fn codebook_init_gathers_enough_vectors_for_deeper_levels() {
    let data = tiny_data();
    let mut m = TokenizerModel::new(tiny(), 4).unwrap();
    let cfg = TrainConfig {
        kmeans_batches: 1,
        ..tiny_train()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    train::init_codebooks(&mut m, &data, &cfg, &mut rng).unwrap();
    let mean_norm = |b: &crate::rvq::Codebook| {
        (0..b.size())
            .map(|j| b.entry(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / b.size() as f64
    };
    for stack in &m.stacks {
        let (top, next) = (mean_norm(&stack.books[0]), mean_norm(&stack.books[1]));
        assert!(next > 1e-2 * top, "level 1 collapsed: {next} vs {top}");
    }
}
