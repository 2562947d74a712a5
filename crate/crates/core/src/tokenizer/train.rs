use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TokenizerModel;
use crate::dataset::{batch_indices, Dataset, Sample};
use crate::encoder::PatchBatch;
use crate::error::{Error, Result};
use crate::rvq::{kmeans_init, quantize_codes, Codebook};
use crate::spectral::{inverse_on_tape, tokenizer_loss_on_tape, TargetBatch};
use crate::tensor::{clip_global_norm, AdamW, CosineSchedule, Tape, Var};

pub const CURVE_HEADER: &str = "epoch,split,log_amp_loss,unit_loss,temporal_loss,lq,total,raw_mse";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub clip: f64,
    pub seed: u64,
    /// Lloyd iterations for codebook initialization; 0 keeps random
    /// codebooks.
    pub kmeans_iters: usize,
    /// Minimum batches of encoder outputs gathered for codebook
    /// initialization; gathering continues until every stack has at least
    /// `KMEANS_SAMPLES_PER_CODE` vectors per code or the training split runs
    /// out.
    pub kmeans_batches: usize,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 5e-5,
            min_lr: 1e-5,
            warmup_epochs: 10,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            clip: 3.0,
            seed: 0,
            kmeans_iters: 10,
            kmeans_batches: 4,
        }
    }

    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_epochs: 1,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= min ({}) <= base ({}), base > 0",
                self.min_lr, self.lr
            )));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            betas: self.betas,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Loss terms of one step or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub log_amp: f64,
    pub unit: f64,
    pub temporal: f64,
    pub lq: f64,
    pub total: f64,
    pub raw_mse: f64,
}

impl StepLosses {
    fn add_scaled(&mut self, o: &StepLosses, w: f64) {
        self.log_amp += w * o.log_amp;
        self.unit += w * o.unit;
        self.temporal += w * o.temporal;
        self.lq += w * o.lq;
        self.total += w * o.total;
        self.raw_mse += w * o.raw_mse;
    }

    fn scaled(mut self, w: f64) -> Self {
        let o = self;
        self = Self::default();
        self.add_scaled(&o, w);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub schedule: CosineSchedule,
    pub seed: u64,
    /// Sum of step losses in the current epoch.
    pub running: StepLosses,
    pub steps_in_epoch: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(schedule: CosineSchedule, seed: u64) -> Self {
        Self {
            epoch: 0,
            step: 0,
            schedule,
            seed,
            running: StepLosses::default(),
            steps_in_epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: String,
    pub losses: StepLosses,
}

impl CurveRow {
    pub fn csv(rows: &[CurveRow]) -> String {
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for r in rows {
            let l = &r.losses;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.epoch, r.split, l.log_amp, l.unit, l.temporal, l.lq, l.total, l.raw_mse
            )
            .unwrap();
        }
        s
    }
}

pub struct TrainOutcome {
    pub curves: Vec<CurveRow>,
    pub state: TrainState,
}

struct Evaluated {
    losses: StepLosses,
    total: Var,
}

fn evaluate(model: &TokenizerModel, tape: &mut Tape, batch: &PatchBatch) -> Result<(Evaluated, Vec<crate::rvq::TokenAssignment>)> {
    let w = model.patch_len();
    let target = TargetBatch::from_patches(batch.patches.data(), w)?;
    let f = model.forward(tape, batch)?;
    let lv = tokenizer_loss_on_tape(tape, f.pred, &target, &model.cfg.loss)?;
    let total = tape.add(lv.total, f.quant_loss)?;
    let raw_mse = if model.cfg.loss.temporal {
        tape.value(lv.temporal).item()
    } else {
        let xhat = inverse_on_tape(tape, f.pred, w)?;
        let sig = tape.constant(target.signal.clone());
        let d = tape.sub(xhat, sig)?;
        let d = tape.square(d)?;
        let m = tape.mean(d);
        tape.value(m).item()
    };
    let losses = StepLosses {
        log_amp: tape.value(lv.log_amp).item(),
        unit: tape.value(lv.unit).item(),
        temporal: tape.value(lv.temporal).item(),
        lq: tape.value(f.quant_loss).item(),
        total: tape.value(total).item(),
        raw_mse,
    };
    for (name, v) in [
        ("log-amplitude", losses.log_amp),
        ("unit-circle", losses.unit),
        ("temporal", losses.temporal),
        ("quantization", losses.lq),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "{name} loss is {v} (log_amp={}, unit={}, temporal={}, lq={})",
                losses.log_amp, losses.unit, losses.temporal, losses.lq
            )));
        }
    }
    Ok((Evaluated { losses, total }, f.assignments))
}

/// One optimizer step: forward, loss, backward, clipping, AdamW and EMA
/// codebook updates.
pub fn train_step(
    model: &mut TokenizerModel,
    state: &mut TrainState,
    batch: &PatchBatch,
    opt: &AdamW,
    clip: f64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let (ev, assignments) = evaluate(model, &mut tape, batch)?;
    let mut grads = tape.backward(ev.total)?;
    let mut pg = tape.param_grads(&mut grads);
    if let Some((id, _)) = pg.0.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for {} at step {}",
            model.store.get(*id).name,
            state.step
        )));
    }
    drop(tape);
    clip_global_norm(&mut pg, clip);
    let opt = AdamW {
        lr: state.lr(),
        ..*opt
    };
    opt.step(&mut model.store, &pg)?;
    for (stack, a) in model.stacks.iter_mut().zip(&assignments) {
        stack.ema_update(a, &mut state.rng);
    }
    state.step += 1;
    state.steps_in_epoch += 1;
    state.running.add_scaled(&ev.losses, 1.0);
    Ok(ev.losses)
}

fn batch_of(samples: &[Sample], idx: &[usize]) -> Result<PatchBatch> {
    let grids: Vec<_> = idx.iter().map(|&i| &samples[i].grid).collect();
    PatchBatch::from_grids(&grids)
}

/// Patch-weighted mean losses over `samples` without updating anything.
pub fn evaluate_samples(model: &TokenizerModel, samples: &[Sample], batch_size: usize) -> Result<StepLosses> {
    let mut acc = StepLosses::default();
    let mut count = 0usize;
    for idx in batch_indices(samples.len(), batch_size, None) {
        let batch = batch_of(samples, &idx)?;
        let mut tape = Tape::new();
        let (ev, _) = evaluate(model, &mut tape, &batch)?;
        acc.add_scaled(&ev.losses, batch.num_patches() as f64);
        count += batch.num_patches();
    }
    if count == 0 {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    Ok(acc.scaled(1.0 / count as f64))
}

/// Initializes every codebook level by k-means over encoder outputs of the
/// first training batches, level by level on the running residual.
pub const KMEANS_SAMPLES_PER_CODE: usize = 8;

pub(crate) fn init_codebooks(model: &mut TokenizerModel, data: &Dataset, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let batches = batch_indices(data.train.len(), cfg.batch_size, Some(cfg.seed));
    let s = model.stacks.len();
    let dc = model.cfg.rvq.code_dim;
    let mut codes: Vec<Vec<f64>> = vec![Vec::new(); s];
    let want = KMEANS_SAMPLES_PER_CODE * model.cfg.rvq.codebook_size * dc;
    for (i, idx) in batches.iter().enumerate() {
        if i >= cfg.kmeans_batches.max(1) && codes.iter().all(|c| c.len() >= want) {
            break;
        }
        let batch = batch_of(&data.train, idx)?;
        let mut tape = Tape::new();
        let reps = model.encoder.forward(&mut tape, &model.store, &batch)?;
        for (b, r) in reps.into_iter().enumerate() {
            let h = model.stacks[b].project_down(&mut tape, &model.store, r)?;
            codes[b].extend_from_slice(tape.value(h).data());
        }
    }
    for (stack, mut residual) in model.stacks.iter_mut().zip(codes) {
        let k = stack.cfg.codebook_size;
        if residual.len() / dc < k {
            log::warn!(
                "codebook init skipped: {} vectors for {k} codes",
                residual.len() / dc
            );
            return Ok(());
        }
        for book in stack.books.iter_mut() {
            let (entries, status) = kmeans_init(&residual, dc, k, cfg.kmeans_iters, rng)?;
            if status.padded > 0 {
                log::warn!("codebook init padded {} codes", status.padded);
            }
            *book = Codebook::new(entries);
            let a = quantize_codes(&residual, dc, std::slice::from_ref(book), stack.cfg.metric)?;
            residual = a.final_residual;
        }
    }
    Ok(())
}

/// Full training loop with a per-epoch validation pass. Curves hold one
/// `train` and (if the dataset has a validation split) one `val` row per
/// epoch.
pub fn train_tokenizer(model: &mut TokenizerModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.patch_len != model.patch_len() {
        return Err(Error::Config(format!(
            "dataset patch length {} but model expects {}",
            data.patch_len,
            model.patch_len()
        )));
    }
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut state = TrainState::new(schedule, cfg.seed);
    let mut curves = Vec::new();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { curves, state });
    }
    for stack in &mut model.stacks {
        stack.cfg.dead_window = steps_per_epoch;
    }
    if cfg.kmeans_iters > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b6d);
        init_codebooks(model, data, cfg, &mut rng)?;
    }
    let opt = cfg.optimizer();
    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        state.running = StepLosses::default();
        state.steps_in_epoch = 0;
        let order = batch_indices(data.train.len(), cfg.batch_size, Some(cfg.seed.wrapping_add(epoch as u64)));
        for idx in &order {
            let batch = batch_of(&data.train, idx)?;
            train_step(model, &mut state, &batch, &opt, cfg.clip)?;
        }
        let train_avg = state.running.scaled(1.0 / state.steps_in_epoch.max(1) as f64);
        log::info!("epoch {epoch}: train total {:.5}", train_avg.total);
        curves.push(CurveRow {
            epoch,
            split: "train".into(),
            losses: train_avg,
        });
        if !data.val.is_empty() {
            let v = evaluate_samples(model, &data.val, cfg.batch_size)?;
            log::info!("epoch {epoch}: val total {:.5}, raw mse {:.5}", v.total, v.raw_mse);
            curves.push(CurveRow {
                epoch,
                split: "val".into(),
                losses: v,
            });
        }
    }
    Ok(TrainOutcome { curves, state })
}
