//! Masked-token pretraining of a fresh multi-scale backbone against the
//! code indices of a frozen tokenizer.

mod probe;

pub use probe::{pooled_features, LinearProbe, ProbeConfig};

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{batch_indices, Dataset, Sample};
use crate::encoder::{EncoderConfig, MultiScaleEncoder, PatchBatch};
use crate::error::{Error, Result};
use crate::signal::PatchGrid;
use crate::tensor::{clip_global_norm, AdamW, CosineSchedule, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::TokenizerModel;

pub const PRETRAIN_CURVE_HEADER: &str = "epoch,split,ce_loss,masked_acc";

/// A random patch mask and its exact complement.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub mask: Vec<bool>,
    pub complement: Vec<bool>,
    pub masked: usize,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Masks `round(rho * p)` patches chosen uniformly at random.
pub fn make_symmetric_masks(p: usize, rho: f64, seed: u64) -> Result<MaskPlan> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(format!("mask ratio {rho} outside (0, 1)")));
    }
    if p < 2 {
        return Err(Error::Config(format!("masking needs at least 2 patches, got {p}")));
    }
    let masked = (rho * p as f64).round() as usize;
    if masked == 0 || masked == p {
        return Err(Error::Config(format!(
            "mask ratio {rho} over {p} patches masks {masked}; one view would be empty"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; p];
    for i in sample(&mut rng, p, masked) {
        mask[i] = true;
    }
    let complement = mask.iter().map(|m| !m).collect();
    Ok(MaskPlan {
        mask,
        complement,
        masked,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub encoder: EncoderConfig,
    /// Codebook levels per branch.
    pub levels: usize,
    pub codebook_size: usize,
}

impl BackboneConfig {
    /// Same encoder architecture and head layout as the tokenizer.
    pub fn matching(tok: &TokenizerModel) -> Self {
        Self {
            encoder: tok.cfg.encoder.clone(),
            levels: tok.cfg.rvq.levels,
            codebook_size: tok.cfg.rvq.codebook_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.levels == 0 || self.codebook_size < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least one level and two classes (N={}, K={})",
                self.levels, self.codebook_size
            )));
        }
        Ok(())
    }

    /// Compatibility of a tokenizer's patch length, branch count, levels and
    /// codebook size with this backbone.
    pub fn check_teacher(&self, tok: &TokenizerModel) -> Result<()> {
        let pairs = [
            ("w", self.encoder.patch_len, tok.cfg.encoder.patch_len),
            ("S", self.encoder.num_branches(), tok.stacks.len()),
            ("N", self.levels, tok.cfg.rvq.levels),
            ("K", self.codebook_size, tok.cfg.rvq.codebook_size),
        ];
        for (field, expected, found) in pairs {
            if expected != found {
                return Err(Error::Compat {
                    field: field.into(),
                    expected: expected.to_string(),
                    found: found.to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub clip: Option<f64>,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn paper() -> Self {
        Self {
            mask_ratio: 0.5,
            epochs: 50,
            batch_size: 64,
            lr: 5e-4,
            min_lr: 1e-5,
            warmup_epochs: 5,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            clip: None,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 2e-3,
            warmup_epochs: 1,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= min ({}) <= base ({}), base > 0",
                self.min_lr, self.lr
            )));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            betas: self.betas,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Teacher indices `[branch][patch][level]`.
pub type Teacher = Vec<Vec<Vec<usize>>>;

/// Code indices of the frozen tokenizer for every patch of `batch`.
pub fn teacher_tokens(tok: &TokenizerModel, batch: &PatchBatch, expect: &BackboneConfig) -> Result<Teacher> {
    expect.check_teacher(tok)?;
    tok.tokenize(batch)
}

#[derive(Clone, Debug)]
pub struct BackboneModel {
    pub cfg: BackboneConfig,
    pub store: ParamStore,
    pub encoder: MultiScaleEncoder,
    mask_token: ParamId,
    /// Index `s * levels + l`.
    heads: Vec<(ParamId, ParamId)>,
}

/// Masked-position statistics of one view or an aggregate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskedStats {
    pub ce_loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl MaskedStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl BackboneModel {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = MultiScaleEncoder::new(&mut store, "encoder", cfg.encoder.clone(), &mut rng)?;
        let w = cfg.encoder.patch_len;
        let d = cfg.encoder.dim;
        let k = cfg.codebook_size;
        let mask_token = store.add_no_decay("mask_token", Tensor::randn(&[w], 0.02, &mut rng));
        let mut heads = Vec::new();
        for s in 0..cfg.encoder.num_branches() {
            for l in 0..cfg.levels {
                heads.push((
                    store.add(format!("head.{s}.{l}.weight"), Tensor::randn(&[k, d], 0.02, &mut rng)),
                    store.add_no_decay(format!("head.{s}.{l}.bias"), Tensor::zeros(&[k])),
                ));
            }
        }
        Ok(Self {
            cfg,
            store,
            encoder,
            mask_token,
            heads,
        })
    }

    /// Per-branch `[B·P, D]` representations. Rows in `mask` have their
    /// branch features replaced by the mask token; channel and slot
    /// embeddings are still added.
    pub fn represent(&self, tape: &mut Tape, batch: &PatchBatch, mask: Option<&[bool]>) -> Result<Vec<Var>> {
        let w = self.cfg.encoder.patch_len;
        if batch.patch_len() != w {
            return Err(Error::Contract(format!(
                "patch length {} but encoder expects {w}",
                batch.patch_len()
            )));
        }
        let m = batch.num_patches();
        let x = tape.constant(batch.patches.clone().reshaped(&[m, w])?);
        let token = mask.map(|rows| (tape.param(&self.store, self.mask_token), rows));
        let tokens = self.encoder.embed_masked(tape, &self.store, x, batch, token)?;
        self.encoder.contextualize(tape, &self.store, &tokens, batch.batch_size())
    }

    /// `[B·P, K]` logits per (branch, level), index `s * levels + l`.
    pub fn logits(&self, tape: &mut Tape, batch: &PatchBatch, mask: Option<&[bool]>) -> Result<Vec<Var>> {
        let reps = self.represent(tape, batch, mask)?;
        let n = self.cfg.levels;
        let mut out = Vec::with_capacity(self.heads.len());
        for (i, (w, b)) in self.heads.iter().enumerate() {
            let (w, b) = (tape.param(&self.store, *w), tape.param(&self.store, *b));
            out.push(tape.linear(reps[i / n], w, Some(b))?);
        }
        Ok(out)
    }

    /// Mean over heads of the cross-entropy at masked rows, and the argmax
    /// hit count there.
    pub fn view_loss(
        &self,
        tape: &mut Tape,
        batch: &PatchBatch,
        mask: &[bool],
        teacher: &Teacher,
    ) -> Result<(Var, MaskedStats)> {
        let m = batch.num_patches();
        if mask.len() != m || teacher.len() != self.cfg.encoder.num_branches() || teacher[0].len() != m {
            return Err(Error::Contract(format!(
                "{} mask bits and teacher of {} branches x {} patches for {m} patches",
                mask.len(),
                teacher.len(),
                teacher.first().map_or(0, Vec::len)
            )));
        }
        let logits = self.logits(tape, batch, Some(mask))?;
        let weights: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let n = self.cfg.levels;
        let k = self.cfg.codebook_size;
        let mut stats = MaskedStats::default();
        let mut sum: Option<Var> = None;
        for (i, &lg) in logits.iter().enumerate() {
            let (s, l) = (i / n, i % n);
            let targets: Vec<usize> = teacher[s].iter().map(|t| t[l]).collect();
            let ce = tape.cross_entropy(lg, &targets, &weights)?;
            let v = tape.value(lg);
            for (r, &t) in targets.iter().enumerate().filter(|(r, _)| mask[*r]) {
                stats.correct += usize::from(argmax(&v.data()[r * k..(r + 1) * k]) == t);
                stats.total += 1;
            }
            sum = Some(match sum {
                None => ce,
                Some(a) => tape.add(a, ce)?,
            });
        }
        let loss = tape.scale(sum.unwrap(), 1.0 / logits.len() as f64);
        stats.ce_loss = tape.value(loss).item();
        Ok((loss, stats))
    }

    /// Per-patch `(P, D)` features of one grid: unmasked forward, mean over
    /// branches.
    pub fn extract_features(&self, grid: &PatchGrid) -> Result<Tensor> {
        let batch = PatchBatch::from_grids(&[grid])?;
        let mut tape = Tape::new();
        let reps = self.represent(&mut tape, &batch, None)?;
        let mut acc = reps[0];
        for &r in &reps[1..] {
            acc = tape.add(acc, r)?;
        }
        let mean = tape.scale(acc, 1.0 / reps.len() as f64);
        Ok(tape.value(mean).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_value(&self.cfg).expect("config serializes");
        let mut c = Checkpoint::new("backbone", cfg);
        c.push_store(&self.store);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("backbone")?;
        let cfg: BackboneConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::parse("checkpoint config", e.to_string()))?;
        let mut model = Self::new(cfg, 0)?;
        c.load_store(&mut model.store)?;
        Ok(model)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Loss and accuracy of a step, both views combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainStats {
    pub ce_loss: f64,
    pub masked_acc: f64,
}

/// Concatenated per-sample masks and complements for a batch.
pub fn batch_masks(plans: &[MaskPlan]) -> (Vec<bool>, Vec<bool>) {
    (
        plans.iter().flat_map(|p| p.mask.iter().copied()).collect(),
        plans.iter().flat_map(|p| p.complement.iter().copied()).collect(),
    )
}

fn both_views(
    model: &BackboneModel,
    tape: &mut Tape,
    batch: &PatchBatch,
    plans: &[MaskPlan],
    teacher: &Teacher,
) -> Result<(Var, PretrainStats)> {
    let (mask, comp) = batch_masks(plans);
    let (la, sa) = model.view_loss(tape, batch, &mask, teacher)?;
    let (lb, sb) = model.view_loss(tape, batch, &comp, teacher)?;
    let sum = tape.add(la, lb)?;
    let loss = tape.scale(sum, 0.5);
    let ce = tape.value(loss).item();
    if !ce.is_finite() {
        return Err(Error::Numeric(format!(
            "masked cross-entropy is {ce} (mask view {}, complement view {})",
            sa.ce_loss, sb.ce_loss
        )));
    }
    let correct = sa.correct + sb.correct;
    let total = sa.total + sb.total;
    Ok((
        loss,
        PretrainStats {
            ce_loss: ce,
            masked_acc: correct as f64 / total.max(1) as f64,
        },
    ))
}

/// One optimizer update on both symmetric views of every sample.
pub fn pretrain_step(
    model: &mut BackboneModel,
    batch: &PatchBatch,
    plans: &[MaskPlan],
    teacher: &Teacher,
    opt: &AdamW,
    clip: Option<f64>,
) -> Result<PretrainStats> {
    let mut tape = Tape::new();
    let (loss, stats) = both_views(model, &mut tape, batch, plans, teacher)?;
    let mut grads = tape.backward(loss)?;
    let mut pg = tape.param_grads(&mut grads);
    if let Some((id, _)) = pg.0.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for {}",
            model.store.get(*id).name
        )));
    }
    drop(tape);
    if let Some(c) = clip {
        clip_global_norm(&mut pg, c);
    }
    opt.step(&mut model.store, &pg)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRow {
    pub epoch: usize,
    pub split: String,
    pub stats: PretrainStats,
}

impl PretrainRow {
    pub fn csv(rows: &[PretrainRow]) -> String {
        let mut s = String::from(PRETRAIN_CURVE_HEADER);
        s.push('\n');
        for r in rows {
            writeln!(s, "{},{},{},{}", r.epoch, r.split, r.stats.ce_loss, r.stats.masked_acc).unwrap();
        }
        s
    }
}

/// Frozen-tokenizer indices for every sample, in order.
pub fn teacher_for_samples(
    tok: &TokenizerModel,
    samples: &[Sample],
    expect: &BackboneConfig,
    batch_size: usize,
) -> Result<Vec<Teacher>> {
    expect.check_teacher(tok)?;
    let mut out = Vec::with_capacity(samples.len());
    for idx in batch_indices(samples.len(), batch_size, None) {
        let grids: Vec<_> = idx.iter().map(|&i| &samples[i].grid).collect();
        let batch = PatchBatch::from_grids(&grids)?;
        let t = tok.tokenize(&batch)?;
        let p = batch.patches_per_sample();
        for b in 0..idx.len() {
            out.push(t.iter().map(|br| br[b * p..(b + 1) * p].to_vec()).collect());
        }
    }
    Ok(out)
}

fn join_teachers(parts: &[&Teacher]) -> Teacher {
    let s = parts[0].len();
    (0..s)
        .map(|b| parts.iter().flat_map(|t| t[b].iter().cloned()).collect())
        .collect()
}

fn mask_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(sample as u64)
}

fn gather(
    samples: &[Sample],
    teachers: &[Teacher],
    idx: &[usize],
    rho: f64,
    seed: u64,
    epoch: usize,
) -> Result<(PatchBatch, Vec<MaskPlan>, Teacher)> {
    let grids: Vec<_> = idx.iter().map(|&i| &samples[i].grid).collect();
    let batch = PatchBatch::from_grids(&grids)?;
    let p = batch.patches_per_sample();
    let plans = idx
        .iter()
        .map(|&i| make_symmetric_masks(p, rho, mask_seed(seed, epoch, i)))
        .collect::<Result<Vec<_>>>()?;
    let parts: Vec<&Teacher> = idx.iter().map(|&i| &teachers[i]).collect();
    Ok((batch, plans, join_teachers(&parts)))
}

/// Patch-weighted statistics over `samples` with masks fixed by `seed`.
pub fn evaluate_masked(
    model: &BackboneModel,
    samples: &[Sample],
    teachers: &[Teacher],
    rho: f64,
    seed: u64,
    batch_size: usize,
) -> Result<PretrainStats> {
    let mut ce = 0.0;
    let mut acc = 0.0;
    let mut count = 0usize;
    for idx in batch_indices(samples.len(), batch_size, None) {
        let (batch, plans, teacher) = gather(samples, teachers, &idx, rho, seed, 0)?;
        let mut tape = Tape::new();
        let (_, s) = both_views(model, &mut tape, &batch, &plans, &teacher)?;
        let n = batch.num_patches();
        ce += s.ce_loss * n as f64;
        acc += s.masked_acc * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    Ok(PretrainStats {
        ce_loss: ce / count as f64,
        masked_acc: acc / count as f64,
    })
}

pub struct PretrainOutcome {
    pub curves: Vec<PretrainRow>,
    pub steps: usize,
}

/// Epoch loop with cosine schedule; each epoch emits a `train` row and, when
/// the dataset has a validation split, a `val` row.
pub fn pretrain(
    model: &mut BackboneModel,
    tok: &TokenizerModel,
    data: &Dataset,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model.cfg.check_teacher(tok)?;
    let mut curves = Vec::new();
    if cfg.epochs == 0 {
        return Ok(PretrainOutcome { curves, steps: 0 });
    }
    let train_t = teacher_for_samples(tok, &data.train, &model.cfg, cfg.batch_size)?;
    let val_t = teacher_for_samples(tok, &data.val, &model.cfg, cfg.batch_size)?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let base = cfg.optimizer();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = batch_indices(data.train.len(), cfg.batch_size, Some(cfg.seed.wrapping_add(epoch as u64)));
        let mut sum = PretrainStats::default();
        for idx in &order {
            let (batch, plans, teacher) = gather(&data.train, &train_t, idx, cfg.mask_ratio, cfg.seed, epoch)?;
            let opt = AdamW {
                lr: schedule.lr(step),
                ..base
            };
            let s = pretrain_step(model, &batch, &plans, &teacher, &opt, cfg.clip)?;
            sum.ce_loss += s.ce_loss;
            sum.masked_acc += s.masked_acc;
            step += 1;
        }
        let n = order.len().max(1) as f64;
        let train = PretrainStats {
            ce_loss: sum.ce_loss / n,
            masked_acc: sum.masked_acc / n,
        };
        log::info!("epoch {epoch}: train ce {:.4}, acc {:.4}", train.ce_loss, train.masked_acc);
        curves.push(PretrainRow {
            epoch,
            split: "train".into(),
            stats: train,
        });
        if !data.val.is_empty() {
            let v = evaluate_masked(model, &data.val, &val_t, cfg.mask_ratio, cfg.seed ^ 0x7a1, cfg.batch_size)?;
            log::info!("epoch {epoch}: val ce {:.4}, acc {:.4}", v.ce_loss, v.masked_acc);
            curves.push(PretrainRow {
                epoch,
                split: "val".into(),
                stats: v,
            });
        }
    }
    Ok(PretrainOutcome { curves, steps: step })
}
