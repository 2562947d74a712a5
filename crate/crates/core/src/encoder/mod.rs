//! Multi-scale temporal encoder: convolutional branches, spatial/temporal
//! embeddings and the shared transformer.

mod transformer;

pub use transformer::{Transformer, TransformerConfig, LAYER_SCALE_INIT};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::PatchGrid;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Two-stage convolutional branch: `(conv → groupnorm → GELU → avgpool) × 2`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub filters: [usize; 2],
    pub kernels: [usize; 2],
    pub paddings: [usize; 2],
    pub pools: [usize; 2],
}

impl BranchConfig {
    pub fn new(kernels: [usize; 2], paddings: [usize; 2]) -> Self {
        Self {
            filters: [8, 8],
            kernels,
            paddings,
            pools: [2, 4],
        }
    }

    /// The four branches of the reference encoder, finest kernel last.
    pub fn reference() -> Vec<BranchConfig> {
        vec![
            Self::new([21, 9], [10, 4]),
            Self::new([15, 7], [7, 3]),
            Self::new([9, 5], [4, 2]),
            Self::new([5, 3], [2, 1]),
        ]
    }

    /// `(channels, time)` after both stages for an input of length `w`.
    pub fn output_extent(&self, w: usize) -> Result<(usize, usize)> {
        let mut len = w;
        for s in 0..2 {
            let padded = len + 2 * self.paddings[s];
            if self.kernels[s] == 0 || padded < self.kernels[s] {
                return Err(Error::Config(format!(
                    "stage {}: kernel {} exceeds padded length {}",
                    s + 1,
                    self.kernels[s],
                    padded
                )));
            }
            len = padded - self.kernels[s] + 1;
            if self.pools[s] == 0 || len < self.pools[s] {
                return Err(Error::Config(format!(
                    "stage {}: pool {} over length {}",
                    s + 1,
                    self.pools[s],
                    len
                )));
            }
            len /= self.pools[s];
        }
        Ok((self.filters[1], len))
    }

    pub fn validate(&self, w: usize, groups: usize) -> Result<()> {
        for &f in &self.filters {
            if f == 0 || f % groups != 0 {
                return Err(Error::Config(format!(
                    "{f} filters not divisible into {groups} groups"
                )));
            }
        }
        let (c, t) = self.output_extent(w)?;
        if c * t != w {
            return Err(Error::Config(format!(
                "branch with kernels {:?} flattens to {c} x {t} = {}, expected {w}",
                self.kernels,
                c * t
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Samples per patch.
    pub patch_len: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub branches: Vec<BranchConfig>,
    pub groups: usize,
    /// Rows of the spatial table.
    pub num_electrodes: usize,
    /// Rows of the temporal table.
    pub max_slots: usize,
    pub qk_norm: bool,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            patch_len: 200,
            dim: 200,
            depth: 12,
            heads: 10,
            mlp_hidden: 800,
            branches: BranchConfig::reference(),
            groups: 4,
            num_electrodes: 128,
            max_slots: 64,
            qk_norm: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            patch_len: 64,
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_hidden: 128,
            branches: BranchConfig::reference(),
            groups: 4,
            num_electrodes: 32,
            max_slots: 16,
            qk_norm: true,
        }
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            input_dim: self.patch_len,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden,
            qk_norm: self.qk_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("encoder needs at least one branch".into()));
        }
        if self.num_electrodes == 0 || self.max_slots == 0 {
            return Err(Error::Config("embedding tables must be non-empty".into()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            b.validate(self.patch_len, self.groups)
                .map_err(|e| Error::Config(format!("branch {}: {e}", i + 1)))?;
        }
        self.transformer().validate()
    }
}

/// Batch of equally sized samples, each `P` patches with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `[B, P, w]`.
    pub patches: Tensor,
    /// Length `B·P`.
    pub channel_idx: Vec<usize>,
    /// Length `B·P`.
    pub slot_idx: Vec<usize>,
}

impl PatchBatch {
    pub fn from_grids(grids: &[&PatchGrid]) -> Result<Self> {
        let first = grids
            .first()
            .ok_or_else(|| Error::Empty("no samples in batch".into()))?;
        let (p, w) = (first.len(), first.patch_len);
        let mut data = Vec::with_capacity(grids.len() * p * w);
        let mut channel_idx = Vec::with_capacity(grids.len() * p);
        let mut slot_idx = Vec::with_capacity(grids.len() * p);
        for g in grids {
            if g.len() != p || g.patch_len != w {
                return Err(Error::Contract(format!(
                    "sample with {} patches of {} in a batch of {p} x {w}",
                    g.len(),
                    g.patch_len
                )));
            }
            data.extend_from_slice(&g.patches);
            channel_idx.extend_from_slice(&g.channel_idx);
            slot_idx.extend_from_slice(&g.slot_idx);
        }
        Ok(Self {
            patches: Tensor::new(vec![grids.len(), p, w], data)?,
            channel_idx,
            slot_idx,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn patches_per_sample(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn patch_len(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn num_patches(&self) -> usize {
        self.channel_idx.len()
    }
}

#[derive(Clone, Debug)]
struct ConvStage {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    pad: usize,
    pool: usize,
}

#[derive(Clone, Debug)]
pub struct Branch {
    stages: [ConvStage; 2],
    groups: usize,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BranchConfig,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let mut stage = |s: usize, cin: usize| {
            let (co, k) = (cfg.filters[s], cfg.kernels[s]);
            let std = (2.0 / (cin * k) as f64).sqrt();
            let p = format!("{prefix}.conv{}", s + 1);
            ConvStage {
                weight: store.add(format!("{p}.weight"), Tensor::randn(&[co, cin, k], std, rng)),
                gamma: store.add_no_decay(format!("{p}.norm.gamma"), Tensor::ones(&[co])),
                beta: store.add_no_decay(format!("{p}.norm.beta"), Tensor::zeros(&[co])),
                pad: cfg.paddings[s],
                pool: cfg.pools[s],
            }
        };
        let s1 = stage(0, 1);
        let s2 = stage(1, cfg.filters[0]);
        Self {
            stages: [s1, s2],
            groups,
        }
    }

    /// `x` is `[M, w]`; returns the flattened `[M, w]` feature.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (m, w) = match tape.shape(x) {
            [m, w] => (*m, *w),
            s => return Err(Error::shape("branch", format!("input {:?}", s))),
        };
        let mut h = tape.reshape(x, &[m, 1, w])?;
        for st in &self.stages {
            let k = tape.param(store, st.weight);
            h = tape.conv1d(h, k, st.pad)?;
            let (g, b) = (tape.param(store, st.gamma), tape.param(store, st.beta));
            h = tape.group_norm(h, g, b, self.groups)?;
            h = tape.gelu(h);
            h = tape.avg_pool1d(h, st.pool)?;
        }
        let n = tape.value(h).len() / m;
        tape.reshape(h, &[m, n])
    }
}

/// Learnable spatial (`SE`, per electrode) and temporal (`TE`, per slot)
/// tables, both of width `w`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables {
    pub spatial: ParamId,
    pub temporal: ParamId,
}

impl EmbeddingTables {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        electrodes: usize,
        slots: usize,
        w: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            spatial: store.add(format!("{prefix}.spatial"), Tensor::randn(&[electrodes, w], 0.02, rng)),
            temporal: store.add(format!("{prefix}.temporal"), Tensor::randn(&[slots, w], 0.02, rng)),
        }
    }

    /// `feature + SE[channel] + TE[slot]` for one branch's `[M, w]` features.
    pub fn add(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        channel_idx: &[usize],
        slot_idx: &[usize],
    ) -> Result<Var> {
        let se = tape.param(store, self.spatial);
        let se = tape.embedding(se, channel_idx)?;
        let te = tape.param(store, self.temporal);
        let te = tape.embedding(te, slot_idx)?;
        let h = tape.add(features, se)?;
        tape.add(h, te)
    }
}

/// Branches, embedding tables and the shared transformer.
#[derive(Clone, Debug)]
pub struct MultiScaleEncoder {
    pub cfg: EncoderConfig,
    pub branches: Vec<Branch>,
    pub tables: EmbeddingTables,
    pub transformer: Transformer,
}

impl MultiScaleEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let branches = cfg
            .branches
            .iter()
            .enumerate()
            .map(|(i, b)| Branch::new(store, &format!("{prefix}.branch{i}"), b, cfg.groups, rng))
            .collect();
        let tables = EmbeddingTables::new(
            store,
            &format!("{prefix}.embed"),
            cfg.num_electrodes,
            cfg.max_slots,
            cfg.patch_len,
            rng,
        );
        let transformer = Transformer::new(store, &format!("{prefix}.transformer"), cfg.transformer(), rng)?;
        Ok(Self {
            cfg,
            branches,
            tables,
            transformer,
        })
    }

    /// Per-branch `[B·P, w]` features with embeddings added.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, batch: &PatchBatch) -> Result<Vec<Var>> {
        if batch.patch_len() != self.cfg.patch_len {
            return Err(Error::Contract(format!(
                "patch length {} but encoder expects {}",
                batch.patch_len(),
                self.cfg.patch_len
            )));
        }
        let m = batch.num_patches();
        let x = tape.constant(batch.patches.clone().reshaped(&[m, self.cfg.patch_len])?);
        self.embed_input(tape, store, x, batch)
    }

    /// As [`embed`](Self::embed) with the `[B·P, w]` patches given as a tape
    /// variable; provenance comes from `batch`.
    pub fn embed_input(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: &PatchBatch) -> Result<Vec<Var>> {
        self.embed_masked(tape, store, x, batch, None)
    }

    /// As [`embed_input`](Self::embed_input), with the branch features of the
    /// rows flagged in `mask` replaced by `token` before the channel and slot
    /// embeddings are added.
    pub fn embed_masked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        batch: &PatchBatch,
        mask: Option<(Var, &[bool])>,
    ) -> Result<Vec<Var>> {
        self.branches
            .iter()
            .map(|b| {
                let mut f = b.forward(tape, store, x)?;
                if let Some((token, rows)) = mask {
                    f = tape.mask_fill(f, token, rows)?;
                }
                self.tables.add(tape, store, f, &batch.channel_idx, &batch.slot_idx)
            })
            .collect()
    }

    /// Runs the shared transformer over each branch's `[B·P, w]` tokens and
    /// returns per-branch `[B·P, D]` representations.
    pub fn contextualize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[Var],
        batch_size: usize,
    ) -> Result<Vec<Var>> {
        let s = tokens.len();
        let m = tape.shape(tokens[0])[0];
        let p = m / batch_size;
        let all = tape.concat(tokens, 0)?;
        let all = tape.reshape(all, &[s * batch_size, p, self.cfg.patch_len])?;
        let out = self.transformer.forward(tape, store, all)?;
        let out = tape.reshape(out, &[s * m, self.cfg.dim])?;
        (0..s).map(|i| tape.slice(out, 0, i * m, m)).collect()
    }

    /// Branch features, embeddings and the shared transformer.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &PatchBatch) -> Result<Vec<Var>> {
        let tokens = self.embed(tape, store, batch)?;
        self.contextualize(tape, store, &tokens, batch.batch_size())
    }
}

#[cfg(test)]
mod tests;
