use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Initial value of the per-channel residual gains.
pub const LAYER_SCALE_INIT: f64 = 0.001;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    /// Width of incoming tokens; projected to `dim` when different.
    pub input_dim: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub qk_norm: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("transformer dimensions must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "transformer dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth > 0 && self.mlp_hidden == 0 {
            return Err(Error::Config("mlp hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Affine,
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    q_norm: Option<Affine>,
    k_norm: Option<Affine>,
    scale1: ParamId,
    norm2: Affine,
    fc1: Dense,
    fc2: Dense,
    scale2: ParamId,
}

/// Pre-norm transformer stack with layer-scaled residual branches. No final
/// normalization is applied.
#[derive(Clone, Debug)]
pub struct Transformer {
    pub cfg: TransformerConfig,
    input_proj: Option<Dense>,
    blocks: Vec<Block>,
}

fn affine(store: &mut ParamStore, name: &str, d: usize) -> Affine {
    Affine {
        gamma: store.add_no_decay(format!("{name}.gamma"), Tensor::ones(&[d])),
        beta: store.add_no_decay(format!("{name}.beta"), Tensor::zeros(&[d])),
    }
}

fn dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    out: usize,
    inp: usize,
    std: f64,
    rng: &mut R,
) -> Dense {
    Dense {
        w: store.add(format!("{name}.weight"), Tensor::randn(&[out, inp], std, rng)),
        b: store.add_no_decay(format!("{name}.bias"), Tensor::zeros(&[out])),
    }
}

impl Transformer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: TransformerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let input_proj = (cfg.input_dim != d).then(|| {
            let std = 1.0 / (cfg.input_dim as f64).sqrt();
            dense(store, &format!("{prefix}.input_proj"), d, cfg.input_dim, std, rng)
        });
        let dh = d / cfg.heads;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                Block {
                    norm1: affine(store, &format!("{p}.norm1"), d),
                    q: dense(store, &format!("{p}.attn.q"), d, d, INIT_STD, rng),
                    k: dense(store, &format!("{p}.attn.k"), d, d, INIT_STD, rng),
                    v: dense(store, &format!("{p}.attn.v"), d, d, INIT_STD, rng),
                    out: dense(store, &format!("{p}.attn.out"), d, d, INIT_STD, rng),
                    q_norm: cfg.qk_norm.then(|| affine(store, &format!("{p}.attn.q_norm"), dh)),
                    k_norm: cfg.qk_norm.then(|| affine(store, &format!("{p}.attn.k_norm"), dh)),
                    scale1: store.add_no_decay(
                        format!("{p}.scale1"),
                        Tensor::full(&[d], LAYER_SCALE_INIT),
                    ),
                    norm2: affine(store, &format!("{p}.norm2"), d),
                    fc1: dense(store, &format!("{p}.mlp.fc1"), cfg.mlp_hidden, d, INIT_STD, rng),
                    fc2: dense(store, &format!("{p}.mlp.fc2"), d, cfg.mlp_hidden, INIT_STD, rng),
                    scale2: store.add_no_decay(
                        format!("{p}.scale2"),
                        Tensor::full(&[d], LAYER_SCALE_INIT),
                    ),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            input_proj,
            blocks,
        })
    }

    /// `x` is `[B, L, input_dim]`; attention runs over `L` independently per
    /// batch row. Returns `[B, L, dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != self.cfg.input_dim {
            return Err(Error::shape(
                "transformer",
                format!("input {:?}, expected [B, L, {}]", xs, self.cfg.input_dim),
            ));
        }
        let mut h = match self.input_proj {
            Some(p) => {
                let (w, b) = (tape.param(store, p.w), tape.param(store, p.b));
                tape.linear(x, w, Some(b))?
            }
            None => x,
        };
        for blk in &self.blocks {
            let n = norm(tape, store, h, blk.norm1)?;
            let q = apply(tape, store, n, blk.q)?;
            let k = apply(tape, store, n, blk.k)?;
            let v = apply(tape, store, n, blk.v)?;
            let qk = match (blk.q_norm, blk.k_norm) {
                (Some(a), Some(b)) => Some([
                    (tape.param(store, a.gamma), tape.param(store, a.beta)),
                    (tape.param(store, b.gamma), tape.param(store, b.beta)),
                ]),
                _ => None,
            };
            let att = tape.multihead_attention(q, k, v, self.cfg.heads, qk)?;
            let att = apply(tape, store, att, blk.out)?;
            let s1 = tape.param(store, blk.scale1);
            let att = tape.mul_row(att, s1)?;
            h = tape.add(h, att)?;

            let n = norm(tape, store, h, blk.norm2)?;
            let m = apply(tape, store, n, blk.fc1)?;
            let m = tape.gelu(m);
            let m = apply(tape, store, m, blk.fc2)?;
            let s2 = tape.param(store, blk.scale2);
            let m = tape.mul_row(m, s2)?;
            h = tape.add(h, m)?;
        }
        Ok(h)
    }
}

fn norm(tape: &mut Tape, store: &ParamStore, x: Var, a: Affine) -> Result<Var> {
    let (g, b) = (tape.param(store, a.gamma), tape.param(store, a.beta));
    tape.layer_norm(x, g, b)
}

fn apply(tape: &mut Tape, store: &ParamStore, x: Var, d: Dense) -> Result<Var> {
    let (w, b) = (tape.param(store, d.w), tape.param(store, d.b));
    tape.linear(x, w, Some(b))
}
