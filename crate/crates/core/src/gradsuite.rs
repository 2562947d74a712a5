//! Central-difference checks of every differentiable primitive and of the
//! composed tokenizer objective, repeated over many seeds.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Branch, BranchConfig, EncoderConfig, PatchBatch, Transformer, TransformerConfig};
use crate::error::{Error, Result};
use crate::rvq::RvqConfig;
use crate::spectral::{tokenizer_loss_on_tape, unit_circle_on_tape, LossWeights, PredictionVars, TargetBatch};
use crate::tensor::{grad_check, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{Fusion, TokenizerConfig, TokenizerModel};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_row",
    "mul_row",
    "scale",
    "add_scalar",
    "gelu",
    "exp",
    "sqrt",
    "relu",
    "clamp_min",
    "square",
    "matmul",
    "linear",
    "bmm",
    "bmm_transposed",
    "conv1d",
    "group_norm",
    "layer_norm",
    "avg_pool1d",
    "softmax",
    "cross_entropy",
    "embedding",
    "concat",
    "slice",
    "permute",
    "sum_last",
    "mean",
    "mask_fill",
    "multihead_attention",
    "branch",
    "transformer",
    "unit_circle_loss",
    "spectral_loss",
    "tokenizer_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub primitive: String,
    pub max_rel_error: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub const HEADER: &'static str = "primitive,max_rel_error,seeds,pass";

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&SuiteRow> {
        self.rows
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{:e},{},{}",
                r.primitive,
                r.max_rel_error,
                r.seeds,
                r.max_rel_error <= self.tolerance
            )
            .unwrap();
        }
        s
    }
}

type Case = (Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>);

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, of either sign.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.3..2.0)).collect()).unwrap()
}

fn concat_flat(parts: &[&Tensor]) -> Tensor {
    Tensor::from_vec(parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Slices `shape` worth of values from a flat input starting at `start`.
fn part(tape: &mut Tape, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
    let n = shape.iter().product();
    let s = tape.slice(x, 0, start, n)?;
    tape.reshape(s, shape)
}

/// `Σ r ⊙ y` with fixed random weights, so every output coordinate matters.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let r = tape.constant(randn(tape.shape(y), &mut rng));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn unary(seed: u64, x: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    let shape = x.shape().to_vec();
    (
        Tensor::from_vec(x.into_data()),
        Box::new(move |t, v| {
            let a = t.reshape(v, &shape)?;
            let y = f(t, a)?;
            probe(t, y, seed)
        }),
    )
}

fn binary(seed: u64, a: Tensor, b: Tensor, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    let na = a.len();
    (
        concat_flat(&[&a, &b]),
        Box::new(move |t, v| {
            let x = part(t, v, 0, &sa)?;
            let y = part(t, v, na, &sb)?;
            let o = f(t, x, y)?;
            probe(t, o, seed)
        }),
    )
}

fn tiny_tokenizer_config() -> TokenizerConfig {
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
            max_slots: 2,
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

/// Input and function for one primitive at one seed.
pub fn case(name: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    Ok(match name {
        "add" => binary(seed, randn(&[3, 4], r), randn(&[3, 4], r), |t, a, b| t.add(a, b)),
        "sub" => binary(seed, randn(&[3, 4], r), randn(&[3, 4], r), |t, a, b| t.sub(a, b)),
        "mul" => binary(seed, randn(&[3, 4], r), randn(&[3, 4], r), |t, a, b| t.mul(a, b)),
        "div" => binary(seed, randn(&[3, 4], r), away_from_zero(&[3, 4], r), |t, a, b| t.div(a, b)),
        "add_row" => binary(seed, randn(&[3, 4], r), randn(&[4], r), |t, a, b| t.add_row(a, b)),
        "mul_row" => binary(seed, randn(&[3, 4], r), randn(&[4], r), |t, a, b| t.mul_row(a, b)),
        "scale" => unary(seed, randn(&[3, 4], r), |t, a| Ok(t.scale(a, -1.7))),
        "add_scalar" => unary(seed, randn(&[3, 4], r), |t, a| Ok(t.add_scalar(a, 0.3))),
        "gelu" => unary(seed, randn(&[3, 4], r), |t, a| Ok(t.gelu(a))),
        "exp" => unary(seed, randn(&[3, 4], r), |t, a| Ok(t.exp(a))),
        "sqrt" => unary(seed, positive(&[3, 4], r), |t, a| Ok(t.sqrt(a))),
        "relu" => unary(seed, away_from_zero(&[3, 4], r), |t, a| Ok(t.relu(a))),
        "clamp_min" => unary(seed, away_from_zero(&[3, 4], r), |t, a| Ok(t.clamp_min(a, 0.0))),
        "square" => unary(seed, randn(&[3, 4], r), |t, a| t.square(a)),
        "matmul" => binary(seed, randn(&[3, 4], r), randn(&[4, 2], r), |t, a, b| t.matmul(a, b)),
        "linear" => {
            let (x, w, b) = (randn(&[2, 3, 4], r), randn(&[5, 4], r), randn(&[5], r));
            (
                concat_flat(&[&x, &w, &b]),
                Box::new(move |t, v| {
                    let x = part(t, v, 0, &[2, 3, 4])?;
                    let w = part(t, v, 24, &[5, 4])?;
                    let b = part(t, v, 44, &[5])?;
                    let y = t.linear(x, w, Some(b))?;
                    probe(t, y, seed)
                }),
            )
        }
        "bmm" => binary(seed, randn(&[2, 3, 4], r), randn(&[2, 4, 5], r), |t, a, b| t.bmm(a, b, false)),
        "bmm_transposed" => binary(seed, randn(&[2, 3, 4], r), randn(&[2, 5, 4], r), |t, a, b| {
            t.bmm(a, b, true)
        }),
        "conv1d" => binary(seed, randn(&[2, 3, 10], r), randn(&[4, 3, 3], r), |t, a, b| t.conv1d(a, b, 1)),
        "group_norm" => {
            let (x, g, b) = (randn(&[2, 4, 6], r), randn(&[4], r), randn(&[4], r));
            (
                concat_flat(&[&x, &g, &b]),
                Box::new(move |t, v| {
                    let x = part(t, v, 0, &[2, 4, 6])?;
                    let g = part(t, v, 48, &[4])?;
                    let b = part(t, v, 52, &[4])?;
                    let y = t.group_norm(x, g, b, 2)?;
                    probe(t, y, seed)
                }),
            )
        }
        "layer_norm" => {
            let (x, g, b) = (randn(&[3, 5], r), randn(&[5], r), randn(&[5], r));
            (
                concat_flat(&[&x, &g, &b]),
                Box::new(move |t, v| {
                    let x = part(t, v, 0, &[3, 5])?;
                    let g = part(t, v, 15, &[5])?;
                    let b = part(t, v, 20, &[5])?;
                    let y = t.layer_norm(x, g, b)?;
                    probe(t, y, seed)
                }),
            )
        }
        "avg_pool1d" => unary(seed, randn(&[2, 3, 8], r), |t, a| t.avg_pool1d(a, 2)),
        "softmax" => unary(seed, randn(&[3, 5], r), |t, a| Ok(t.softmax(a))),
        "cross_entropy" => {
            let x = randn(&[4, 5], r);
            let targets: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let weights = vec![1.0, 0.0, 2.0, 0.5];
            (
                Tensor::from_vec(x.into_data()),
                Box::new(move |t, v| {
                    let x = t.reshape(v, &[4, 5])?;
                    t.cross_entropy(x, &targets, &weights)
                }),
            )
        }
        "embedding" => {
            let idx: Vec<usize> = (0..7).map(|_| r.gen_range(0..6)).collect();
            (
                Tensor::from_vec(randn(&[6, 3], r).into_data()),
                Box::new(move |t, v| {
                    let x = t.reshape(v, &[6, 3])?;
                    let y = t.embedding(x, &idx)?;
                    probe(t, y, seed)
                }),
            )
        }
        "concat" => binary(seed, randn(&[2, 3], r), randn(&[2, 4], r), |t, a, b| t.concat(&[a, b], 1)),
        "slice" => unary(seed, randn(&[4, 5], r), |t, a| t.slice(a, 1, 1, 3)),
        "permute" => unary(seed, randn(&[2, 3, 4], r), |t, a| t.permute(a, &[2, 0, 1])),
        "sum_last" => unary(seed, randn(&[3, 4], r), |t, a| Ok(t.sum_last(a))),
        "mean" => unary(seed, randn(&[3, 4], r), |t, a| {
            let s = t.square(a)?;
            Ok(t.mean(s))
        }),
        "mask_fill" => binary(seed, randn(&[5, 3], r), randn(&[3], r), |t, a, b| {
            t.mask_fill(a, b, &[true, false, true, false, true])
        }),
        "multihead_attention" => {
            let (q, k, v) = (randn(&[2, 3, 4], r), randn(&[2, 3, 4], r), randn(&[2, 3, 4], r));
            let norms: Vec<Tensor> = (0..4).map(|_| randn(&[2], r)).collect();
            (
                concat_flat(&[&q, &k, &v]),
                Box::new(move |t, x| {
                    let q = part(t, x, 0, &[2, 3, 4])?;
                    let k = part(t, x, 24, &[2, 3, 4])?;
                    let v = part(t, x, 48, &[2, 3, 4])?;
                    let n: Vec<Var> = norms.iter().map(|n| t.constant(n.clone())).collect();
                    let y = t.multihead_attention(q, k, v, 2, Some([(n[0], n[1]), (n[2], n[3])]))?;
                    probe(t, y, seed)
                }),
            )
        }
        "branch" => {
            let mut store = ParamStore::new();
            let cfg = BranchConfig::reference()[1].clone();
            let b = Branch::new(&mut store, "b", &cfg, 4, r);
            (
                Tensor::from_vec(randn(&[2, 16], r).into_data()),
                Box::new(move |t, v| {
                    let x = t.reshape(v, &[2, 16])?;
                    let y = b.forward(t, &store, x)?;
                    probe(t, y, seed)
                }),
            )
        }
        "transformer" => {
            let mut store = ParamStore::new();
            let cfg = TransformerConfig {
                input_dim: 6,
                dim: 4,
                depth: 2,
                heads: 2,
                mlp_hidden: 8,
                qk_norm: true,
            };
            let tr = Transformer::new(&mut store, "t", cfg, r)?;
            for (id, p) in store.clone().iter() {
                if p.name.contains("scale") {
                    store.set_value(id, randn(p.value.shape(), r))?;
                }
            }
            (
                Tensor::from_vec(randn(&[2, 3, 6], r).into_data()),
                Box::new(move |t, v| {
                    let x = t.reshape(v, &[2, 3, 6])?;
                    let y = tr.forward(t, &store, x)?;
                    probe(t, y, seed)
                }),
            )
        }
        "unit_circle_loss" => {
            let (s, c) = (away_from_zero(&[3, 5], r), away_from_zero(&[3, 5], r));
            let phase: Vec<f64> = (0..15).map(|_| r.gen_range(-3.1..3.1)).collect();
            let ts = Tensor::new(vec![3, 5], phase.iter().map(|p: &f64| p.sin()).collect())?;
            let tc = Tensor::new(vec![3, 5], phase.iter().map(|p: &f64| p.cos()).collect())?;
            (
                concat_flat(&[&s, &c]),
                Box::new(move |t, v| {
                    let s = part(t, v, 0, &[3, 5])?;
                    let c = part(t, v, 15, &[3, 5])?;
                    let ts = t.constant(ts.clone());
                    let tc = t.constant(tc.clone());
                    let lw = LossWeights::default();
                    unit_circle_on_tape(t, s, c, ts, tc, lw.lambda_circle, lw.denominator)
                }),
            )
        }
        "spectral_loss" => {
            let w = 8;
            let nb = w / 2 + 1;
            let patches = randn(&[2, w], r);
            let target = TargetBatch::from_patches(patches.data(), w)?;
            let (la, s, c) = (randn(&[2, nb], r), away_from_zero(&[2, nb], r), away_from_zero(&[2, nb], r));
            (
                concat_flat(&[&la, &s, &c]),
                Box::new(move |t, v| {
                    let pred = PredictionVars {
                        log_amp: part(t, v, 0, &[2, nb])?,
                        sin: part(t, v, 2 * nb, &[2, nb])?,
                        cos: part(t, v, 4 * nb, &[2, nb])?,
                    };
                    Ok(tokenizer_loss_on_tape(t, pred, &target, &LossWeights::default())?.total)
                }),
            )
        }
        "tokenizer_loss" => {
            let model = TokenizerModel::new(tiny_tokenizer_config(), seed)?;
            let batch = PatchBatch {
                patches: randn(&[1, 3, 16], r),
                channel_idx: vec![0, 1, 2],
                slot_idx: vec![0, 0, 1],
            };
            let codes = model.freeze_codes(&batch)?;
            let x0 = batch.patches.clone().reshaped(&[3, 16])?;
            (
                Tensor::from_vec(x0.into_data()),
                Box::new(move |t, v| {
                    let x = t.reshape(v, &[3, 16])?;
                    model.frozen_code_loss(t, x, &batch, &codes)
                }),
            )
        }
        other => return Err(Error::Config(format!("unknown primitive `{other}`"))),
    })
}

/// Worst relative error of one primitive over `seeds` seeds.
pub fn check_primitive(name: &str, seeds: usize) -> Result<SuiteRow> {
    let mut worst: f64 = 0.0;
    for s in 0..seeds as u64 {
        let (x, f) = case(name, s)?;
        let rep = grad_check(|t, v| f(t, v), &x, FD_STEP)?;
        worst = worst.max(rep.max_rel_error);
    }
    Ok(SuiteRow {
        primitive: name.to_string(),
        max_rel_error: worst,
        seeds,
    })
}

/// Runs every primitive in [`PRIMITIVES`] over `seeds` seeds.
pub fn run_gradient_suite(seeds: usize) -> Result<SuiteReport> {
    let rows = PRIMITIVES
        .iter()
        .map(|p| check_primitive(p, seeds))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        rows,
        tolerance: TOLERANCE,
    })
}
