//! Tokenizer: encoder, per-branch RVQ stacks, decoder transformer and the
//! three spectral heads, with its training loop and per-band evaluation.

mod eval;
mod train;

pub use eval::{band_errors, eval_per_band, reconstruct, BandReport, BandRow};
pub use train::{
    evaluate_samples, train_step, train_tokenizer, CurveRow, StepLosses, TrainConfig, TrainOutcome, TrainState,
    CURVE_HEADER,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderConfig, MultiScaleEncoder, PatchBatch, Transformer, TransformerConfig};
use crate::error::{Error, Result};
use crate::rvq::{quantization_loss_on_tape, Codebook, RvqConfig, RvqStack, TokenAssignment};
use crate::spectral::{num_bins, tokenizer_loss_on_tape, LossWeights, PhasePrediction, PredictionVars, TargetBatch};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// How per-branch quantized representations enter the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    Sum,
    /// Concatenate branches and project back to `D`.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub encoder: EncoderConfig,
    pub rvq: RvqConfig,
    pub decoder_depth: usize,
    pub fusion: Fusion,
    pub loss: LossWeights,
}

impl TokenizerConfig {
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig::paper(),
            rvq: RvqConfig::paper(),
            decoder_depth: 3,
            fusion: Fusion::Sum,
            loss: LossWeights::default(),
        }
    }

    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            rvq: RvqConfig::desk(),
            decoder_depth: 2,
            fusion: Fusion::Sum,
            loss: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::spectral::check_patch_len(self.encoder.patch_len)?;
        self.encoder.validate()?;
        self.rvq.validate()?;
        self.decoder().validate()
    }

    fn decoder(&self) -> TransformerConfig {
        TransformerConfig {
            input_dim: self.encoder.dim,
            depth: self.decoder_depth,
            ..self.encoder.transformer()
        }
    }
}

/// Code choices held fixed for gradient checks.
#[derive(Clone, Debug, Default)]
pub struct FrozenCodes {
    pub assignments: Vec<TokenAssignment>,
    pub shifts: Vec<Tensor>,
}

/// Tape outputs of one tokenizer forward pass.
pub struct TokenizerForward {
    pub pred: PredictionVars,
    /// Commitment loss averaged over branches.
    pub quant_loss: Var,
    /// One assignment per branch.
    pub assignments: Vec<TokenAssignment>,
}

#[derive(Clone, Debug)]
pub struct TokenizerModel {
    pub cfg: TokenizerConfig,
    pub store: ParamStore,
    pub encoder: MultiScaleEncoder,
    pub stacks: Vec<RvqStack>,
    pub decoder: Transformer,
    fuse: Option<(ParamId, ParamId)>,
    heads: [(ParamId, ParamId); 3],
}

const HEAD_NAMES: [&str; 3] = ["log_amp", "sin", "cos"];

impl TokenizerModel {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = MultiScaleEncoder::new(&mut store, "encoder", cfg.encoder.clone(), &mut rng)?;
        let d = cfg.encoder.dim;
        let stacks = (0..cfg.encoder.num_branches())
            .map(|s| RvqStack::new(&mut store, &format!("rvq{s}"), d, cfg.rvq.clone(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse = (cfg.fusion == Fusion::Concat).then(|| {
            let s = stacks.len();
            (
                store.add(
                    "fuse.weight",
                    Tensor::randn(&[d, s * d], 1.0 / ((s * d) as f64).sqrt(), &mut rng),
                ),
                store.add_no_decay("fuse.bias", Tensor::zeros(&[d])),
            )
        });
        let decoder = Transformer::new(&mut store, "decoder", cfg.decoder(), &mut rng)?;
        let nb = num_bins(cfg.encoder.patch_len);
        let heads = HEAD_NAMES.map(|h| {
            (
                store.add(format!("head.{h}.weight"), Tensor::randn(&[nb, d], 0.02, &mut rng)),
                store.add_no_decay(format!("head.{h}.bias"), Tensor::zeros(&[nb])),
            )
        });
        Ok(Self {
            cfg,
            store,
            encoder,
            stacks,
            decoder,
            fuse,
            heads,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cfg.encoder.patch_len
    }

    /// Encoder, quantization with straight-through gradients, and decoding.
    pub fn forward(&self, tape: &mut Tape, batch: &PatchBatch) -> Result<TokenizerForward> {
        let reps = self.encoder.forward(tape, &self.store, batch)?;
        let mut quantized = Vec::with_capacity(reps.len());
        let mut assignments = Vec::with_capacity(reps.len());
        let mut quant_loss: Option<Var> = None;
        for (stack, r) in self.stacks.iter().zip(reps) {
            let out = stack.forward(tape, &self.store, r)?;
            quantized.push(out.quantized);
            assignments.push(out.assignment);
            quant_loss = Some(match quant_loss {
                None => out.loss,
                Some(l) => tape.add(l, out.loss)?,
            });
        }
        let quant_loss = tape.scale(quant_loss.unwrap(), 1.0 / self.stacks.len() as f64);
        let pred = self.decode(tape, &quantized, batch.batch_size())?;
        Ok(TokenizerForward {
            pred,
            quant_loss,
            assignments,
        })
    }

    /// Fuses per-branch `[M, D]` representations and runs the decoder and
    /// heads.
    pub fn decode(&self, tape: &mut Tape, quantized: &[Var], batch_size: usize) -> Result<PredictionVars> {
        let m = tape.shape(quantized[0])[0];
        let d = self.cfg.encoder.dim;
        let fused = match self.fuse {
            None => {
                let mut acc = quantized[0];
                for &q in &quantized[1..] {
                    acc = tape.add(acc, q)?;
                }
                acc
            }
            Some((w, b)) => {
                let cat = tape.concat(quantized, 1)?;
                let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
                tape.linear(cat, w, Some(b))?
            }
        };
        let h = tape.reshape(fused, &[batch_size, m / batch_size, d])?;
        let h = self.decoder.forward(tape, &self.store, h)?;
        let h = tape.reshape(h, &[m, d])?;
        let mut outs = [h; 3];
        for (o, (w, b)) in outs.iter_mut().zip(self.heads) {
            let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
            *o = tape.linear(h, w, Some(b))?;
        }
        Ok(PredictionVars {
            log_amp: outs[0],
            sin: outs[1],
            cos: outs[2],
        })
    }

    /// Code assignments at the batch's patches together with the constant
    /// shift `quantized - h` per branch.
    pub fn freeze_codes(&self, batch: &PatchBatch) -> Result<FrozenCodes> {
        let mut tape = Tape::new();
        let reps = self.encoder.forward(&mut tape, &self.store, batch)?;
        let mut out = FrozenCodes::default();
        for (stack, r) in self.stacks.iter().zip(reps) {
            let h = stack.project_down(&mut tape, &self.store, r)?;
            let a = stack.encode(&self.store, tape.value(r))?;
            let shift = a
                .reconstruction
                .iter()
                .zip(tape.value(h).data())
                .map(|(z, h)| z - h)
                .collect();
            out.shifts.push(Tensor::new(tape.shape(h).to_vec(), shift)?);
            out.assignments.push(a);
        }
        Ok(out)
    }

    /// Full training objective as a function of the `[B·P, w]` encoder input
    /// with the code choice and the reconstruction target held fixed. Away from assignment boundaries its
    /// gradient equals the straight-through gradient of [`forward`](Self::forward).
    pub fn frozen_code_loss(&self, tape: &mut Tape, x: Var, batch: &PatchBatch, codes: &FrozenCodes) -> Result<Var> {
        let w = self.patch_len();
        let target = TargetBatch::from_patches(batch.patches.data(), w)?;
        let feats = self.encoder.embed_input(tape, &self.store, x, batch)?;
        let reps = self.encoder.contextualize(tape, &self.store, &feats, batch.batch_size())?;
        let mut q = Vec::with_capacity(reps.len());
        let mut lq: Option<Var> = None;
        for ((stack, r), (a, shift)) in self.stacks.iter().zip(reps).zip(codes.assignments.iter().zip(&codes.shifts)) {
            let h = stack.project_down(tape, &self.store, r)?;
            let c = tape.constant(shift.clone());
            let z = tape.add(h, c)?;
            q.push(stack.project_up(tape, &self.store, z)?);
            let l = quantization_loss_on_tape(tape, h, a, self.cfg.rvq.beta)?;
            lq = Some(match lq {
                None => l,
                Some(p) => tape.add(p, l)?,
            });
        }
        let lq = tape.scale(lq.unwrap(), 1.0 / self.stacks.len() as f64);
        let pred = self.decode(tape, &q, batch.batch_size())?;
        let lv = tokenizer_loss_on_tape(tape, pred, &target, &self.cfg.loss)?;
        tape.add(lv.total, lq)
    }

    /// Token indices per branch for a batch, `[branch][patch][level]`.
    pub fn tokenize(&self, batch: &PatchBatch) -> Result<Vec<Vec<Vec<usize>>>> {
        let mut tape = Tape::new();
        let reps = self.encoder.forward(&mut tape, &self.store, batch)?;
        self.stacks
            .iter()
            .zip(reps)
            .map(|(s, r)| Ok(s.encode(&self.store, tape.value(r))?.indices))
            .collect()
    }

    /// Spectral predictions decoded from token indices
    /// (`[branch][patch][level]`), for `batch_size` samples.
    pub fn detokenize(&self, tokens: &[Vec<Vec<usize>>], batch_size: usize) -> Result<Vec<PhasePrediction>> {
        if tokens.len() != self.stacks.len() {
            return Err(Error::Compat {
                field: "branches".into(),
                expected: self.stacks.len().to_string(),
                found: tokens.len().to_string(),
            });
        }
        let mut tape = Tape::new();
        let mut q = Vec::with_capacity(tokens.len());
        for (s, idx) in self.stacks.iter().zip(tokens) {
            q.push(tape.constant(s.decode_indices(&self.store, idx)?));
        }
        let pred = self.decode(&mut tape, &q, batch_size)?;
        Ok(predictions(&tape, pred))
    }

    /// Per-patch spectral predictions without gradients.
    pub fn predict(&self, batch: &PatchBatch) -> Result<Vec<PhasePrediction>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch)?;
        Ok(predictions(&tape, f.pred))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_value(&self.cfg).expect("config serializes");
        let mut c = Checkpoint::new("tokenizer", cfg);
        c.push_store(&self.store);
        for (s, stack) in self.stacks.iter().enumerate() {
            for (l, b) in stack.books.iter().enumerate() {
                let p = format!("codebook.{s}.{l}");
                c.push(format!("{p}.entries"), b.entries.clone());
                c.push(format!("{p}.embed_sum"), b.embed_sum.clone());
                c.push(format!("{p}.cluster_size"), Tensor::from_vec(b.cluster_size.clone()));
            }
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("tokenizer")?;
        let cfg: TokenizerConfig = serde_json::from_value(c.config.clone())
            .map_err(|e| Error::parse("checkpoint config", e.to_string()))?;
        let mut model = Self::new(cfg, 0)?;
        c.load_store(&mut model.store)?;
        for (s, stack) in model.stacks.iter_mut().enumerate() {
            for (l, b) in stack.books.iter_mut().enumerate() {
                let p = format!("codebook.{s}.{l}");
                let mut nb = Codebook::new(c.get(&format!("{p}.entries"))?.clone());
                nb.embed_sum = c.get(&format!("{p}.embed_sum"))?.clone();
                nb.cluster_size = c.get(&format!("{p}.cluster_size"))?.data().to_vec();
                if nb.entries.shape() != b.entries.shape() {
                    return Err(Error::Compat {
                        field: format!("{p}.entries"),
                        expected: format!("{:?}", b.entries.shape()),
                        found: format!("{:?}", nb.entries.shape()),
                    });
                }
                *b = nb;
            }
        }
        Ok(model)
    }
}

fn predictions(tape: &Tape, pred: PredictionVars) -> Vec<PhasePrediction> {
    let (la, s, c) = (tape.value(pred.log_amp), tape.value(pred.sin), tape.value(pred.cos));
    (0..la.shape()[0])
        .map(|i| PhasePrediction {
            log_amp_hat: la.row(i).to_vec(),
            sin_hat: s.row(i).to_vec(),
            cos_hat: c.row(i).to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests;
