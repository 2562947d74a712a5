//! Residual vector quantization with normalized nearest-neighbour search,
//! EMA codebook learning and k-means initialization.

mod kmeans;

pub use kmeans::{kmeans_init, KmeansStatus};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Laplace smoothing added to EMA cluster sizes.
pub const EMA_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// Distance between unit-normalized query and codeword.
    #[default]
    Normalized,
    /// Plain Euclidean distance.
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvqConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub beta: f64,
    pub decay: f64,
    pub metric: DistanceMetric,
    /// EMA size below which a code counts as unused.
    pub dead_threshold: f64,
    /// Consecutive low-usage updates before a code is reinitialized.
    pub dead_window: usize,
}

impl RvqConfig {
    pub fn paper() -> Self {
        Self {
            levels: 8,
            codebook_size: 8192,
            code_dim: 128,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        Self {
            levels: 4,
            codebook_size: 256,
            code_dim: 32,
            beta: 0.25,
            decay: 0.99,
            metric: DistanceMetric::Normalized,
            dead_threshold: 1.0,
            dead_window: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.codebook_size == 0 || self.code_dim == 0 {
            return Err(Error::Config(
                "rvq levels, codebook size and code dimension must be positive".into(),
            ));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config(format!("ema decay {} outside (0, 1)", self.decay)));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("commitment weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// One codebook level with its EMA statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `[K, d]`.
    pub entries: Tensor,
    pub cluster_size: Vec<f64>,
    /// `[K, d]`.
    pub embed_sum: Tensor,
    /// Consecutive updates with EMA size below the dead threshold.
    pub low_usage: Vec<usize>,
    /// Total assignments seen.
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Self {
        let k = entries.shape()[0];
        Self {
            embed_sum: entries.clone(),
            entries,
            cluster_size: vec![1.0; k],
            low_usage: vec![0; k],
            usage: vec![0; k],
        }
    }

    pub fn random<R: Rng + ?Sized>(k: usize, d: usize, rng: &mut R) -> Self {
        Self::new(Tensor::randn(&[k, d], 1.0, rng))
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn entry(&self, j: usize) -> &[f64] {
        self.entries.row(j)
    }

    /// Restarts the EMA statistics from the current entries.
    pub fn reset_stats(&mut self) {
        self.embed_sum = self.entries.clone();
        self.cluster_size.iter_mut().for_each(|c| *c = 1.0);
        self.low_usage.iter_mut().for_each(|c| *c = 0);
    }
}

/// Unit-normalized copy; the zero vector stays zero.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest codeword to `p`. Returns the index and the raw codeword; ties go
/// to the lowest index.
pub fn quantize_level<'a>(
    p: &[f64],
    book: &'a Codebook,
    metric: DistanceMetric,
) -> Result<(usize, &'a [f64])> {
    let search = SearchTable::new(book, metric)?;
    let j = search.nearest(p)?;
    Ok((j, book.entry(j)))
}

/// Codewords prepared for repeated nearest-neighbour queries.
struct SearchTable {
    keys: Vec<f64>,
    dim: usize,
    metric: DistanceMetric,
}

impl SearchTable {
    fn new(book: &Codebook, metric: DistanceMetric) -> Result<Self> {
        if book.size() == 0 {
            return Err(Error::Config("empty codebook".into()));
        }
        let keys = match metric {
            DistanceMetric::Normalized => (0..book.size())
                .flat_map(|j| l2_normalize(book.entry(j)))
                .collect(),
            DistanceMetric::Euclidean => book.entries.data().to_vec(),
        };
        Ok(Self {
            keys,
            dim: book.dim(),
            metric,
        })
    }

    fn nearest(&self, p: &[f64]) -> Result<usize> {
        if p.len() != self.dim {
            return Err(Error::shape(
                "quantize_level",
                format!("query of {} against codewords of {}", p.len(), self.dim),
            ));
        }
        let q = match self.metric {
            DistanceMetric::Normalized => l2_normalize(p),
            DistanceMetric::Euclidean => p.to_vec(),
        };
        let mut best = (0, f64::INFINITY);
        for (j, key) in self.keys.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(&q, key);
            if d < best.1 {
                best = (j, d);
            }
        }
        Ok(best.0)
    }
}

/// Result of quantizing a batch of code-space vectors through all levels.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenAssignment {
    /// `indices[row][level]`.
    pub indices: Vec<Vec<usize>>,
    /// Residual entering each level, `[levels][rows·d]`.
    pub residuals: Vec<Vec<f64>>,
    /// Selected codewords per level, `[levels][rows·d]`.
    pub codewords: Vec<Vec<f64>>,
    /// Residual after the last level, `rows·d`.
    pub final_residual: Vec<f64>,
    /// `Σ z_i`, `rows·d`.
    pub reconstruction: Vec<f64>,
    pub dim: usize,
}

impl TokenAssignment {
    pub fn rows(&self) -> usize {
        self.indices.len()
    }
}

/// Residual cascade over `books` for `rows × d` inputs (already in code space).
pub fn quantize_codes(
    p: &[f64],
    d: usize,
    books: &[Codebook],
    metric: DistanceMetric,
) -> Result<TokenAssignment> {
    if books.is_empty() {
        return Err(Error::Config("rvq stack without codebooks".into()));
    }
    if d == 0 || p.len() % d != 0 {
        return Err(Error::shape("rvq", format!("{} values with dim {d}", p.len())));
    }
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            context: "rvq input".into(),
        });
    }
    let rows = p.len() / d;
    let mut residual = p.to_vec();
    let mut recon = vec![0.0; p.len()];
    let mut indices = vec![Vec::with_capacity(books.len()); rows];
    let mut residuals = Vec::with_capacity(books.len());
    let mut codewords = Vec::with_capacity(books.len());
    for book in books {
        let search = SearchTable::new(book, metric)?;
        let mut z = vec![0.0; p.len()];
        for r in 0..rows {
            let j = search.nearest(&residual[r * d..(r + 1) * d])?;
            indices[r].push(j);
            z[r * d..(r + 1) * d].copy_from_slice(book.entry(j));
        }
        residuals.push(residual.clone());
        for ((res, rc), zi) in residual.iter_mut().zip(recon.iter_mut()).zip(&z) {
            *res -= zi;
            *rc += zi;
        }
        codewords.push(z);
    }
    Ok(TokenAssignment {
        indices,
        residuals,
        codewords,
        final_residual: residual,
        reconstruction: recon,
        dim: d,
    })
}

/// Codebooks for one branch, wrapped by learned projections between the
/// model dimension and the code dimension.
#[derive(Clone, Debug)]
pub struct RvqStack {
    pub books: Vec<Codebook>,
    pub down: (ParamId, ParamId),
    pub up: (ParamId, ParamId),
    pub cfg: RvqConfig,
}

/// Tape outputs of one stack.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// Straight-through reconstruction projected back to the model dimension.
    pub quantized: Var,
    /// Commitment loss.
    pub loss: Var,
    pub assignment: TokenAssignment,
}

impl RvqStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        cfg: RvqConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (k, dc) = (cfg.codebook_size, cfg.code_dim);
        let down = (
            store.add(
                format!("{prefix}.down.weight"),
                Tensor::randn(&[dc, model_dim], 1.0 / (model_dim as f64).sqrt(), rng),
            ),
            store.add_no_decay(format!("{prefix}.down.bias"), Tensor::zeros(&[dc])),
        );
        let up = (
            store.add(
                format!("{prefix}.up.weight"),
                Tensor::randn(&[model_dim, dc], 1.0 / (dc as f64).sqrt(), rng),
            ),
            store.add_no_decay(format!("{prefix}.up.bias"), Tensor::zeros(&[model_dim])),
        );
        let books = (0..cfg.levels)
            .map(|_| Codebook::random(k, dc, rng))
            .collect();
        Ok(Self { books, down, up, cfg })
    }

    pub fn project_down(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.down.0), tape.param(store, self.down.1));
        tape.linear(p, w, Some(b))
    }

    pub fn project_up(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.up.0), tape.param(store, self.up.1));
        tape.linear(z, w, Some(b))
    }

    /// Quantizes `[M, D]` representations: down-projection, residual
    /// cascade, straight-through estimator, up-projection and commitment
    /// loss.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> Result<StackOutput> {
        let h = self.project_down(tape, store, p)?;
        let assignment = quantize_codes(
            tape.value(h).data(),
            self.cfg.code_dim,
            &self.books,
            self.cfg.metric,
        )?;
        let shape = tape.shape(h).to_vec();
        let recon = Tensor::new(shape, assignment.reconstruction.clone())?;
        let st = tape.straight_through(h, &recon)?;
        let quantized = self.project_up(tape, store, st)?;
        let loss = quantization_loss_on_tape(tape, h, &assignment, self.cfg.beta)?;
        Ok(StackOutput {
            quantized,
            loss,
            assignment,
        })
    }

    /// Indices only, without recording gradients of interest.
    pub fn encode(&self, store: &ParamStore, p: &Tensor) -> Result<TokenAssignment> {
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let h = self.project_down(&mut tape, store, pv)?;
        quantize_codes(tape.value(h).data(), self.cfg.code_dim, &self.books, self.cfg.metric)
    }

    /// Up-projected sum of the codewords named by `indices[row][level]`.
    pub fn decode_indices(&self, store: &ParamStore, indices: &[Vec<usize>]) -> Result<Tensor> {
        let dc = self.cfg.code_dim;
        let mut z = vec![0.0; indices.len() * dc];
        for (r, idx) in indices.iter().enumerate() {
            if idx.len() > self.books.len() {
                return Err(Error::Contract(format!(
                    "{} levels requested from a stack of {}",
                    idx.len(),
                    self.books.len()
                )));
            }
            for (book, &j) in self.books.iter().zip(idx) {
                if j >= book.size() {
                    return Err(Error::Lookup {
                        what: "codebook",
                        index: j,
                        len: book.size(),
                    });
                }
                for (a, b) in z[r * dc..(r + 1) * dc].iter_mut().zip(book.entry(j)) {
                    *a += b;
                }
            }
        }
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(vec![indices.len(), dc], z)?);
        let y = self.project_up(&mut tape, store, zv)?;
        Ok(tape.value(y).clone())
    }

    /// EMA update of every level from one batch assignment; returns the
    /// number of reinitialized codes.
    pub fn ema_update<R: Rng + ?Sized>(&mut self, a: &TokenAssignment, rng: &mut R) -> usize {
        let d = a.dim;
        let mut reinit = 0;
        for (level, book) in self.books.iter_mut().enumerate() {
            let pairs: Vec<(usize, &[f64])> = (0..a.rows())
                .map(|r| (a.indices[r][level], &a.residuals[level][r * d..(r + 1) * d]))
                .collect();
            reinit += ema_update(book, &pairs, &self.cfg, rng);
        }
        reinit
    }
}

/// `beta · mean over levels, rows and dims of (p_i − sg(z_i))²` where
/// `p_i = h − Σ_{j<i} sg(z_j)`.
pub fn quantization_loss_on_tape(
    tape: &mut Tape,
    h: Var,
    a: &TokenAssignment,
    beta: f64,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let levels = a.codewords.len();
    let mut prefix = vec![0.0; tape.value(h).len()];
    let mut total: Option<Var> = None;
    for z in &a.codewords {
        // p_i − z_i = h − (Σ_{j<i} z_j + z_i)
        for (s, zi) in prefix.iter_mut().zip(z) {
            *s += zi;
        }
        let c = tape.constant(Tensor::new(shape.clone(), prefix.clone())?);
        let diff = tape.sub(h, c)?;
        let sq = tape.square(diff)?;
        let m = tape.mean(sq);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no quantization levels".into()))?;
    Ok(tape.scale(total, beta / levels as f64))
}

/// Plain-value form of the commitment loss.
pub fn quantization_loss(p_levels: &[&[f64]], z_levels: &[&[f64]], beta: f64) -> Result<f64> {
    if p_levels.len() != z_levels.len() || p_levels.is_empty() {
        return Err(Error::Contract(format!(
            "{} residual levels vs {} codeword levels",
            p_levels.len(),
            z_levels.len()
        )));
    }
    let mut total = 0.0;
    for (p, z) in p_levels.iter().zip(z_levels) {
        if p.len() != z.len() || p.is_empty() {
            return Err(Error::Contract("misaligned level".into()));
        }
        total += sq_dist(p, z) / p.len() as f64;
    }
    Ok(beta * total / p_levels.len() as f64)
}

/// EMA codebook update from `(index, input)` pairs with Laplace-smoothed
/// cluster sizes and dead-code reinitialization. Returns the number of
/// reinitialized codes.
pub fn ema_update<R: Rng + ?Sized>(
    book: &mut Codebook,
    assignments: &[(usize, &[f64])],
    cfg: &RvqConfig,
    rng: &mut R,
) -> usize {
    let (k, d) = (book.size(), book.dim());
    let decay = cfg.decay;
    let mut counts = vec![0.0; k];
    let mut sums = vec![0.0; k * d];
    for &(j, x) in assignments {
        counts[j] += 1.0;
        book.usage[j] += 1;
        for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(x) {
            *s += v;
        }
    }
    for j in 0..k {
        book.cluster_size[j] = decay * book.cluster_size[j] + (1.0 - decay) * counts[j];
    }
    for (e, s) in book.embed_sum.data_mut().iter_mut().zip(&sums) {
        *e = decay * *e + (1.0 - decay) * s;
    }
    if !assignments.is_empty() {
        let total: f64 = book.cluster_size.iter().sum();
        let es = book.embed_sum.data().to_vec();
        for j in 0..k {
            let smoothed = (book.cluster_size[j] + EMA_EPS) / (total + k as f64 * EMA_EPS) * total;
            for (e, s) in book.entries.data_mut()[j * d..(j + 1) * d]
                .iter_mut()
                .zip(&es[j * d..(j + 1) * d])
            {
                *e = s / smoothed;
            }
        }
    }

    let mut reinit = 0;
    for j in 0..k {
        if book.cluster_size[j] < cfg.dead_threshold {
            book.low_usage[j] += 1;
        } else {
            book.low_usage[j] = 0;
        }
        if book.low_usage[j] >= cfg.dead_window && !assignments.is_empty() {
            let (_, x) = assignments[rng.gen_range(0..assignments.len())];
            let row = &mut book.entries.data_mut()[j * d..(j + 1) * d];
            for (e, v) in row.iter_mut().zip(x) {
                *e = v + 1e-3 * rng.gen_range(-1.0..1.0);
            }
            let row = row.to_vec();
            book.embed_sum.data_mut()[j * d..(j + 1) * d].copy_from_slice(&row);
            book.cluster_size[j] = 1.0;
            book.low_usage[j] = 0;
            reinit += 1;
        }
    }
    reinit
}

#[cfg(test)]
mod tests;
