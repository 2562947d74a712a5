use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

type Grads = [Option<Tensor>];

/// Recorded operation with whatever the backward rule needs.
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    Sqrt(Var),
    Relu(Var),
    ClampMin(Var, f64),
    AvgPool1d(Var, usize),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    StraightThrough(Var),
    MaskFill {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b)
            | MatMul(a, b) => vec![*a, *b],
            Bmm { a, b, .. } => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Gelu(a) | Exp(a) | Sqrt(a) | Relu(a)
            | ClampMin(a, _) | AvgPool1d(a, _) | Softmax(a) | Reshape(a) | Permute(a, _)
            | Sum(a) | Mean(a) | SumLast(a) | StraightThrough(a) => vec![*a],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Conv1d { x, w, .. } => vec![*x, *w],
            GroupNorm { x, gamma, beta, .. } | LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            CrossEntropy { logits, .. } => vec![*logits],
            Embedding { table, .. } => vec![*table],
            Concat { inputs, .. } => inputs.clone(),
            Slice { x, .. } => vec![*x],
            MaskFill { x, token, .. } => vec![*x, *token],
        }
    }

    pub(crate) fn backward(
        &self,
        tape: &Tape,
        out: &Tensor,
        g: &Tensor,
        grads: &mut Grads,
    ) -> Result<()> {
        let val = |v: Var| tape.value(v);
        let push = |v: Var, data: Vec<f64>, grads: &mut Grads| {
            if tape.wants_grad(v) {
                let shape = tape.shape(v).to_vec();
                Tape::accumulate(grads, v, Tensor { shape, data });
            }
        };
        let gd = &g.data;
        use Op::*;
        match self {
            Leaf => {}
            Add(a, b) => {
                push(*a, gd.clone(), grads);
                push(*b, gd.clone(), grads);
            }
            Sub(a, b) => {
                push(*a, gd.clone(), grads);
                push(*b, gd.iter().map(|v| -v).collect(), grads);
            }
            Mul(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                push(*a, zip_map(gd, bv, |g, b| g * b), grads);
                push(*b, zip_map(gd, av, |g, a| g * a), grads);
            }
            Div(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                push(*a, zip_map(gd, bv, |g, b| g / b), grads);
                let gb = gd
                    .iter()
                    .zip(av)
                    .zip(bv)
                    .map(|((g, a), b)| -g * a / (b * b))
                    .collect();
                push(*b, gb, grads);
            }
            AddRow(a, row) => {
                let d = val(*row).len();
                push(*a, gd.clone(), grads);
                push(*row, column_sums(gd, d), grads);
            }
            MulRow(a, row) => {
                let rv = &val(*row).data;
                let av = &val(*a).data;
                let d = rv.len();
                let ga = gd.iter().enumerate().map(|(i, g)| g * rv[i % d]).collect();
                let mut gr = vec![0.0; d];
                for (i, (g, a)) in gd.iter().zip(av).enumerate() {
                    gr[i % d] += g * a;
                }
                push(*a, ga, grads);
                push(*row, gr, grads);
            }
            Scale(a, c) => push(*a, gd.iter().map(|g| g * c).collect(), grads),
            AddScalar(a) => push(*a, gd.clone(), grads),
            MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if tape.wants_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(gd, &bv.data, &mut ga, m, n, k);
                    push(*a, ga, grads);
                }
                if tape.wants_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(&av.data, gd, &mut gb, m, k, n);
                    push(*b, gb, grads);
                }
            }
            Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (out_f, in_f) = (wv.shape[0], wv.shape[1]);
                let rows = xv.len() / in_f;
                if tape.wants_grad(*x) {
                    let mut gx = vec![0.0; rows * in_f];
                    gemm_nn(gd, &wv.data, &mut gx, rows, out_f, in_f);
                    push(*x, gx, grads);
                }
                if tape.wants_grad(*w) {
                    let mut gw = vec![0.0; out_f * in_f];
                    gemm_tn(gd, &xv.data, &mut gw, rows, out_f, in_f);
                    push(*w, gw, grads);
                }
                if let Some(b) = b {
                    push(*b, column_sums(gd, out_f), grads);
                }
            }
            Bmm { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
                let n = out.shape[2];
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gs = &gd[i * m * n..(i + 1) * m * n];
                    let asl = &av.data[i * m * k..(i + 1) * m * k];
                    let bsl = &bv.data[i * k * n..(i + 1) * k * n];
                    let gas = &mut ga[i * m * k..(i + 1) * m * k];
                    let gbs = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // out = a · bᵀ with b stored [n, k]
                        gemm_nn(gs, bsl, gas, m, n, k);
                        gemm_tn(gs, asl, gbs, m, n, k);
                    } else {
                        gemm_nt(gs, bsl, gas, m, n, k);
                        gemm_tn(asl, gs, gbs, m, k, n);
                    }
                }
                push(*a, ga, grads);
                push(*b, gb, grads);
            }
            Conv1d { x, w, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, ci, l) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let (co, k) = (wv.shape[0], wv.shape[2]);
                let lo = out.shape[2];
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                for b in 0..n {
                    for o in 0..co {
                        let grow = &gd[(b * co + o) * lo..(b * co + o + 1) * lo];
                        for c in 0..ci {
                            let xrow = &xv.data[(b * ci + c) * l..(b * ci + c + 1) * l];
                            let gxrow_off = (b * ci + c) * l;
                            for j in 0..k {
                                let wij = wv.data[(o * ci + c) * k + j];
                                let mut acc = 0.0;
                                for (t, gt) in grow.iter().enumerate() {
                                    let s = t + j;
                                    if s < *pad || s - pad >= l {
                                        continue;
                                    }
                                    acc += gt * xrow[s - pad];
                                    gx[gxrow_off + s - pad] += gt * wij;
                                }
                                gw[(o * ci + c) * k + j] += acc;
                            }
                        }
                    }
                }
                push(*x, gx, grads);
                push(*w, gw, grads);
            }
            GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xv = val(*x);
                let (n, c, l) = (xv.shape[0], xv.shape[1], xv.shape[2]);
                let gv = &val(*gamma).data;
                let cpg = c / groups;
                let m = (cpg * l) as f64;
                let mut gx = vec![0.0; xv.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for b in 0..n {
                    for grp in 0..*groups {
                        let r = rstd[b * groups + grp];
                        let start = (b * c + grp * cpg) * l;
                        let end = start + cpg * l;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in start..end {
                            let ch = (i / l) % c;
                            let gh = gd[i] * gv[ch];
                            s1 += gh;
                            s2 += gh * xhat[i];
                            ggamma[ch] += gd[i] * xhat[i];
                            gbeta[ch] += gd[i];
                        }
                        for i in start..end {
                            let ch = (i / l) % c;
                            let gh = gd[i] * gv[ch];
                            gx[i] = r / m * (m * gh - s1 - xhat[i] * s2);
                        }
                    }
                }
                push(*x, gx, grads);
                push(*gamma, ggamma, grads);
                push(*beta, gbeta, grads);
            }
            LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = &val(*gamma).data;
                let d = gv.len();
                let rows = xhat.len() / d;
                let m = d as f64;
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let off = r * d;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let gh = gd[off + j] * gv[j];
                        s1 += gh;
                        s2 += gh * xhat[off + j];
                        ggamma[j] += gd[off + j] * xhat[off + j];
                        gbeta[j] += gd[off + j];
                    }
                    for j in 0..d {
                        let gh = gd[off + j] * gv[j];
                        gx[off + j] = rstd[r] / m * (m * gh - s1 - xhat[off + j] * s2);
                    }
                }
                push(*x, gx, grads);
                push(*gamma, ggamma, grads);
                push(*beta, gbeta, grads);
            }
            Gelu(a) => {
                let av = &val(*a).data;
                push(*a, zip_map(gd, av, |g, x| g * gelu_grad(x)), grads);
            }
            Exp(a) => push(*a, zip_map(gd, &out.data, |g, y| g * y), grads),
            Sqrt(a) => push(*a, zip_map(gd, &out.data, |g, y| g * 0.5 / y), grads),
            Relu(a) => {
                let av = &val(*a).data;
                push(*a, zip_map(gd, av, |g, x| if x > 0.0 { g } else { 0.0 }), grads);
            }
            ClampMin(a, lo) => {
                let av = &val(*a).data;
                push(
                    *a,
                    zip_map(gd, av, |g, x| if x > *lo { g } else { 0.0 }),
                    grads,
                );
            }
            AvgPool1d(a, k) => {
                let av = val(*a);
                let l = *av.shape.last().unwrap();
                let lo = l / k;
                let rows = av.len() / l;
                let mut ga = vec![0.0; av.len()];
                for r in 0..rows {
                    for t in 0..lo {
                        let gv = gd[r * lo + t] / *k as f64;
                        for j in 0..*k {
                            ga[r * l + t * k + j] = gv;
                        }
                    }
                }
                push(*a, ga, grads);
            }
            Softmax(a) => {
                let d = *out.shape.last().unwrap();
                let mut ga = vec![0.0; out.len()];
                for (r, (yr, gr)) in out.data.chunks(d).zip(gd.chunks(d)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..d {
                        ga[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                push(*a, ga, grads);
            }
            CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let k = *tape.shape(*logits).last().unwrap();
                let total: f64 = weights.iter().sum();
                let mut gl = vec![0.0; probs.len()];
                if total > 0.0 {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let scale = gd[0] * w / total;
                        for j in 0..k {
                            gl[r * k + j] = scale * probs[r * k + j];
                        }
                        gl[r * k + t] -= scale;
                    }
                }
                push(*logits, gl, grads);
            }
            Embedding { table, idx } => {
                let tv = val(*table);
                let d = tv.shape[1];
                let mut gt = vec![0.0; tv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += gd[r * d + j];
                    }
                }
                push(*table, gt, grads);
            }
            Concat { inputs, axis } => {
                let outer: usize = out.shape[..*axis].iter().product();
                let inner: usize = out.shape[axis + 1..].iter().product();
                let total = out.shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = tape.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    offset += len;
                    push(v, gv, grads);
                }
            }
            Slice { x, axis, start } => {
                let xs = tape.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let total = xs[*axis];
                let len = out.shape[*axis];
                let mut gx = vec![0.0; tape.value(*x).len()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * total + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                push(*x, gx, grads);
            }
            Reshape(a) => push(*a, gd.clone(), grads),
            Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gx = permute_data(&g.data, &out.shape, &inv);
                push(*a, gx, grads);
            }
            Sum(a) => push(*a, vec![gd[0]; tape.value(*a).len()], grads),
            Mean(a) => {
                let n = tape.value(*a).len();
                push(*a, vec![gd[0] / n as f64; n], grads);
            }
            SumLast(a) => {
                let d = *tape.shape(*a).last().unwrap();
                let n = tape.value(*a).len();
                push(*a, (0..n).map(|i| gd[i / d]).collect(), grads);
            }
            StraightThrough(p) => push(*p, gd.clone(), grads),
            MaskFill { x, token, mask } => {
                let d = tape.value(*token).len();
                let mut gx = gd.clone();
                let mut gt = vec![0.0; d];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..d {
                            gt[j] += gd[r * d + j];
                            gx[r * d + j] = 0.0;
                        }
                    }
                }
                push(*x, gx, grads);
                push(*token, gt, grads);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn column_sums(data: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for row in data.chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// c[m,n] += a[m,k] · b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// c[m,k] += a[m,n] · b[k,n]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// c[k,n] += a[m,k]ᵀ · b[m,n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < new_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(
            op,
            format!("operands {:?} and {:?} differ", a.shape, b.shape),
        ));
    }
    Ok(())
}

fn unary(tape: &mut Tape, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
    let v = tape.value(a);
    let data = v.data.iter().map(|&x| f(x)).collect();
    let shape = v.shape.clone();
    tape.record(Tensor { shape, data }, op)
}

/// Group-norm and layer-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x + y);
        let shape = self.value(a).shape.clone();
        Ok(self.record(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x - y);
        let shape = self.value(a).shape.clone();
        Ok(self.record(Tensor { shape, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x * y);
        let shape = self.value(a).shape.clone();
        Ok(self.record(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let data = zip_map(&self.value(a).data, &self.value(b).data, |x, y| x / y);
        let shape = self.value(a).shape.clone();
        Ok(self.record(Tensor { shape, data }, Op::Div(a, b)))
    }

    /// `a + row`, with `row` broadcast over the last axis of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.broadcast_check("add_row", a, row)?;
        let r = &self.value(row).data;
        let data = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + r[i % d])
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.record(Tensor { shape, data }, Op::AddRow(a, row)))
    }

    /// `a * row`, with `row` broadcast over the last axis of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.broadcast_check("mul_row", a, row)?;
        let r = &self.value(row).data;
        let data = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * r[i % d])
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.record(Tensor { shape, data }, Op::MulRow(a, row)))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let last = self.shape(a).last().copied().unwrap_or(1);
        let d = self.value(row).len();
        if d != last || self.shape(row).len() != 1 {
            return Err(Error::shape(
                op,
                format!("row {:?} vs operand {:?}", self.shape(row), self.shape(a)),
            ));
        }
        Ok(d)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        unary(self, a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        unary(self, a, |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        unary(self, a, gelu, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        unary(self, a, f64::exp, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        unary(self, a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        unary(self, a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `max(a, lo)`; gradient flows only where `a > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        unary(self, a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// 2-D matrix product `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut c, m, k, n);
        Ok(self.record(
            Tensor {
                shape: vec![m, n],
                data: c,
            },
            Op::MatMul(a, b),
        ))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(Error::shape(
                "linear",
                format!("input {:?} with weight {:?}", xs, ws),
            ));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {} outputs", self.shape(b), out_f),
                ));
            }
        }
        let rows = self.value(x).len() / in_f;
        let mut y = vec![0.0; rows * out_f];
        gemm_nt(
            &self.value(x).data,
            &self.value(w).data,
            &mut y,
            rows,
            in_f,
            out_f,
        );
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in y.chunks_mut(out_f) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        Ok(self.record(Tensor { shape, data: y }, Op::Linear { x, w, b }))
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape(
                "bmm",
                format!("{:?} x {:?} (trans_b={})", sa, sb, trans_b),
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut c = vec![0.0; batch * m * n];
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        for i in 0..batch {
            let asl = &av[i * m * k..(i + 1) * m * k];
            let bsl = &bv[i * k * n..(i + 1) * k * n];
            let csl = &mut c[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(asl, bsl, csl, m, k, n);
            } else {
                gemm_nn(asl, bsl, csl, m, k, n);
            }
        }
        Ok(self.record(
            Tensor {
                shape: vec![batch, m, n],
                data: c,
            },
            Op::Bmm { a, b, trans_b },
        ))
    }

    /// Stride-1 convolution without bias: `x` is `[N, C_in, L]`, `w` is
    /// `[C_out, C_in, K]`, zero padding `pad` on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?} with kernel {:?}", xs, ws),
            ));
        }
        let (n, ci, l) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        if l + 2 * pad < k {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {} longer than padded input {}", k, l + 2 * pad),
            ));
        }
        let lo = l + 2 * pad - k + 1;
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        let mut y = vec![0.0; n * co * lo];
        for b in 0..n {
            for o in 0..co {
                let yrow = &mut y[(b * co + o) * lo..(b * co + o + 1) * lo];
                for c in 0..ci {
                    let xrow = &xv[(b * ci + c) * l..(b * ci + c + 1) * l];
                    let wrow = &wv[(o * ci + c) * k..(o * ci + c + 1) * k];
                    for (t, yt) in yrow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (j, wj) in wrow.iter().enumerate() {
                            let s = t + j;
                            if s < pad || s - pad >= l {
                                continue;
                            }
                            acc += wj * xrow[s - pad];
                        }
                        *yt += acc;
                    }
                }
            }
        }
        Ok(self.record(
            Tensor {
                shape: vec![n, co, lo],
                data: y,
            },
            Op::Conv1d { x, w, pad },
        ))
    }

    /// Group normalization of `[N, C, L]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("group_norm", format!("input {:?}", xs)));
        }
        let (n, c, l) = (xs[0], xs[1], xs[2]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {} groups do not divide {} channels",
                groups, c
            )));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "group_norm",
                format!("affine {:?}/{:?} for {} channels", self.shape(gamma), self.shape(beta), c),
            ));
        }
        let cpg = c / groups;
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; n * groups];
        let mut y = vec![0.0; xv.len()];
        for b in 0..n {
            for grp in 0..groups {
                let start = (b * c + grp * cpg) * l;
                let seg = &xv[start..start + cpg * l];
                let m = seg.len() as f64;
                let mean = seg.iter().sum::<f64>() / m;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let r = 1.0 / (var + NORM_EPS).sqrt();
                rstd[b * groups + grp] = r;
                for (i, v) in seg.iter().enumerate() {
                    let h = (v - mean) * r;
                    let ch = grp * cpg + i / l;
                    xhat[start + i] = h;
                    y[start + i] = h * gv[ch] + bv[ch];
                }
            }
        }
        Ok(self.record(
            Tensor { shape: xs, data: y },
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.broadcast_check("layer_norm", x, gamma)?;
        self.broadcast_check("layer_norm", x, beta)?;
        let xv = &self.value(x).data;
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let seg = &xv[r * d..(r + 1) * d];
            let mean = seg.iter().sum::<f64>() / d as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (seg[j] - mean) * s;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.record(
            Tensor { shape, data: y },
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Non-overlapping average pooling along the last axis (stride = width);
    /// a trailing remainder shorter than the width is dropped.
    pub fn avg_pool1d(&mut self, x: Var, width: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let l = *xs.last().unwrap_or(&0);
        if width == 0 || l < width {
            return Err(Error::shape(
                "avg_pool1d",
                format!("pool width {} over length {}", width, l),
            ));
        }
        let lo = l / width;
        let xv = &self.value(x).data;
        let rows = xv.len() / l;
        let mut y = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            for t in 0..lo {
                let s: f64 = xv[r * l + t * width..r * l + (t + 1) * width].iter().sum();
                y.push(s / width as f64);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = lo;
        Ok(self.record(Tensor { shape, data: y }, Op::AvgPool1d(x, width)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape.last().unwrap_or(&1);
        let mut y = v.data.clone();
        for row in y.chunks_mut(d) {
            softmax_in_place(row);
        }
        let shape = v.shape.clone();
        self.record(Tensor { shape, data: y }, Op::Softmax(x))
    }

    /// Weighted mean cross-entropy of `[M, K]` logits against class targets.
    /// Rows with zero weight do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {:?}, {} targets, {} weights",
                    ls,
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let k = ls[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Lookup {
                what: "cross_entropy classes",
                index: t,
                len: k,
            });
        }
        let mut probs = self.value(logits).data.clone();
        let total: f64 = weights.iter().sum();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(k).enumerate() {
            softmax_in_place(row);
            if weights[r] != 0.0 {
                loss -= weights[r] * row[targets[r]].max(1e-300).ln();
            }
        }
        let loss = if total > 0.0 { loss / total } else { 0.0 };
        Ok(self.record(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", ts)));
        }
        let (v, d) = (ts[0], ts[1]);
        let tv = &self.value(table).data;
        let mut y = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(Error::Lookup {
                    what: "embedding table",
                    index: i,
                    len: v,
                });
            }
            y.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.record(
            Tensor {
                shape: vec![idx.len(), d],
                data: y,
            },
            Op::Embedding {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} of {:?}", axis, first)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", s, first)));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let src = &self.value(v).data[o * len * inner..(o + 1) * len * inner];
                data.extend_from_slice(src);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.record(
            Tensor { shape, data },
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, xs),
            ));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * xs[axis] + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.record(Tensor { shape, data }, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(v, Op::Reshape(x)))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        let valid = perm.len() == xs.len()
            && perm.iter().all(|&p| p < xs.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", format!("{:?} of {:?}", perm, xs)));
        }
        let data = permute_data(&self.value(x).data, &xs, perm);
        let shape = perm.iter().map(|&p| xs[p]).collect();
        Ok(self.record(Tensor { shape, data }, Op::Permute(x, perm.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        self.record(Tensor::scalar(s), Op::Mean(x))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = *v.shape.last().unwrap_or(&1);
        let data = v.data.chunks(d).map(|c| c.iter().sum()).collect();
        let shape = v.shape[..v.shape.len().saturating_sub(1)].to_vec();
        self.record(Tensor { shape, data }, Op::SumLast(x))
    }

    /// Forward value `quantized`, backward identity into `p`.
    pub fn straight_through(&mut self, p: Var, quantized: &Tensor) -> Result<Var> {
        if self.shape(p) != quantized.shape() {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", self.shape(p), quantized.shape()),
            ));
        }
        Ok(self.record(quantized.clone(), Op::StraightThrough(p)))
    }

    /// Replaces rows of `[n, d]` where `mask` is set with `token` (`[d]`).
    pub fn mask_fill(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = self.value(token).len();
        if xs.len() != 2 || xs[1] != d || xs[0] != mask.len() {
            return Err(Error::shape(
                "mask_fill",
                format!("{:?} with token of {} and {} mask bits", xs, d, mask.len()),
            ));
        }
        let mut data = self.value(x).data.clone();
        let tv = &self.value(token).data;
        for (r, &m) in mask.iter().enumerate() {
            if m {
                data[r * d..(r + 1) * d].copy_from_slice(tv);
            }
        }
        Ok(self.record(
            Tensor { shape: xs, data },
            Op::MaskFill {
                x,
                token,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `[B, L, D]` inputs
    /// (already projected). Returns `[B, L, D]` with heads concatenated,
    /// before any output projection.
    ///
    /// `qk_norm` carries per-head layer-norm affine pairs `(gamma, beta)` for
    /// queries and keys; each has length `D / heads`.
    pub fn multihead_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        qk_norm: Option<[(Var, Var); 2]>,
    ) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(Error::shape(
                "multihead_attention",
                format!("q {:?}, k {:?}, v {:?}", qs, self.shape(k), self.shape(v)),
            ));
        }
        let (b, l, d) = (qs[0], qs[1], qs[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {} not divisible by {} heads",
                d, heads
            )));
        }
        let dh = d / heads;
        let split = |tape: &mut Tape, x: Var| -> Result<Var> {
            let x = tape.reshape(x, &[b, l, heads, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * heads, l, dh])
        };
        let mut qh = split(self, q)?;
        let mut kh = split(self, k)?;
        let vh = split(self, v)?;
        if let Some([(gq, bq), (gk, bk)]) = qk_norm {
            qh = self.layer_norm(qh, gq, bq)?;
            kh = self.layer_norm(kh, gk, bk)?;
        }
        let scores = self.bmm(qh, kh, true)?;
        let scores = self.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = self.softmax(scores);
        let out = self.bmm(attn, vh, false)?;
        let out = self.reshape(out, &[b, heads, l, dh])?;
        let out = self.permute(out, &[0, 2, 1, 3])?;
        self.reshape(out, &[b, l, d])
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
