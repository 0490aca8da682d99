//! Reverse-mode autodiff over a linear tape of recorded ops.
//!
//! A `Tape` owns every tensor produced during one forward pass. Ops are
//! recorded only when some input requires a gradient, so inference sessions
//! (all parameters registered as constants) pay nothing for bookkeeping.
//! Reduction order inside every op is a fixed sequential fold, which keeps
//! runs bit-identical for a given seed.

use crate::error::{Error, Result};
use crate::numerics::tensor::{check_2d, matmul, matmul_nt, matmul_tn, Tensor};
use crate::numerics::Scalar;

/// Handle to a tensor on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S: Scalar> {
    /// out = a[m,k] @ b[k,n]
    Matmul { a: Var, b: Var, out: Var, m: usize, k: usize, n: usize },
    /// out = a[m,k] @ b[n,k]^T
    MatmulNt { a: Var, b: Var, out: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var, out: Var },
    /// out[i,:] = x[i,:] + r[:], skipping rows where skip_rows[i] is true.
    AddRow { x: Var, r: Var, out: Var, skip_rows: Option<Vec<bool>> },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, out: Var, c: S },
    Relu { x: Var, out: Var },
    /// Row-wise layernorm with affine params; saves per-row mean and 1/std.
    LayerNorm { x: Var, gain: Var, bias: Var, out: Var, mean: Vec<S>, rstd: Vec<S> },
    /// Row-wise softmax; masked key columns (if any) were set to -inf first.
    Softmax { out: Var, x: Var },
    /// out[t,:] = table[ids[t],:]
    Embed { table: Var, out: Var, ids: Vec<u32>, dim: usize },
    /// Scalar sum of NLL over non-ignored targets; saves softmax probs.
    CrossEntropySum { logits: Var, out: Var, targets: Vec<u32>, ignore: u32, probs: Vec<S> },
    Sum { x: Var, out: Var },
    SliceCols { x: Var, out: Var, start: usize, len: usize, cols: usize },
    ConcatCols { parts: Vec<Var>, out: Var, widths: Vec<usize> },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::MatmulNt { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax { .. } => "softmax",
            Op::Embed { .. } => "embedding_lookup",
            Op::CrossEntropySum { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
        }
    }
}

pub struct Tape<S: Scalar> {
    vals: Vec<Tensor<S>>,
    tracked: Vec<bool>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), tracked: Vec::new(), ops: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.vals[v.0]
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.vals[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.vals[v.0].shape
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Put a tensor on the tape. `tracked` marks leaves that should receive
    /// gradients (trainable parameters).
    pub fn input(&mut self, t: Tensor<S>, tracked: bool) -> Var {
        let id = self.vals.len();
        self.vals.push(t);
        self.tracked.push(tracked);
        Var(id)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.input(t, false)
    }

    fn push(&mut self, t: Tensor<S>, tracked: bool, op: impl FnOnce(Var) -> Op<S>) -> Var {
        let id = self.vals.len();
        self.vals.push(t);
        self.tracked.push(tracked);
        let out = Var(id);
        if tracked {
            self.ops.push(op(out));
        }
        out
    }

    fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_2d("matmul", self.value(a))?;
        check_2d("matmul", self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul(self.data(a), self.data(b), &mut out, m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out), tracked, |o| Op::Matmul { a, b, out: o, m, k, n }))
    }

    /// a[m,k] @ b[n,k]^T; the workhorse for attention scores and the tied
    /// output projection.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        check_2d("matmul_nt", self.value(a))?;
        check_2d("matmul_nt", self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (n, k2) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt(self.data(a), self.data(b), &mut out, m, k, n);
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(Tensor::new(vec![m, n], out), tracked, |o| Op::MatmulNt { a, b, out: o, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(Tensor::new(shape, data), tracked, |o| Op::Add { a, b, out: o }))
    }

    /// Broadcast-add a length-d row vector onto each row of x[n,d].
    /// Rows flagged in `skip_rows` are copied through untouched.
    pub fn add_row(&mut self, x: Var, r: Var, skip_rows: Option<&[bool]>) -> Result<Var> {
        check_2d("add_row", self.value(x))?;
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(r) != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(r).to_vec(),
            });
        }
        if let Some(sk) = skip_rows {
            if sk.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "add_row",
                    lhs: vec![n],
                    rhs: vec![sk.len()],
                });
            }
        }
        let mut data = self.data(x).to_vec();
        for i in 0..n {
            if skip_rows.map_or(false, |sk| sk[i]) {
                continue;
            }
            for j in 0..d {
                data[i * d + j] = data[i * d + j] + self.data(r)[j];
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(r);
        let skip = skip_rows.map(|s| s.to_vec());
        Ok(self.push(Tensor::new(vec![n, d], data), tracked, |o| Op::AddRow {
            x,
            r,
            out: o,
            skip_rows: skip,
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.is_tracked(a) || self.is_tracked(b);
        Ok(self.push(Tensor::new(shape, data), tracked, |o| Op::Mul { a, b, out: o }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let data: Vec<S> = self.data(x).iter().map(|v| *v * c).collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.is_tracked(x);
        self.push(Tensor::new(shape, data), tracked, |o| Op::Scale { x, out: o, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<S> = self
            .data(x)
            .iter()
            .map(|v| if *v > S::zero() { *v } else { S::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let tracked = self.is_tracked(x);
        self.push(Tensor::new(shape, data), tracked, |o| Op::Relu { x, out: o })
    }

    /// Row-wise layernorm over the last dim of x[n,d] with affine gain/bias.
    /// A constant row normalizes to zeros (epsilon guards the variance), so
    /// the output row equals `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        check_2d("layernorm", self.value(x))?;
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = S::from_f64(1e-5);
        let mut data = vec![S::zero(); n * d];
        let mut means = vec![S::zero(); n];
        let mut rstds = vec![S::zero(); n];
        let dd = S::from_f64(d as f64);
        for i in 0..n {
            let row = &self.data(x)[i * d..(i + 1) * d];
            let mut mean = S::zero();
            for v in row {
                mean += *v;
            }
            mean = mean / dd;
            let mut var = S::zero();
            for v in row {
                let c = *v - mean;
                var += c * c;
            }
            var = var / dd;
            let rstd = S::one() / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..d {
                let norm = (row[j] - mean) * rstd;
                data[i * d + j] = norm * self.data(gain)[j] + self.data(bias)[j];
            }
        }
        let tracked = self.is_tracked(x) || self.is_tracked(gain) || self.is_tracked(bias);
        Ok(self.push(Tensor::new(vec![n, d], data), tracked, |o| Op::LayerNorm {
            x,
            gain,
            bias,
            out: o,
            mean: means,
            rstd: rstds,
        }))
    }

    /// Row-wise softmax of x[n,d]. `masked_cols`, when given, marks key
    /// columns per row that must receive zero probability (pad or future
    /// positions); it is an n*d flat mask.
    pub fn softmax(&mut self, x: Var, masked_cols: Option<&[bool]>) -> Result<Var> {
        check_2d("softmax", self.value(x))?;
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        if let Some(m) = masked_cols {
            if m.len() != n * d {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: vec![n, d],
                    rhs: vec![m.len()],
                });
            }
        }
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            let row = &self.data(x)[i * d..(i + 1) * d];
            let mut max = S::neg_infinity();
            for j in 0..d {
                let masked = masked_cols.map_or(false, |m| m[i * d + j]);
                if !masked && row[j] > max {
                    max = row[j];
                }
            }
            // All-masked row would renormalize garbage; callers prevent it.
            debug_assert!(max > S::neg_infinity(), "softmax row fully masked");
            let mut denom = 0.0f64;
            for j in 0..d {
                let masked = masked_cols.map_or(false, |m| m[i * d + j]);
                if !masked {
                    denom += (row[j] - max).to_f64().exp();
                }
            }
            for j in 0..d {
                let masked = masked_cols.map_or(false, |m| m[i * d + j]);
                data[i * d + j] = if masked {
                    S::zero()
                } else {
                    S::from_f64((row[j] - max).to_f64().exp() / denom)
                };
            }
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(Tensor::new(vec![n, d], data), tracked, |o| Op::Softmax { out: o, x }))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        check_2d("embedding_lookup", self.value(table))?;
        let (vocab, dim) = (self.shape(table)[0], self.shape(table)[1]);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
        }
        let mut data = vec![S::zero(); ids.len() * dim];
        for (t, &id) in ids.iter().enumerate() {
            let src = &self.data(table)[id as usize * dim..(id as usize + 1) * dim];
            data[t * dim..(t + 1) * dim].copy_from_slice(src);
        }
        let tracked = self.is_tracked(table);
        let ids = ids.to_vec();
        Ok(self.push(Tensor::new(vec![ids.len(), dim], data), tracked, |o| Op::Embed {
            table,
            out: o,
            ids,
            dim,
        }))
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `ignore`. Accumulates in f64. Returns the scalar loss var.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let (sum, count) = self.cross_entropy_sum(logits, targets, ignore)?;
        let inv = S::from_f64(1.0 / count.max(1) as f64);
        Ok(self.scale(sum, inv))
    }

    /// Sum (not mean) of NLL over non-ignored positions, plus the position
    /// count. Trainers use this to form batch means with a single division.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[u32],
        ignore: u32,
    ) -> Result<(Var, usize)> {
        check_2d("cross_entropy", self.value(logits))?;
        let (n, v) = (self.shape(logits)[0], self.shape(logits)[1]);
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t != ignore && t as usize >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
        }
        let mut probs = vec![S::zero(); n * v];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for i in 0..n {
            if targets[i] == ignore {
                continue;
            }
            let row = &self.data(logits)[i * v..(i + 1) * v];
            let mut max = S::neg_infinity();
            for x in row {
                if *x > max {
                    max = *x;
                }
            }
            let mut denom = 0.0f64;
            for j in 0..v {
                denom += (row[j] - max).to_f64().exp();
            }
            for j in 0..v {
                probs[i * v + j] = S::from_f64((row[j] - max).to_f64().exp() / denom);
            }
            let logp = (row[targets[i] as usize] - max).to_f64() - denom.ln();
            total -= logp;
            count += 1;
        }
        if !total.is_finite() {
            let index = self.ops.len();
            return Err(Error::NonFinite {
                op: "cross_entropy",
                index,
                trace: self.op_trace(),
            });
        }
        let tracked = self.is_tracked(logits);
        let targets = targets.to_vec();
        let out = self.push(
            Tensor::new(vec![1], vec![S::from_f64(total)]),
            tracked,
            |o| Op::CrossEntropySum { logits, out: o, targets, ignore, probs },
        );
        Ok((out, count))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = 0.0f64;
        for v in self.data(x) {
            acc += v.to_f64();
        }
        let tracked = self.is_tracked(x);
        self.push(Tensor::new(vec![1], vec![S::from_f64(acc)]), tracked, |o| Op::Sum { x, out: o })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        check_2d("slice_cols", self.value(x))?;
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        if start + len > d {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![n, d],
                rhs: vec![start, len],
            });
        }
        let mut data = vec![S::zero(); n * len];
        for i in 0..n {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.data(x)[i * d + start..i * d + start + len]);
        }
        let tracked = self.is_tracked(x);
        Ok(self.push(Tensor::new(vec![n, len], data), tracked, |o| Op::SliceCols {
            x,
            out: o,
            start,
            len,
            cols: d,
        }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            check_2d("concat_cols", self.value(p))?;
            if self.shape(p)[0] != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![n],
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(self.shape(p)[1]);
        }
        let d: usize = widths.iter().sum();
        let mut data = vec![S::zero(); n * d];
        for i in 0..n {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                data[i * d + off..i * d + off + w]
                    .copy_from_slice(&self.data(p)[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let tracked = parts.iter().any(|&p| self.is_tracked(p));
        let parts = parts.to_vec();
        Ok(self.push(Tensor::new(vec![n, d], data), tracked, |o| Op::ConcatCols {
            parts,
            out: o,
            widths,
        }))
    }

    fn op_trace(&self) -> String {
        let names: Vec<&str> = self
            .ops
            .iter()
            .rev()
            .take(8)
            .map(|o| o.name())
            .collect();
        names.join(" <- ")
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-var gradients; untracked
    /// vars (frozen parameters, constants) have no entry.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.vals.len()];
        grads[loss.0] = Some(vec![S::one()]);

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], v: Var, delta: &[S]) {
        if !self.tracked[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op<S>, grads: &mut [Option<Vec<S>>]) {
        match op {
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.tracked[a.0] {
                    // dA = dOut @ B^T
                    let mut d_a = vec![S::zero(); m * k];
                    matmul_nt(&d_out, self.data(*b), &mut d_a, *m, *n, *k);
                    self.accum(grads, *a, &d_a);
                }
                if self.tracked[b.0] {
                    // dB = A^T @ dOut
                    let mut d_b = vec![S::zero(); k * n];
                    matmul_tn(self.data(*a), &d_out, &mut d_b, *k, *m, *n);
                    self.accum(grads, *b, &d_b);
                }
            }
            Op::MatmulNt { a, b, out, m, k, n } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.tracked[a.0] {
                    // dA = dOut @ B
                    let mut d_a = vec![S::zero(); m * k];
                    matmul(&d_out, self.data(*b), &mut d_a, *m, *n, *k);
                    self.accum(grads, *a, &d_a);
                }
                if self.tracked[b.0] {
                    // dB = dOut^T @ A
                    let mut d_b = vec![S::zero(); n * k];
                    matmul_tn(&d_out, self.data(*a), &mut d_b, *n, *m, *k);
                    self.accum(grads, *b, &d_b);
                }
            }
            Op::Add { a, b, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                self.accum(grads, *a, &d_out);
                self.accum(grads, *b, &d_out);
            }
            Op::AddRow { x, r, out, skip_rows } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                self.accum(grads, *x, &d_out);
                if self.tracked[r.0] {
                    let d = self.shape(*r)[0];
                    let n = self.shape(*x)[0];
                    let mut d_r = vec![S::zero(); d];
                    for i in 0..n {
                        if skip_rows.as_ref().map_or(false, |sk| sk[i]) {
                            continue;
                        }
                        for j in 0..d {
                            d_r[j] += d_out[i * d + j];
                        }
                    }
                    self.accum(grads, *r, &d_r);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.tracked[a.0] {
                    let d_a: Vec<S> = d_out
                        .iter()
                        .zip(self.data(*b))
                        .map(|(d, y)| *d * *y)
                        .collect();
                    self.accum(grads, *a, &d_a);
                }
                if self.tracked[b.0] {
                    let d_b: Vec<S> = d_out
                        .iter()
                        .zip(self.data(*a))
                        .map(|(d, x)| *d * *x)
                        .collect();
                    self.accum(grads, *b, &d_b);
                }
            }
            Op::Scale { x, out, c } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_x: Vec<S> = d_out.iter().map(|d| *d * *c).collect();
                self.accum(grads, *x, &d_x);
            }
            Op::Relu { x, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_x: Vec<S> = d_out
                    .iter()
                    .zip(self.data(*x))
                    .map(|(d, v)| if *v > S::zero() { *d } else { S::zero() })
                    .collect();
                self.accum(grads, *x, &d_x);
            }
            Op::LayerNorm { x, gain, bias, out, mean, rstd } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dd = S::from_f64(d as f64);
                let g = self.data(*gain);
                if self.tracked[bias.0] {
                    let mut d_b = vec![S::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            d_b[j] += d_out[i * d + j];
                        }
                    }
                    self.accum(grads, *bias, &d_b);
                }
                if self.tracked[gain.0] {
                    let mut d_g = vec![S::zero(); d];
                    for i in 0..n {
                        for j in 0..d {
                            let norm = (self.data(*x)[i * d + j] - mean[i]) * rstd[i];
                            d_g[j] += d_out[i * d + j] * norm;
                        }
                    }
                    self.accum(grads, *gain, &d_g);
                }
                if self.tracked[x.0] {
                    let mut d_x = vec![S::zero(); n * d];
                    for i in 0..n {
                        // dxhat = d_out * gain; dx = rstd*(dxhat - mean(dxhat)
                        //        - xhat * mean(dxhat*xhat))
                        let mut sum_dxh = S::zero();
                        let mut sum_dxh_xh = S::zero();
                        for j in 0..d {
                            let xh = (self.data(*x)[i * d + j] - mean[i]) * rstd[i];
                            let dxh = d_out[i * d + j] * g[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let m1 = sum_dxh / dd;
                        let m2 = sum_dxh_xh / dd;
                        for j in 0..d {
                            let xh = (self.data(*x)[i * d + j] - mean[i]) * rstd[i];
                            let dxh = d_out[i * d + j] * g[j];
                            d_x[i * d + j] = rstd[i] * (dxh - m1 - xh * m2);
                        }
                    }
                    self.accum(grads, *x, &d_x);
                }
            }
            Op::Softmax { out, x } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let (n, d) = (self.shape(*out)[0], self.shape(*out)[1]);
                let y = self.data(*out);
                let mut d_x = vec![S::zero(); n * d];
                for i in 0..n {
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot += d_out[i * d + j] * y[i * d + j];
                    }
                    for j in 0..d {
                        d_x[i * d + j] = y[i * d + j] * (d_out[i * d + j] - dot);
                    }
                }
                self.accum(grads, *x, &d_x);
            }
            Op::Embed { table, out, ids, dim } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                if self.tracked[table.0] {
                    let vocab = self.shape(*table)[0];
                    let mut d_t = vec![S::zero(); vocab * dim];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..*dim {
                            d_t[id as usize * dim + j] += d_out[t * dim + j];
                        }
                    }
                    self.accum(grads, *table, &d_t);
                }
            }
            Op::CrossEntropySum { logits, out, targets, ignore, probs } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let scale = d_out[0];
                let (n, v) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let mut d_l = vec![S::zero(); n * v];
                for i in 0..n {
                    if targets[i] == *ignore {
                        continue;
                    }
                    for j in 0..v {
                        d_l[i * v + j] = probs[i * v + j] * scale;
                    }
                    d_l[i * v + targets[i] as usize] -= scale;
                }
                self.accum(grads, *logits, &d_l);
            }
            Op::Sum { x, out } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let d_x = vec![d_out[0]; self.value(*x).numel()];
                self.accum(grads, *x, &d_x);
            }
            Op::SliceCols { x, out, start, len, cols } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let n = self.shape(*x)[0];
                let mut d_x = vec![S::zero(); n * cols];
                for i in 0..n {
                    for j in 0..*len {
                        d_x[i * cols + start + j] = d_out[i * len + j];
                    }
                }
                self.accum(grads, *x, &d_x);
            }
            Op::ConcatCols { parts, out, widths } => {
                let Some(d_out) = grads[out.0].clone() else { return };
                let n = self.shape(*out)[0];
                let d: usize = widths.iter().sum();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.tracked[p.0] {
                        let mut d_p = vec![S::zero(); n * w];
                        for i in 0..n {
                            d_p[i * w..(i + 1) * w]
                                .copy_from_slice(&d_out[i * d + off..i * d + off + w]);
                        }
                        self.accum(grads, p, &d_p);
                    }
                    off += w;
                }
            }
        }
    }
}

/// Gradient store produced by one backward sweep.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, None).unwrap();
        for v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 4], vec![0.3, -1.2, 5.0, 0.0, 9.0, 9.0, 9.0, 8.0]));
        let y = tape.softmax(x, None).unwrap();
        for i in 0..2 {
            let s: f64 = tape.data(y)[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 3], vec![10.0, 0.0, 0.0]));
        let mask = vec![true, false, false];
        let y = tape.softmax(x, Some(&mask)).unwrap();
        assert_eq!(tape.data(y)[0], 0.0);
        let s: f64 = tape.data(y).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_constant_row_outputs_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 4], vec![3.0, 3.0, 3.0, 3.0]));
        let g = tape.constant(t(vec![4], vec![2.0, 2.0, 2.0, 2.0]));
        let b = tape.constant(t(vec![4], vec![0.5, -0.5, 0.0, 1.0]));
        let y = tape.layernorm(x, g, b).unwrap();
        assert_eq!(tape.data(y), &[0.5, -0.5, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_matching_onehot_with_margin_20_is_tiny() {
        let mut tape = Tape::new();
        // logits margin of 20 in favor of the target.
        let x = tape.constant(t(vec![1, 3], vec![20.0, 0.0, 0.0]));
        let loss = tape.cross_entropy(x, &[0], u32::MAX).unwrap();
        assert!(tape.data(loss)[0] < 1e-6);
    }

    #[test]
    fn cross_entropy_ignores_pad_positions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 2], vec![0.0, 0.0, 100.0, -100.0]));
        // Second position is pad: its (terrible) logits must not count.
        let loss = tape.cross_entropy(x, &[0, 9], 9).unwrap();
        let expected = -(0.5f64.ln());
        assert!((tape.data(loss)[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![2], vec![1.0, 2.0]).with_grad(true), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![2], vec![1.0, 2.0]), true);
        let w = tape.constant(t(vec![2], vec![3.0, 4.0]));
        let y = tape.mul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut tape = Tape::new();
        let x = tape.input(t(vec![2], vec![1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![2, 3], vec![0.0; 6]));
        let b = tape.constant(t(vec![2, 3], vec![0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn untracked_graph_records_no_ops() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        let _ = tape.relu(c);
        assert_eq!(tape.num_ops(), 0);
    }
}
