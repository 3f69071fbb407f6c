//! Wengert tape: reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order during the forward pass and
//! replayed in reverse by [`Tape::backward`]. The op set is exactly what the
//! pruning pipeline needs — no broadcasting zoo, no higher-order gradients.
//!
//! Numeric contract: every op output is checked finite; all arithmetic is
//! f64 with fixed summation order, so repeated runs are bitwise identical.

use crate::error::{PitError, Result};
use crate::tensor::{numel, Tensor};
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on one specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Abs(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    /// `[r,k] x [k,c] -> [r,c]`
    MatMul(Var, Var),
    /// `[r,k] x [k] -> [r]`
    MatVec(Var, Var),
    /// `[l,p] -> [p]`: product of each column's entries.
    ColumnProduct(Var),
    /// `[n] -> [rows,n]`: every row is the input vector.
    BroadcastRows(Var, usize),
    /// `[n] -> [n,cols]`: every column is the input vector.
    BroadcastCols(Var, usize),
    Reshape(Var),
    /// `[c,t] -> [c]`: mean over the time axis.
    AvgPoolTime(Var),
    /// Step at `delta` forward; identity backward (straight-through).
    HeavisideSte(Var),
    /// Causal 1-D convolution; x `[c_in,t]`, w `[c_out,c_in,k]`, bias `[c_out]`.
    Conv1dCausal { x: Var, w: Var, bias: Var, dilation: usize },
    /// Mean-reduced binary cross-entropy on logits.
    BceWithLogits { logits: Var, targets: Var },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::ScalarMul(..) => "scalar_mul",
        Op::Abs(..) => "abs",
        Op::Relu(..) => "relu",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MatMul(..) => "matmul",
        Op::MatVec(..) => "matvec",
        Op::ColumnProduct(..) => "column_product",
        Op::BroadcastRows(..) => "broadcast_rows",
        Op::BroadcastCols(..) => "broadcast_cols",
        Op::Reshape(..) => "reshape",
        Op::AvgPoolTime(..) => "avg_pool_time",
        Op::HeavisideSte(..) => "heaviside_ste",
        Op::Conv1dCausal { .. } => "conv1d_causal",
        Op::BceWithLogits { .. } => "bce_with_logits",
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    /// When set, `heaviside_ste` forwards its input unchanged. Used by the
    /// finite-difference checker to probe the straight-through surrogate.
    ste_identity: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            ste_identity: false,
        }
    }

    /// Tape on which step functions evaluate as identity (surrogate mode).
    pub fn new_ste_identity() -> Self {
        let mut t = Tape::new();
        t.ste_identity = true;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(PitError::TapeMismatch);
        }
        debug_assert!(v.idx < self.nodes.len());
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        self.grads.push(None);
        Var { tape: self.id, idx: self.nodes.len() - 1 }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.idx].value
    }

    /// Gradient of `v` after [`Tape::backward`], shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        debug_assert_eq!(v.tape, self.id);
        self.grads[v.idx].as_ref().map(|g| {
            Tensor::new(self.nodes[v.idx].value.shape().to_vec(), g.clone())
                .expect("grad buffer matches value shape")
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(PitError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(PitError::ShapeMismatch {
                context,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> =
            va.data().iter().zip(vb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        self.push(value, op, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_var(a)?;
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| c * x).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.requires(a);
        self.push(value, Op::ScalarMul(a, c), req)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| x.abs()).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.requires(a);
        self.push(value, Op::Abs(a), req)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.requires(a);
        self.push(value, Op::Relu(a), req)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let s: f64 = self.value(a).data().iter().sum();
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let va = self.value(a);
        if va.is_empty() {
            return Err(PitError::invalid("mean of an empty tensor"));
        }
        let s: f64 = va.data().iter().sum::<f64>() / va.len() as f64;
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::Mean(a), req)
    }

    /// Matrix product `[r,k] x [k,c] -> [r,c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(PitError::ShapeMismatch {
                context: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let (da, db) = (va.data(), vb.data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for kk in 0..k {
                let aik = da[i * k + kk];
                for j in 0..c {
                    out[i * c + j] += aik * db[kk * c + j];
                }
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMul(a, b), req)
    }

    /// Matrix-vector product `[r,k] x [k] -> [r]`.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(v)?;
        let (va, vv) = (self.value(a), self.value(v));
        let (sa, sv) = (va.shape(), vv.shape());
        if sa.len() != 2 || sv.len() != 1 || sa[1] != sv[0] {
            return Err(PitError::ShapeMismatch {
                context: "matvec",
                left: sa.to_vec(),
                right: sv.to_vec(),
            });
        }
        let (r, k) = (sa[0], sa[1]);
        let (da, dv) = (va.data(), vv.data());
        let mut out = vec![0.0; r];
        for i in 0..r {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += da[i * k + kk] * dv[kk];
            }
            out[i] = acc;
        }
        let value = Tensor::vector(out);
        let req = self.requires(a) || self.requires(v);
        self.push(value, Op::MatVec(a, v), req)
    }

    /// Reduce an `[l,p]` matrix to a length-`p` vector by multiplying the
    /// entries of each column.
    pub fn column_product(&mut self, m: Var) -> Result<Var> {
        self.check_var(m)?;
        let vm = self.value(m);
        let sm = vm.shape();
        if sm.len() != 2 {
            return Err(PitError::ShapeMismatch {
                context: "column_product",
                left: sm.to_vec(),
                right: vec![],
            });
        }
        let (l, p) = (sm[0], sm[1]);
        let dm = vm.data();
        let mut out = vec![1.0; p];
        for i in 0..l {
            for j in 0..p {
                out[j] *= dm[i * p + j];
            }
        }
        let value = Tensor::vector(out);
        let req = self.requires(m);
        self.push(value, Op::ColumnProduct(m), req)
    }

    /// Tile a length-`n` vector into a `[rows,n]` matrix.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        self.check_var(v)?;
        let vv = self.value(v);
        if vv.ndim() != 1 {
            return Err(PitError::ShapeMismatch {
                context: "broadcast_rows",
                left: vv.shape().to_vec(),
                right: vec![0],
            });
        }
        let n = vv.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(vv.data());
        }
        let value = Tensor::new(vec![rows, n], out)?;
        let req = self.requires(v);
        self.push(value, Op::BroadcastRows(v, rows), req)
    }

    /// Tile a length-`n` vector into an `[n,cols]` matrix (entry `(j,c) = v[j]`).
    pub fn broadcast_cols(&mut self, v: Var, cols: usize) -> Result<Var> {
        self.check_var(v)?;
        let vv = self.value(v);
        if vv.ndim() != 1 {
            return Err(PitError::ShapeMismatch {
                context: "broadcast_cols",
                left: vv.shape().to_vec(),
                right: vec![0],
            });
        }
        let n = vv.len();
        let mut out = Vec::with_capacity(n * cols);
        for j in 0..n {
            for _ in 0..cols {
                out.push(vv.data()[j]);
            }
        }
        let value = Tensor::new(vec![n, cols], out)?;
        let req = self.requires(v);
        self.push(value, Op::BroadcastCols(v, cols), req)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_var(a)?;
        let va = self.value(a);
        if numel(&shape) != va.len() {
            return Err(PitError::ShapeMismatch {
                context: "reshape",
                left: va.shape().to_vec(),
                right: shape,
            });
        }
        let value = Tensor::new(shape, va.data().to_vec())?;
        let req = self.requires(a);
        self.push(value, Op::Reshape(a), req)
    }

    /// Mean over the time axis: `[c,t] -> [c]`.
    pub fn avg_pool_time(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let vx = self.value(x);
        let sx = vx.shape();
        if sx.len() != 2 || sx[1] == 0 {
            return Err(PitError::ShapeMismatch {
                context: "avg_pool_time",
                left: sx.to_vec(),
                right: vec![],
            });
        }
        let (c, t) = (sx[0], sx[1]);
        let dx = vx.data();
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for tt in 0..t {
                acc += dx[ch * t + tt];
            }
            out[ch] = acc / t as f64;
        }
        let value = Tensor::vector(out);
        let req = self.requires(x);
        self.push(value, Op::AvgPoolTime(x), req)
    }

    /// Binarize at threshold `delta`: 1 where `x >= delta`, else 0. The
    /// backward pass passes gradients through unchanged (straight-through).
    pub fn heaviside_ste(&mut self, g: Var, delta: f64) -> Result<Var> {
        self.check_var(g)?;
        if !(0.0..1.0).contains(&delta) || delta <= 0.0 {
            return Err(PitError::invalid(format!("delta must be in (0,1), got {delta}")));
        }
        let vg = self.value(g);
        let data: Vec<f64> = if self.ste_identity {
            vg.data().to_vec()
        } else {
            vg.data().iter().map(|&x| if x >= delta { 1.0 } else { 0.0 }).collect()
        };
        let value = Tensor::new(vg.shape().to_vec(), data)?;
        let req = self.requires(g);
        self.push(value, Op::HeavisideSte(g), req)
    }

    /// Causal dilated 1-D convolution.
    ///
    /// `y[m][t] = bias[m] + sum_i sum_l x[l][t - d*i] * w[m][l][i]` with x at
    /// negative time treated as zero (left padding of `(k-1)*d` samples, so
    /// the output has the input's length). Summation order is fixed: taps
    /// outer, channels inner.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, bias: Var, dilation: usize) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(w)?;
        self.check_var(bias)?;
        if dilation < 1 {
            return Err(PitError::invalid("conv1d_causal: dilation must be >= 1"));
        }
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(bias));
        let (sx, sw, sb) = (vx.shape(), vw.shape(), vb.shape());
        if sx.len() != 2 || sw.len() != 3 {
            return Err(PitError::ShapeMismatch {
                context: "conv1d_causal",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let (c_in, t_len) = (sx[0], sx[1]);
        let (c_out, w_cin, k) = (sw[0], sw[1], sw[2]);
        if w_cin != c_in {
            return Err(PitError::ChannelMismatch { input: c_in, expected: w_cin });
        }
        if k < 1 {
            return Err(PitError::invalid("conv1d_causal: kernel must have >= 1 tap"));
        }
        if sb != [c_out] {
            return Err(PitError::ShapeMismatch {
                context: "conv1d_causal bias",
                left: sb.to_vec(),
                right: vec![c_out],
            });
        }
        let (dx, dw, db) = (vx.data(), vw.data(), vb.data());
        let mut out = vec![0.0; c_out * t_len];
        for m in 0..c_out {
            for t in 0..t_len {
                let mut acc = db[m];
                for i in 0..k {
                    let lag = i * dilation;
                    if lag > t {
                        continue;
                    }
                    let src = t - lag;
                    for l in 0..c_in {
                        acc += dx[l * t_len + src] * dw[m * c_in * k + l * k + i];
                    }
                }
                out[m * t_len + t] = acc;
            }
        }
        let value = Tensor::new(vec![c_out, t_len], out)?;
        let req = self.requires(x) || self.requires(w) || self.requires(bias);
        self.push(value, Op::Conv1dCausal { x, w, bias, dilation }, req)
    }

    /// Mean-reduced binary cross-entropy over logits, computed in the
    /// numerically stable form `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.check_var(logits)?;
        self.check_var(targets)?;
        let (vz, vy) = (self.value(logits), self.value(targets));
        if vz.shape() != vy.shape() {
            return Err(PitError::ShapeMismatch {
                context: "bce_with_logits",
                left: vz.shape().to_vec(),
                right: vy.shape().to_vec(),
            });
        }
        if vz.is_empty() {
            return Err(PitError::invalid("bce_with_logits on an empty tensor"));
        }
        let mut acc = 0.0;
        for (&z, &y) in vz.data().iter().zip(vy.data().iter()) {
            acc += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(acc / vz.len() as f64);
        let req = self.requires(logits) || self.requires(targets);
        self.push(value, Op::BceWithLogits { logits, targets }, req)
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.idx].requires_grad {
            return;
        }
        let buf = self.grads[v.idx]
            .get_or_insert_with(|| vec![0.0; self.nodes[v.idx].value.len()]);
        for (g, d) in buf.iter_mut().zip(delta.iter()) {
            *g += d;
        }
    }

    /// Reverse pass from a scalar loss. Populates gradients on every
    /// requires-grad leaf (zeros where no gradient flowed) and consumes the
    /// tape: a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        if self.consumed {
            return Err(PitError::TapeConsumed);
        }
        let lshape = self.nodes[loss.idx].value.shape().to_vec();
        if !lshape.is_empty() {
            return Err(PitError::NonScalarLoss(lshape));
        }
        self.consumed = true;
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(vec![0.0; self.nodes[i].value.len()]);
            }
        }
        if self.nodes[loss.idx].requires_grad {
            self.grads[loss.idx]
                .get_or_insert_with(|| vec![0.0; 1])[0] += 1.0;
        }
        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let g = self.grads[i].clone().expect("checked above");
            self.backward_op(&op, &g)?;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.requires(a) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(b).data().iter())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(a, &d);
                }
                if self.requires(b) {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data().iter())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.accumulate(b, &d);
                }
            }
            Op::ScalarMul(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.accumulate(a, &d);
            }
            Op::Abs(a) => {
                // Subgradient at 0 is 0.
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data().iter())
                    .map(|(gi, &x)| {
                        if x > 0.0 {
                            *gi
                        } else if x < 0.0 {
                            -*gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(a, &d);
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data().iter())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(a).len()];
                self.accumulate(a, &d);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                let d = vec![g[0] / n as f64; n];
                self.accumulate(a, &d);
            }
            Op::MatMul(a, b) => {
                let sa = self.value(a).shape().to_vec();
                let sb = self.value(b).shape().to_vec();
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if self.requires(a) {
                    let db = self.value(b).data();
                    let mut d = vec![0.0; r * k];
                    for i in 0..r {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g[i * c + j] * db[kk * c + j];
                            }
                            d[i * k + kk] = acc;
                        }
                    }
                    self.accumulate(a, &d);
                }
                if self.requires(b) {
                    let da = self.value(a).data();
                    let mut d = vec![0.0; k * c];
                    for kk in 0..k {
                        for j in 0..c {
                            let mut acc = 0.0;
                            for i in 0..r {
                                acc += da[i * k + kk] * g[i * c + j];
                            }
                            d[kk * c + j] = acc;
                        }
                    }
                    self.accumulate(b, &d);
                }
            }
            Op::MatVec(a, v) => {
                let sa = self.value(a).shape().to_vec();
                let (r, k) = (sa[0], sa[1]);
                if self.requires(a) {
                    let dv = self.value(v).data();
                    let mut d = vec![0.0; r * k];
                    for i in 0..r {
                        for kk in 0..k {
                            d[i * k + kk] = g[i] * dv[kk];
                        }
                    }
                    self.accumulate(a, &d);
                }
                if self.requires(v) {
                    let da = self.value(a).data();
                    let mut d = vec![0.0; k];
                    for kk in 0..k {
                        let mut acc = 0.0;
                        for i in 0..r {
                            acc += da[i * k + kk] * g[i];
                        }
                        d[kk] = acc;
                    }
                    self.accumulate(v, &d);
                }
            }
            Op::ColumnProduct(m) => {
                // d/dM[i,j] = g[j] * prod of the other entries of column j,
                // via prefix/suffix products so zeros are handled exactly.
                let vm = self.value(m);
                let sm = vm.shape().to_vec();
                let (l, p) = (sm[0], sm[1]);
                let dm = vm.data();
                let mut d = vec![0.0; l * p];
                let mut prefix = vec![1.0; l + 1];
                let mut suffix = vec![1.0; l + 1];
                for j in 0..p {
                    for i in 0..l {
                        prefix[i + 1] = prefix[i] * dm[i * p + j];
                    }
                    suffix[l] = 1.0;
                    for i in (0..l).rev() {
                        suffix[i] = suffix[i + 1] * dm[i * p + j];
                    }
                    for i in 0..l {
                        d[i * p + j] = g[j] * prefix[i] * suffix[i + 1];
                    }
                }
                self.accumulate(m, &d);
            }
            Op::BroadcastRows(v, rows) => {
                let n = self.value(v).len();
                let mut d = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        d[j] += g[r * n + j];
                    }
                }
                self.accumulate(v, &d);
            }
            Op::BroadcastCols(v, cols) => {
                let n = self.value(v).len();
                let mut d = vec![0.0; n];
                for j in 0..n {
                    for c in 0..cols {
                        d[j] += g[j * cols + c];
                    }
                }
                self.accumulate(v, &d);
            }
            Op::Reshape(a) => {
                self.accumulate(a, g);
            }
            Op::AvgPoolTime(x) => {
                let sx = self.value(x).shape().to_vec();
                let (c, t) = (sx[0], sx[1]);
                let mut d = vec![0.0; c * t];
                for ch in 0..c {
                    let gi = g[ch] / t as f64;
                    for tt in 0..t {
                        d[ch * t + tt] = gi;
                    }
                }
                self.accumulate(x, &d);
            }
            Op::HeavisideSte(a) => {
                // Straight-through: identity surrogate.
                self.accumulate(a, g);
            }
            Op::Conv1dCausal { x, w, bias, dilation } => {
                let sx = self.value(x).shape().to_vec();
                let sw = self.value(w).shape().to_vec();
                let (c_in, t_len) = (sx[0], sx[1]);
                let (c_out, k) = (sw[0], sw[2]);
                if self.requires(x) {
                    let dw = self.value(w).data();
                    let mut d = vec![0.0; c_in * t_len];
                    for m in 0..c_out {
                        for t in 0..t_len {
                            let gmt = g[m * t_len + t];
                            for i in 0..k {
                                let lag = i * dilation;
                                if lag > t {
                                    continue;
                                }
                                let src = t - lag;
                                for l in 0..c_in {
                                    d[l * t_len + src] += gmt * dw[m * c_in * k + l * k + i];
                                }
                            }
                        }
                    }
                    self.accumulate(x, &d);
                }
                if self.requires(w) {
                    let dx = self.value(x).data();
                    let mut d = vec![0.0; c_out * c_in * k];
                    for m in 0..c_out {
                        for t in 0..t_len {
                            let gmt = g[m * t_len + t];
                            for i in 0..k {
                                let lag = i * dilation;
                                if lag > t {
                                    continue;
                                }
                                let src = t - lag;
                                for l in 0..c_in {
                                    d[m * c_in * k + l * k + i] += gmt * dx[l * t_len + src];
                                }
                            }
                        }
                    }
                    self.accumulate(w, &d);
                }
                if self.requires(bias) {
                    let mut d = vec![0.0; c_out];
                    for m in 0..c_out {
                        let mut acc = 0.0;
                        for t in 0..t_len {
                            acc += g[m * t_len + t];
                        }
                        d[m] = acc;
                    }
                    self.accumulate(bias, &d);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let n = self.value(logits).len() as f64;
                if self.requires(logits) {
                    let vz = self.value(logits).data();
                    let vy = self.value(targets).data();
                    let d: Vec<f64> = vz
                        .iter()
                        .zip(vy.iter())
                        .map(|(&z, &y)| {
                            let sig = 1.0 / (1.0 + (-z).exp());
                            g[0] * (sig - y) / n
                        })
                        .collect();
                    self.accumulate(logits, &d);
                }
                // Targets are data, not parameters; no gradient defined.
            }
        }
        Ok(())
    }
}
