//! Reverse-mode automatic differentiation over a flat tape.
//!
//! The op set is exactly what the noise model needs: dense projections over
//! the last axis, broadcast additions, a fused per-slice attention core,
//! element-wise nonlinearities and reductions. Gradients are exact; the
//! finite-difference suite in the tests is the contract.

use rayon::prelude::*;

use crate::error::{NdpError, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, T),
    /// `x[..., C] . w[C, P]`
    Proj { x: usize, w: usize },
    /// `x[..., C] + b[C]`
    AddBias { x: usize, b: usize },
    /// `x[B, ..., H] + v[B, H]` broadcast over the middle axes
    AddBatchVec { x: usize, v: usize },
    ConcatLast(Vec<usize>),
    Gelu(usize),
    Abs(usize),
    Square(usize),
    /// `[B, N, D, H] -> [B, N, 1, H]`
    SumAxis2(usize),
    SumAll(usize),
    /// `[B, P, Q, H] -> [B, Q, P, H]`
    TransposeMid(usize),
    /// Packed multi-head self-attention over the third axis of
    /// `[B, M, R, 3*nh*hd]` (columns ordered K-heads, Q-heads, V-heads).
    AttnCore { qkv: usize, num_heads: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    /// Saved softmax weights for `AttnCore`, shape `[B*M, nh, R, R]`.
    aux: Option<Tensor<T>>,
    requires_grad: bool,
}

/// A computation tape; append-only, consumed by [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, aux: Option<Tensor<T>>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::SumAxis2(a)
            | Op::SumAll(a)
            | Op::TransposeMid(a) => self.nodes[*a].requires_grad,
            Op::Proj { x, w } => self.nodes[*x].requires_grad || self.nodes[*w].requires_grad,
            Op::AddBias { x, b } => self.nodes[*x].requires_grad || self.nodes[*b].requires_grad,
            Op::AddBatchVec { x, v } => {
                self.nodes[*x].requires_grad || self.nodes[*v].requires_grad
            }
            Op::ConcatLast(parts) => parts.iter().any(|&p| self.nodes[p].requires_grad),
            Op::AttnCore { qkv, .. } => self.nodes[*qkv].requires_grad,
        };
        self.nodes.push(Node { value, op, aux, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Leaf whose gradient is tracked and returned by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, None);
        self.nodes[v.0].requires_grad = true;
        self.params.push(v.0);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(data, Op::Add(a.0, b.0), None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(data, Op::Sub(a.0, b.0), None))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a.0, c), None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        self.push(out, Op::Gelu(a.0), None)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.abs());
        self.push(out, Op::Abs(a.0), None)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a.0), None)
    }

    pub fn proj(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(NdpError::ShapeMismatch {
                op: "proj",
                detail: format!("x {xs:?} vs w {ws:?}"),
            });
        }
        let c = ws[0];
        let p = ws[1];
        let rows = self.value(x).numel() / c;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = p;
        let mut out = Tensor::zeros(&out_shape);
        T::gemm(
            rows,
            c,
            p,
            T::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            T::zero(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Proj { x: x.0, w: w.0 }, None))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(NdpError::ShapeMismatch {
                op: "add_bias",
                detail: format!("x {xs:?} vs b {bs:?}"),
            });
        }
        let w = bs[0];
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[i % w];
        }
        Ok(self.push(out, Op::AddBias { x: x.0, b: b.0 }, None))
    }

    pub fn add_batch_vec(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        if xs.len() < 2 || vs.len() != 2 || vs[0] != xs[0] || vs[1] != xs[xs.len() - 1] {
            return Err(NdpError::ShapeMismatch {
                op: "add_batch_vec",
                detail: format!("x {xs:?} vs v {vs:?}"),
            });
        }
        let h = vs[1];
        let mid: usize = xs[1..xs.len() - 1].iter().product();
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        let od = out.data_mut();
        for b in 0..xs[0] {
            for m in 0..mid {
                let base = (b * mid + m) * h;
                for j in 0..h {
                    od[base + j] += vv[b * h + j];
                }
            }
        }
        Ok(self.push(out, Op::AddBatchVec { x: x.0, v: v.0 }, None))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NdpError::InvalidArgument("concat_last of zero tensors".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(NdpError::ShapeMismatch {
                    op: "concat_last",
                    detail: format!("{:?} vs {:?}", self.shape(parts[0]), s),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut shape = lead;
        shape.push(total);
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            let mut col = 0usize;
            for (i, &p) in parts.iter().enumerate() {
                let w = widths[i];
                let pd = self.value(p).data();
                for r in 0..rows {
                    od[r * total + col..r * total + col + w]
                        .copy_from_slice(&pd[r * w..(r + 1) * w]);
                }
                col += w;
            }
        }
        Ok(self.push(out, Op::ConcatLast(parts.iter().map(|v| v.0).collect()), None))
    }

    pub fn sum_axis2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(NdpError::ShapeMismatch {
                op: "sum_axis2",
                detail: format!("want rank 4, got {xs:?}"),
            });
        }
        let (b, n, d, h) = (xs[0], xs[1], xs[2], xs[3]);
        let mut out = Tensor::zeros(&[b, n, 1, h]);
        let xd = self.value(x).data();
        {
            let od = out.data_mut();
            for bn in 0..b * n {
                for dd in 0..d {
                    let src = (bn * d + dd) * h;
                    for j in 0..h {
                        od[bn * h + j] += xd[src + j];
                    }
                }
            }
        }
        Ok(self.push(out, Op::SumAxis2(x.0), None))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x.0), None)
    }

    pub fn transpose_mid(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(NdpError::ShapeMismatch {
                op: "transpose_mid",
                detail: format!("want rank 4, got {xs:?}"),
            });
        }
        let out = transpose_mid_tensor(self.value(x));
        Ok(self.push(out, Op::TransposeMid(x.0), None))
    }

    /// Fused attention over the third axis. `qkv` has shape
    /// `[B, M, R, 3*nh*hd]`; returns `[B, M, R, nh*hd]`.
    pub fn attn_core(&mut self, qkv: Var, num_heads: usize) -> Result<Var> {
        let xs = self.shape(qkv).to_vec();
        if xs.len() != 4 || xs[3] % (3 * num_heads) != 0 {
            return Err(NdpError::ShapeMismatch {
                op: "attn_core",
                detail: format!("qkv {xs:?} with {num_heads} heads"),
            });
        }
        let (b, m, r) = (xs[0], xs[1], xs[2]);
        let hd = xs[3] / (3 * num_heads);
        let slices = b * m;
        let mut out = Tensor::zeros(&[b, m, r, num_heads * hd]);
        let mut weights = Tensor::zeros(&[slices, num_heads, r, r]);
        attn_forward(
            self.value(qkv).data(),
            out.data_mut(),
            weights.data_mut(),
            slices,
            r,
            num_heads,
            hd,
        );
        Ok(self.push(out, Op::AttnCore { qkv: qkv.0, num_heads }, Some(weights)))
    }

    /// Softmax weights saved by an `attn_core` node, `[B*M, nh, R, R]`.
    pub fn attn_weights(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].aux.as_ref()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NdpError::ShapeMismatch {
                op: if op == "add" { "add" } else { "sub" },
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss; returns one gradient per registered
    /// param, in registration order (zeros for params the loss ignores).
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor<T>>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(NdpError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let lval = lv.item().as_f64();
        if !lval.is_finite() {
            return Err(NdpError::NonFinite { context: "loss".into(), value: lval });
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(go) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                // keep leaf grads (params), drop everything else
                if matches!(self.nodes[id].op, Op::Leaf) {
                    grads[id] = Some(go);
                }
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(go);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, go.data(), T::one());
                    self.accumulate(&mut grads, *b, go.data(), T::one());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, go.data(), T::one());
                    self.accumulate(&mut grads, *b, go.data(), -T::one());
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, *a, go.data(), *c);
                }
                Op::Gelu(a) => {
                    let x = self.nodes[*a].value.data();
                    let gd: Vec<T> =
                        x.iter().zip(go.data()).map(|(&xi, &gi)| gelu_bwd(xi) * gi).collect();
                    self.accumulate(&mut grads, *a, &gd, T::one());
                }
                Op::Abs(a) => {
                    let x = self.nodes[*a].value.data();
                    let gd: Vec<T> = x
                        .iter()
                        .zip(go.data())
                        .map(|(&xi, &gi)| if xi < T::zero() { -gi } else { gi })
                        .collect();
                    self.accumulate(&mut grads, *a, &gd, T::one());
                }
                Op::Square(a) => {
                    let x = self.nodes[*a].value.data();
                    let two = T::from_f64(2.0);
                    let gd: Vec<T> =
                        x.iter().zip(go.data()).map(|(&xi, &gi)| two * xi * gi).collect();
                    self.accumulate(&mut grads, *a, &gd, T::one());
                }
                Op::Proj { x, w } => {
                    let c = self.nodes[*w].value.shape()[0];
                    let p = self.nodes[*w].value.shape()[1];
                    let rows = self.nodes[*x].value.numel() / c;
                    if self.nodes[*x].requires_grad {
                        let mut dx = vec![T::zero(); rows * c];
                        // dX = dO . W^T : [rows,p] x [p,c]; W stored [c,p]
                        T::gemm(
                            rows,
                            p,
                            c,
                            T::one(),
                            go.data(),
                            false,
                            self.nodes[*w].value.data(),
                            true,
                            T::zero(),
                            &mut dx,
                        );
                        self.accumulate(&mut grads, *x, &dx, T::one());
                    }
                    if self.nodes[*w].requires_grad {
                        let mut dw = vec![T::zero(); c * p];
                        // dW = X^T . dO : [c,rows] x [rows,p]; X stored [rows,c]
                        T::gemm(
                            c,
                            rows,
                            p,
                            T::one(),
                            self.nodes[*x].value.data(),
                            true,
                            go.data(),
                            false,
                            T::zero(),
                            &mut dw,
                        );
                        self.accumulate(&mut grads, *w, &dw, T::one());
                    }
                }
                Op::AddBias { x, b } => {
                    self.accumulate(&mut grads, *x, go.data(), T::one());
                    if self.nodes[*b].requires_grad {
                        let w = self.nodes[*b].value.numel();
                        let mut db = vec![T::zero(); w];
                        for (i, &g) in go.data().iter().enumerate() {
                            db[i % w] += g;
                        }
                        self.accumulate(&mut grads, *b, &db, T::one());
                    }
                }
                Op::AddBatchVec { x, v } => {
                    self.accumulate(&mut grads, *x, go.data(), T::one());
                    if self.nodes[*v].requires_grad {
                        let vs = self.nodes[*v].value.shape();
                        let (bsz, h) = (vs[0], vs[1]);
                        let mid = go.numel() / (bsz * h);
                        let mut dv = vec![T::zero(); bsz * h];
                        let gd = go.data();
                        for b in 0..bsz {
                            for m in 0..mid {
                                let base = (b * mid + m) * h;
                                for j in 0..h {
                                    dv[b * h + j] += gd[base + j];
                                }
                            }
                        }
                        self.accumulate(&mut grads, *v, &dv, T::one());
                    }
                }
                Op::ConcatLast(parts) => {
                    let total = *self.nodes[id].value.shape().last().unwrap();
                    let rows = self.nodes[id].value.numel() / total;
                    let mut col = 0usize;
                    for &p in parts {
                        let w = *self.nodes[p].value.shape().last().unwrap();
                        if self.nodes[p].requires_grad {
                            let mut dp = vec![T::zero(); rows * w];
                            for r in 0..rows {
                                dp[r * w..(r + 1) * w].copy_from_slice(
                                    &go.data()[r * total + col..r * total + col + w],
                                );
                            }
                            self.accumulate(&mut grads, p, &dp, T::one());
                        }
                        col += w;
                    }
                }
                Op::SumAxis2(x) => {
                    let xs = self.nodes[*x].value.shape();
                    let (b, n, d, h) = (xs[0], xs[1], xs[2], xs[3]);
                    let mut dx = vec![T::zero(); b * n * d * h];
                    let gd = go.data();
                    for bn in 0..b * n {
                        for dd in 0..d {
                            let dst = (bn * d + dd) * h;
                            for j in 0..h {
                                dx[dst + j] = gd[bn * h + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, &dx, T::one());
                }
                Op::SumAll(x) => {
                    let g = go.item();
                    let n = self.nodes[*x].value.numel();
                    let dx = vec![g; n];
                    self.accumulate(&mut grads, *x, &dx, T::one());
                }
                Op::TransposeMid(x) => {
                    let gt = transpose_mid_back(&go, self.nodes[*x].value.shape());
                    self.accumulate(&mut grads, *x, gt.data(), T::one());
                }
                Op::AttnCore { qkv, num_heads } => {
                    let xs = self.nodes[*qkv].value.shape();
                    let (b, m, r) = (xs[0], xs[1], xs[2]);
                    let hd = xs[3] / (3 * num_heads);
                    let mut dqkv = vec![T::zero(); self.nodes[*qkv].value.numel()];
                    attn_backward(
                        self.nodes[*qkv].value.data(),
                        self.nodes[id].aux.as_ref().expect("attn aux").data(),
                        go.data(),
                        &mut dqkv,
                        b * m,
                        r,
                        *num_heads,
                        hd,
                    );
                    self.accumulate(&mut grads, *qkv, &dqkv, T::one());
                }
            }
        }

        Ok(self
            .params
            .iter()
            .map(|&pid| match grads[pid].take() {
                Some(g) => g,
                None => Tensor::zeros(self.nodes[pid].value.shape()),
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: usize, contrib: &[T], scale: T) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = &mut grads[id];
        match slot {
            Some(g) => {
                for (a, &c) in g.data_mut().iter_mut().zip(contrib) {
                    *a += c * scale;
                }
            }
            None => {
                let mut g = Tensor::zeros(self.nodes[id].value.shape());
                for (a, &c) in g.data_mut().iter_mut().zip(contrib) {
                    *a = c * scale;
                }
                *slot = Some(g);
            }
        }
    }
}

/// Evaluate a scalar function of the given parameter tensors and return its
/// value together with exact gradients, one per parameter.
pub fn value_and_grad<T: Scalar, F>(params: &[Tensor<T>], build: F) -> Result<(T, Vec<Tensor<T>>)>
where
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let lv = tape.value(loss);
    if lv.numel() != 1 {
        return Err(NdpError::InvalidArgument(format!(
            "loss must be scalar, got shape {:?}",
            lv.shape()
        )));
    }
    let l = lv.item();
    if !l.as_f64().is_finite() {
        return Err(NdpError::NonFinite { context: "loss".into(), value: l.as_f64() });
    }
    let grads = tape.backward(loss)?;
    Ok((l, grads))
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shapes pre-checked")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh_approx())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh_approx();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn transpose_mid_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (b, p, q, h) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[b, q, p, h]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for pi in 0..p {
            for qi in 0..q {
                let src = ((bi * p + pi) * q + qi) * h;
                let dst = ((bi * q + qi) * p + pi) * h;
                od[dst..dst + h].copy_from_slice(&xd[src..src + h]);
            }
        }
    }
    out
}

fn transpose_mid_back<T: Scalar>(go: &Tensor<T>, orig_shape: &[usize]) -> Tensor<T> {
    let t = transpose_mid_tensor(go);
    debug_assert_eq!(t.shape(), orig_shape);
    t
}

/// Threshold (in slices) above which attention loops go parallel.
const PAR_SLICES: usize = 64;

/// Below this work size the scalar loops beat the gemm call overhead.
fn use_gemm(r: usize, hd: usize) -> bool {
    r * r * hd >= 1024
}

#[allow(clippy::too_many_arguments)]
fn attn_forward<T: Scalar>(
    qkv: &[T],
    out: &mut [T],
    weights: &mut [T],
    slices: usize,
    r: usize,
    nh: usize,
    hd: usize,
) {
    let c3 = 3 * nh * hd;
    let oc = nh * hd;
    let do_slice = |s: usize, out_s: &mut [T], w_s: &mut [T]| {
        let x = &qkv[s * r * c3..(s + 1) * r * c3];
        let inv = T::from_f64(1.0 / (hd as f64).sqrt());
        for h in 0..nh {
            let koff = h * hd;
            let qoff = nh * hd + h * hd;
            let voff = 2 * nh * hd + h * hd;
            let w_h = &mut w_s[h * r * r..(h + 1) * r * r];
            if r == 1 {
                w_h[0] = T::one();
                for c in 0..hd {
                    out_s[koff + c] = x[voff + c];
                }
                continue;
            }
            if use_gemm(r, hd) {
                // logits = K Q^T / sqrt(hd): K rows strided by c3 in x
                unsafe {
                    T::gemm_raw(
                        r,
                        hd,
                        r,
                        inv,
                        x.as_ptr().add(koff),
                        c3 as isize,
                        1,
                        x.as_ptr().add(qoff),
                        1,
                        c3 as isize,
                        T::zero(),
                        w_h.as_mut_ptr(),
                        r as isize,
                        1,
                    );
                }
            } else {
                for i in 0..r {
                    let ki = &x[i * c3 + koff..i * c3 + koff + hd];
                    for j in 0..r {
                        let qj = &x[j * c3 + qoff..j * c3 + qoff + hd];
                        let mut acc = T::zero();
                        for c in 0..hd {
                            acc += ki[c] * qj[c];
                        }
                        w_h[i * r + j] = acc * inv;
                    }
                }
            }
            // softmax over the last index
            for row in w_h.chunks_mut(r) {
                let mut maxv = T::neg_infinity();
                for v in row.iter() {
                    if *v > maxv {
                        maxv = *v;
                    }
                }
                let mut z = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - maxv).exp_approx();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / z;
                }
            }
            // out = A V
            if use_gemm(r, hd) {
                unsafe {
                    T::gemm_raw(
                        r,
                        r,
                        hd,
                        T::one(),
                        w_h.as_ptr(),
                        r as isize,
                        1,
                        x.as_ptr().add(voff),
                        c3 as isize,
                        1,
                        T::zero(),
                        out_s.as_mut_ptr().add(koff),
                        oc as isize,
                        1,
                    );
                }
            } else {
                for i in 0..r {
                    let oi = &mut out_s[i * oc + koff..i * oc + koff + hd];
                    for v in oi.iter_mut() {
                        *v = T::zero();
                    }
                    for j in 0..r {
                        let a = w_h[i * r + j];
                        let vj = &x[j * c3 + voff..j * c3 + voff + hd];
                        for c in 0..hd {
                            oi[c] += a * vj[c];
                        }
                    }
                }
            }
        }
    };
    if slices >= PAR_SLICES {
        out.par_chunks_mut(r * oc)
            .zip(weights.par_chunks_mut(nh * r * r))
            .enumerate()
            .for_each(|(s, (o, w))| do_slice(s, o, w));
    } else {
        for (s, (o, w)) in out.chunks_mut(r * oc).zip(weights.chunks_mut(nh * r * r)).enumerate() {
            do_slice(s, o, w);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attn_backward<T: Scalar>(
    qkv: &[T],
    weights: &[T],
    go: &[T],
    dqkv: &mut [T],
    slices: usize,
    r: usize,
    nh: usize,
    hd: usize,
) {
    let c3 = 3 * nh * hd;
    let oc = nh * hd;
    let do_slice = |s: usize, dx: &mut [T]| {
        let x = &qkv[s * r * c3..(s + 1) * r * c3];
        let g = &go[s * r * oc..(s + 1) * r * oc];
        let inv = T::from_f64(1.0 / (hd as f64).sqrt());
        let mut da = vec![T::zero(); r * r];
        let mut dl = vec![T::zero(); r * r];
        for h in 0..nh {
            let koff = h * hd;
            let qoff = nh * hd + h * hd;
            let voff = 2 * nh * hd + h * hd;
            let a = &weights[(s * nh + h) * r * r..(s * nh + h + 1) * r * r];
            if r == 1 {
                // A = [1]: dV = dO, dK = dQ = 0
                for c in 0..hd {
                    dx[voff + c] += g[koff + c];
                }
                continue;
            }
            if use_gemm(r, hd) {
                unsafe {
                    // dV += A^T dO
                    T::gemm_raw(
                        r,
                        r,
                        hd,
                        T::one(),
                        a.as_ptr(),
                        1,
                        r as isize,
                        g.as_ptr().add(koff),
                        oc as isize,
                        1,
                        T::one(),
                        dx.as_mut_ptr().add(voff),
                        c3 as isize,
                        1,
                    );
                    // dA = dO V^T
                    T::gemm_raw(
                        r,
                        hd,
                        r,
                        T::one(),
                        g.as_ptr().add(koff),
                        oc as isize,
                        1,
                        x.as_ptr().add(voff),
                        1,
                        c3 as isize,
                        T::zero(),
                        da.as_mut_ptr(),
                        r as isize,
                        1,
                    );
                }
            } else {
                for i in 0..r {
                    let gi = &g[i * oc + koff..i * oc + koff + hd];
                    for j in 0..r {
                        let aij = a[i * r + j];
                        let vj = &x[j * c3 + voff..j * c3 + voff + hd];
                        let dvj = &mut dx[j * c3 + voff..j * c3 + voff + hd];
                        let mut acc = T::zero();
                        for c in 0..hd {
                            dvj[c] += aij * gi[c];
                            acc += gi[c] * vj[c];
                        }
                        da[i * r + j] = acc;
                    }
                }
            }
            // softmax rows: dL[i,j] = a[i,j] (dA[i,j] - sum_j' dA[i,j'] a[i,j'])
            for i in 0..r {
                let mut srow = T::zero();
                for j in 0..r {
                    srow += da[i * r + j] * a[i * r + j];
                }
                for j in 0..r {
                    dl[i * r + j] = a[i * r + j] * (da[i * r + j] - srow);
                }
            }
            if use_gemm(r, hd) {
                unsafe {
                    // dK += inv dL Q
                    T::gemm_raw(
                        r,
                        r,
                        hd,
                        inv,
                        dl.as_ptr(),
                        r as isize,
                        1,
                        x.as_ptr().add(qoff),
                        c3 as isize,
                        1,
                        T::one(),
                        dx.as_mut_ptr().add(koff),
                        c3 as isize,
                        1,
                    );
                    // dQ += inv dL^T K
                    T::gemm_raw(
                        r,
                        r,
                        hd,
                        inv,
                        dl.as_ptr(),
                        1,
                        r as isize,
                        x.as_ptr().add(koff),
                        c3 as isize,
                        1,
                        T::one(),
                        dx.as_mut_ptr().add(qoff),
                        c3 as isize,
                        1,
                    );
                }
            } else {
                for i in 0..r {
                    let ki = &x[i * c3 + koff..i * c3 + koff + hd];
                    for j in 0..r {
                        let d = dl[i * r + j] * inv;
                        let qj = &x[j * c3 + qoff..j * c3 + qoff + hd];
                        for c in 0..hd {
                            dx[i * c3 + koff + c] += d * qj[c];
                            dx[j * c3 + qoff + c] += d * ki[c];
                        }
                    }
                }
            }
        }
    };
    if slices >= PAR_SLICES {
        dqkv.par_chunks_mut(r * c3).enumerate().for_each(|(s, dx)| do_slice(s, dx));
    } else {
        for (s, dx) in dqkv.chunks_mut(r * c3).enumerate() {
            do_slice(s, dx);
        }
    }
}
