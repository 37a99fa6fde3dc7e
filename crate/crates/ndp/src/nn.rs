//! Dense layers and axis-selectable multi-head self-attention.

use crate::autodiff::{Tape, Var};
use crate::error::{NdpError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Weights `[in, out]` plus bias `[out]` of a fully-connected layer.
#[derive(Clone, Debug)]
pub struct DenseParams<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> DenseParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weights.rank() != 2 || bias.rank() != 1 || weights.shape()[1] != bias.shape()[0] {
            return Err(NdpError::ShapeMismatch {
                op: "dense_params",
                detail: format!("weights {:?} vs bias {:?}", weights.shape(), bias.shape()),
            });
        }
        Ok(DenseParams { weights, bias })
    }

    /// Fan-in scaled uniform init, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<T> = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rng.uniform_in(-bound, bound)))
            .collect();
        DenseParams {
            weights: Tensor::from_vec(&[fan_in, fan_out], data).expect("init shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// `x[R, in] . W + b`, broadcasting the bias over rows.
pub fn dense_apply<T: Scalar>(x: &Tensor<T>, p: &DenseParams<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.ncols() != p.in_width() {
        return Err(NdpError::ShapeMismatch {
            op: "dense_apply",
            detail: format!("x {:?} vs weights {:?}", x.shape(), p.weights.shape()),
        });
    }
    let (m, k, n) = (x.nrows(), p.in_width(), p.out_width());
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, T::one(), x.data(), false, p.weights.data(), false, T::zero(), out.data_mut());
    let b = p.bias.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b[i % n];
    }
    Ok(out)
}

/// Per-head key/query/value projections (`[H, head_dim]` each) and the output
/// projection (`[num_heads * head_dim, H]`). No biases.
#[derive(Clone, Debug)]
pub struct MhsaParams<T> {
    pub wk: Vec<Tensor<T>>,
    pub wq: Vec<Tensor<T>>,
    pub wv: Vec<Tensor<T>>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> MhsaParams<T> {
    pub fn init(embed_width: usize, num_heads: usize, rng: &mut Rng) -> Result<Self> {
        if num_heads == 0 || embed_width % num_heads != 0 {
            return Err(NdpError::InvalidArgument(format!(
                "embed width {embed_width} not divisible by {num_heads} heads"
            )));
        }
        let hd = embed_width / num_heads;
        let mat = |rng: &mut Rng, rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data: Vec<T> =
                (0..rows * cols).map(|_| T::from_f64(rng.uniform_in(-bound, bound))).collect();
            Tensor::from_vec(&[rows, cols], data).expect("init shape")
        };
        let mut wk = Vec::with_capacity(num_heads);
        let mut wq = Vec::with_capacity(num_heads);
        let mut wv = Vec::with_capacity(num_heads);
        for _ in 0..num_heads {
            wk.push(mat(rng, embed_width, hd));
            wq.push(mat(rng, embed_width, hd));
            wv.push(mat(rng, embed_width, hd));
        }
        let wo = mat(rng, num_heads * hd, embed_width);
        Ok(MhsaParams { wk, wq, wv, wo })
    }

    pub fn num_heads(&self) -> usize {
        self.wk.len()
    }

    pub fn head_dim(&self) -> usize {
        self.wk[0].shape()[1]
    }

    pub fn embed_width(&self) -> usize {
        self.wk[0].shape()[0]
    }
}

/// Which tensor axis the attention mixes over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnAxis {
    /// Attend across the N datapoints, independently per input dimension.
    Sequence,
    /// Attend across the D input dimensions, independently per datapoint.
    Dimension,
}

pub(crate) struct DenseVars {
    pub w: Var,
    pub b: Var,
}

impl DenseVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, p: &DenseParams<T>, trainable: bool) -> Self {
        if trainable {
            DenseVars { w: tape.param(p.weights.clone()), b: tape.param(p.bias.clone()) }
        } else {
            DenseVars { w: tape.constant(p.weights.clone()), b: tape.constant(p.bias.clone()) }
        }
    }
}

pub(crate) fn dense_graph<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &DenseVars) -> Result<Var> {
    let y = tape.proj(x, p.w)?;
    tape.add_bias(y, p.b)
}

pub(crate) struct MhsaVars {
    pub wk: Vec<Var>,
    pub wq: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
}

impl MhsaVars {
    pub fn register<T: Scalar>(tape: &mut Tape<T>, p: &MhsaParams<T>, trainable: bool) -> Self {
        let reg = |t: &Tensor<T>, tape: &mut Tape<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MhsaVars {
            wk: p.wk.iter().map(|t| reg(t, tape)).collect(),
            wq: p.wq.iter().map(|t| reg(t, tape)).collect(),
            wv: p.wv.iter().map(|t| reg(t, tape)).collect(),
            wo: reg(&p.wo, tape),
        }
    }
}

/// Self-attention over the third axis of `[B, M, R, H]`. Callers pick the
/// axis by transposing; see [`mhsa_apply`].
pub(crate) fn mhsa_graph<T: Scalar>(tape: &mut Tape<T>, s: Var, p: &MhsaVars) -> Result<Var> {
    let packed: Vec<Var> =
        p.wk.iter().chain(p.wq.iter()).chain(p.wv.iter()).copied().collect();
    let w_all = tape.concat_last(&packed)?;
    let qkv = tape.proj(s, w_all)?;
    let o = tape.attn_core(qkv, p.wk.len())?;
    tape.proj(o, p.wo)
}

fn lift_r3<T: Scalar>(s: &Tensor<T>) -> Result<Tensor<T>> {
    if s.rank() != 3 {
        return Err(NdpError::ShapeMismatch {
            op: "mhsa_apply",
            detail: format!("want rank-3 [N, D, H], got {:?}", s.shape()),
        });
    }
    let sh = s.shape();
    Tensor::from_vec(&[1, sh[0], sh[1], sh[2]], s.data().to_vec())
}

fn mhsa_graph_on_axis<T: Scalar>(
    tape: &mut Tape<T>,
    s4: Var,
    axis: AttnAxis,
    p: &MhsaVars,
) -> Result<Var> {
    match axis {
        // [B, N, D, H]: slices (b, n) are [D, H], already the third axis
        AttnAxis::Dimension => mhsa_graph(tape, s4, p),
        AttnAxis::Sequence => {
            let t = tape.transpose_mid(s4)?;
            let o = mhsa_graph(tape, t, p)?;
            tape.transpose_mid(o)
        }
    }
}

/// Multi-head self-attention on a rank-3 tensor `[N, D, H]`.
pub fn mhsa_apply<T: Scalar>(
    s: &Tensor<T>,
    axis: AttnAxis,
    p: &MhsaParams<T>,
) -> Result<Tensor<T>> {
    let s4 = lift_r3(s)?;
    if s4.shape()[3] != p.embed_width() {
        return Err(NdpError::ShapeMismatch {
            op: "mhsa_apply",
            detail: format!("embedding width {} vs params {}", s4.shape()[3], p.embed_width()),
        });
    }
    let mut tape = Tape::new();
    let sv = tape.constant(s4);
    let vars = MhsaVars::register(&mut tape, p, false);
    let out = mhsa_graph_on_axis(&mut tape, sv, axis, &vars)?;
    let val = tape.value(out);
    Tensor::from_vec(s.shape(), val.data().to_vec())
}

/// Softmax attention weights of [`mhsa_apply`], shape `[slices, heads, R, R]`.
pub fn mhsa_attention_weights<T: Scalar>(
    s: &Tensor<T>,
    axis: AttnAxis,
    p: &MhsaParams<T>,
) -> Result<Tensor<T>> {
    let s4 = lift_r3(s)?;
    let mut tape = Tape::new();
    let sv = tape.constant(s4);
    let sv = match axis {
        AttnAxis::Dimension => sv,
        AttnAxis::Sequence => tape.transpose_mid(sv)?,
    };
    let vars = MhsaVars::register(&mut tape, p, false);
    let packed: Vec<Var> =
        vars.wk.iter().chain(vars.wq.iter()).chain(vars.wv.iter()).copied().collect();
    let w_all = tape.concat_last(&packed)?;
    let qkv = tape.proj(sv, w_all)?;
    let o = tape.attn_core(qkv, p.num_heads())?;
    Ok(tape.attn_weights(o).expect("attn node has weights").clone())
}
