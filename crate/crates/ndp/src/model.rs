//! The noise-prediction network: preprocessing to [N, D, 2], time embedding,
//! a stack of bi-dimensional attention blocks with residual connections, and
//! the two output heads (input head equivariant, output head
//! dimension-invariant).

use crate::autodiff::{Tape, Var};
use crate::error::{NdpError, Result};
use crate::nn::{dense_graph, mhsa_graph, DenseParams, DenseVars, MhsaParams, MhsaVars};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Length of the cyclic time encoding.
pub const TIME_EMBED_DIM: usize = 128;

/// Architecture hyperparameters.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    /// Embedding width H.
    pub embed_width: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Diffusion step count T.
    pub timesteps: usize,
    /// Keep the inputs clean (Eq.-6 style training) instead of diffusing them.
    pub deterministic_inputs: bool,
    /// Dense layers per output head (1 or 2).
    pub head_depth: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_width % self.num_heads != 0 {
            return Err(NdpError::ConfigInvalid(format!(
                "embed width {} must be divisible by num_heads {}",
                self.embed_width, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(NdpError::ConfigInvalid("num_blocks must be >= 1".into()));
        }
        if self.timesteps < 2 {
            return Err(NdpError::ConfigInvalid(format!(
                "timesteps {} must be >= 2",
                self.timesteps
            )));
        }
        if self.head_depth == 0 || self.head_depth > 2 {
            return Err(NdpError::ConfigInvalid(format!(
                "head_depth {} must be 1 or 2",
                self.head_depth
            )));
        }
        Ok(())
    }
}

/// One bi-dimensional attention block: an attention layer per axis.
#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub seq_attn: MhsaParams<T>,
    pub dim_attn: MhsaParams<T>,
}

/// All learnable weights of the noise model.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub input_proj: DenseParams<T>,
    pub time_proj: DenseParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub x_head: Vec<DenseParams<T>>,
    pub y_head: Vec<DenseParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled uniform initialisation, deterministic in the seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).derive(0x494e4954); // "INIT"
        let h = cfg.embed_width;
        let blocks = (0..cfg.num_blocks)
            .map(|_| {
                Ok(BlockParams {
                    seq_attn: MhsaParams::init(h, cfg.num_heads, &mut rng)?,
                    dim_attn: MhsaParams::init(h, cfg.num_heads, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = |rng: &mut Rng| -> Vec<DenseParams<T>> {
            if cfg.head_depth == 2 {
                vec![DenseParams::init(h, h, rng), DenseParams::init(h, 1, rng)]
            } else {
                vec![DenseParams::init(h, 1, rng)]
            }
        };
        Ok(ModelParams {
            input_proj: DenseParams::init(2, h, &mut rng),
            time_proj: DenseParams::init(TIME_EMBED_DIM, h, &mut rng),
            blocks,
            x_head: head(&mut rng),
            y_head: head(&mut rng),
        })
    }

    /// Canonical (name, tensor) walk; fixes checkpoint/optimiser ordering.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("input_proj.weight".into(), &self.input_proj.weights),
            ("input_proj.bias".into(), &self.input_proj.bias),
            ("time_proj.weight".into(), &self.time_proj.weights),
            ("time_proj.bias".into(), &self.time_proj.bias),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, attn) in [("seq", &b.seq_attn), ("dim", &b.dim_attn)] {
                for hnum in 0..attn.num_heads() {
                    out.push((format!("blocks.{i}.{tag}.wk.{hnum}"), &attn.wk[hnum]));
                    out.push((format!("blocks.{i}.{tag}.wq.{hnum}"), &attn.wq[hnum]));
                    out.push((format!("blocks.{i}.{tag}.wv.{hnum}"), &attn.wv[hnum]));
                }
                out.push((format!("blocks.{i}.{tag}.wo"), &attn.wo));
            }
        }
        for (tag, head) in [("x_head", &self.x_head), ("y_head", &self.y_head)] {
            for (j, d) in head.iter().enumerate() {
                out.push((format!("{tag}.{j}.weight"), &d.weights));
                out.push((format!("{tag}.{j}.bias"), &d.bias));
            }
        }
        out
    }

    /// Same walk with mutable references, in the same order as [`named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("input_proj.weight".into(), &mut self.input_proj.weights),
            ("input_proj.bias".into(), &mut self.input_proj.bias),
            ("time_proj.weight".into(), &mut self.time_proj.weights),
            ("time_proj.bias".into(), &mut self.time_proj.bias),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, attn) in [("seq", &mut b.seq_attn), ("dim", &mut b.dim_attn)] {
                for (hnum, ((k, q), v)) in
                    attn.wk.iter_mut().zip(attn.wq.iter_mut()).zip(attn.wv.iter_mut()).enumerate()
                {
                    out.push((format!("blocks.{i}.{tag}.wk.{hnum}"), k));
                    out.push((format!("blocks.{i}.{tag}.wq.{hnum}"), q));
                    out.push((format!("blocks.{i}.{tag}.wv.{hnum}"), v));
                }
                out.push((format!("blocks.{i}.{tag}.wo"), &mut attn.wo));
            }
        }
        for (tag, head) in [("x_head", &mut self.x_head), ("y_head", &mut self.y_head)] {
            for (j, d) in head.iter_mut().enumerate() {
                out.push((format!("{tag}.{j}.weight"), &mut d.weights));
                out.push((format!("{tag}.{j}.bias"), &mut d.bias));
            }
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            input_proj: DenseParams {
                weights: self.input_proj.weights.cast(),
                bias: self.input_proj.bias.cast(),
            },
            time_proj: DenseParams {
                weights: self.time_proj.weights.cast(),
                bias: self.time_proj.bias.cast(),
            },
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    seq_attn: cast_mhsa(&b.seq_attn),
                    dim_attn: cast_mhsa(&b.dim_attn),
                })
                .collect(),
            x_head: self
                .x_head
                .iter()
                .map(|d| DenseParams { weights: d.weights.cast(), bias: d.bias.cast() })
                .collect(),
            y_head: self
                .y_head
                .iter()
                .map(|d| DenseParams { weights: d.weights.cast(), bias: d.bias.cast() })
                .collect(),
        }
    }
}

fn cast_mhsa<T: Scalar, U: Scalar>(p: &MhsaParams<T>) -> MhsaParams<U> {
    MhsaParams {
        wk: p.wk.iter().map(Tensor::cast).collect(),
        wq: p.wq.iter().map(Tensor::cast).collect(),
        wv: p.wv.iter().map(Tensor::cast).collect(),
        wo: p.wo.cast(),
    }
}

/// Cyclic 128-dimensional encoding: `sin(10^(4i/63) t)` for i = 0..63
/// followed by the matching cosines.
pub fn embed_time<T: Scalar>(t: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(TIME_EMBED_DIM);
    for i in 0..64 {
        let freq = 10f64.powf(4.0 * i as f64 / 63.0);
        data.push(T::from_f64((freq * t as f64).sin()));
    }
    for i in 0..64 {
        let freq = 10f64.powf(4.0 * i as f64 / 63.0);
        data.push(T::from_f64((freq * t as f64).cos()));
    }
    Tensor::from_vec(&[TIME_EMBED_DIM], data).expect("time embedding shape")
}

/// Pair every input dimension with the replicated output:
/// `out[n, d, :] = [x[n, d], y[n]]`.
pub fn preprocess_pairs<T: Scalar>(x: &Tensor<T>, y: &[T]) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.nrows() != y.len() {
        return Err(NdpError::ShapeMismatch {
            op: "preprocess_pairs",
            detail: format!("x {:?} vs y len {}", x.shape(), y.len()),
        });
    }
    let (n, d) = (x.nrows(), x.ncols());
    let mut out = Tensor::zeros(&[n, d, 2]);
    let od = out.data_mut();
    for i in 0..n {
        for j in 0..d {
            od[(i * d + j) * 2] = x.get2(i, j);
            od[(i * d + j) * 2 + 1] = y[i];
        }
    }
    Ok(out)
}

/// Batched variant: `x [B, N, D]`, `y [B, N]` to `[B, N, D, 2]`.
fn preprocess_batch<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || y.rank() != 2 || x.shape()[0] != y.shape()[0] || x.shape()[1] != y.shape()[1]
    {
        return Err(NdpError::ShapeMismatch {
            op: "preprocess_batch",
            detail: format!("x {:?} vs y {:?}", x.shape(), y.shape()),
        });
    }
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[b, n, d, 2]);
    let od = out.data_mut();
    let xd = x.data();
    let yd = y.data();
    for bi in 0..b {
        for i in 0..n {
            let yv = yd[bi * n + i];
            for j in 0..d {
                let base = ((bi * n + i) * d + j) * 2;
                od[base] = xd[(bi * n + i) * d + j];
                od[base + 1] = yv;
            }
        }
    }
    Ok(out)
}

pub(crate) struct ModelVars {
    input_proj: DenseVars,
    time_proj: DenseVars,
    blocks: Vec<(MhsaVars, MhsaVars)>,
    x_head: Vec<DenseVars>,
    y_head: Vec<DenseVars>,
}

impl ModelVars {
    /// Register all parameters on the tape (canonical order, matching
    /// [`ModelParams::named`]) as params or constants.
    pub fn register<T: Scalar>(
        tape: &mut Tape<T>,
        p: &ModelParams<T>,
        trainable: bool,
    ) -> ModelVars {
        ModelVars {
            input_proj: DenseVars::register(tape, &p.input_proj, trainable),
            time_proj: DenseVars::register(tape, &p.time_proj, trainable),
            blocks: p
                .blocks
                .iter()
                .map(|b| {
                    (
                        MhsaVars::register(tape, &b.seq_attn, trainable),
                        MhsaVars::register(tape, &b.dim_attn, trainable),
                    )
                })
                .collect(),
            x_head: p.x_head.iter().map(|d| DenseVars::register(tape, d, trainable)).collect(),
            y_head: p.y_head.iter().map(|d| DenseVars::register(tape, d, trainable)).collect(),
        }
    }
}

/// One bi-dimensional attention block on `[B, N, D, H]`:
/// `s' = s + gelu(Attn_N(s + t_emb) + Attn_D(s + t_emb))`.
fn block_graph<T: Scalar>(
    tape: &mut Tape<T>,
    s: Var,
    t_emb: Var,
    block: &(MhsaVars, MhsaVars),
) -> Result<Var> {
    let with_t = tape.add_batch_vec(s, t_emb)?;
    let seq = {
        let tr = tape.transpose_mid(with_t)?;
        let o = mhsa_graph(tape, tr, &block.0)?;
        tape.transpose_mid(o)?
    };
    let dim = mhsa_graph(tape, with_t, &block.1)?;
    let sum = tape.add(seq, dim)?;
    let act = tape.gelu(sum);
    tape.add(s, act)
}

fn head_graph<T: Scalar>(tape: &mut Tape<T>, mut v: Var, layers: &[DenseVars]) -> Result<Var> {
    for (i, layer) in layers.iter().enumerate() {
        v = dense_graph(tape, v, layer)?;
        if i + 1 < layers.len() {
            v = tape.gelu(v);
        }
    }
    Ok(v)
}

/// Full forward graph over a batch. `x_t [B, N, D]`, `y_t [B, N]`, one
/// diffusion step per batch element. Returns the two noise heads
/// (`[B, N, D, 1]` and `[B, N, 1, 1]`).
pub(crate) fn forward_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    x_t: &Tensor<T>,
    y_t: &Tensor<T>,
    ts: &[usize],
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let b = x_t.shape()[0];
    if ts.len() != b {
        return Err(NdpError::ShapeMismatch {
            op: "forward_graph",
            detail: format!("{b} datasets vs {} time steps", ts.len()),
        });
    }
    for &t in ts {
        if t > cfg.timesteps {
            return Err(NdpError::InvalidArgument(format!(
                "diffusion step {t} out of range 0..={}",
                cfg.timesteps
            )));
        }
    }
    let s0 = preprocess_batch(x_t, y_t)?;
    let s0 = tape.constant(s0);
    let mut cur = dense_graph(tape, s0, &vars.input_proj)?;
    check_layer(tape, cur, "input projection")?;

    let mut emb = Tensor::zeros(&[b, TIME_EMBED_DIM]);
    for (bi, &t) in ts.iter().enumerate() {
        let e = embed_time::<T>(t);
        emb.data_mut()[bi * TIME_EMBED_DIM..(bi + 1) * TIME_EMBED_DIM].copy_from_slice(e.data());
    }
    let emb = tape.constant(emb);
    let t_emb = dense_graph(tape, emb, &vars.time_proj)?;

    let mut agg: Option<Var> = None;
    for (i, block) in vars.blocks.iter().enumerate() {
        cur = block_graph(tape, cur, t_emb, block)?;
        check_layer(tape, cur, &format!("attention block {i}"))?;
        agg = Some(match agg {
            None => cur,
            Some(a) => tape.add(a, cur)?,
        });
    }
    let agg = agg.expect("at least one block");

    let eps_x = head_graph(tape, agg, &vars.x_head)?;
    check_layer(tape, eps_x, "x head")?;
    let pooled = tape.sum_axis2(agg)?;
    let eps_y = head_graph(tape, pooled, &vars.y_head)?;
    check_layer(tape, eps_y, "y head")?;
    Ok((eps_x, eps_y))
}

fn check_layer<T: Scalar>(tape: &Tape<T>, v: Var, layer: &str) -> Result<()> {
    if let Some(bad) = tape.value(v).first_non_finite() {
        return Err(NdpError::NonFinite { context: format!("model forward, {layer}"), value: bad });
    }
    Ok(())
}

/// Predict the added noise for a single dataset. With
/// `cfg.deterministic_inputs` the first argument is the clean `x0`.
pub fn predict_noise<T: Scalar>(
    x_t: &Tensor<T>,
    y_t: &[T],
    t: usize,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, Vec<T>)> {
    if x_t.rank() != 2 || x_t.nrows() != y_t.len() {
        return Err(NdpError::ShapeMismatch {
            op: "predict_noise",
            detail: format!("x {:?} vs y len {}", x_t.shape(), y_t.len()),
        });
    }
    let (n, d) = (x_t.nrows(), x_t.ncols());
    let xb = Tensor::from_vec(&[1, n, d], x_t.data().to_vec())?;
    let yb = Tensor::from_vec(&[1, n], y_t.to_vec())?;
    let (ex, ey) = predict_noise_batch(&xb, &yb, &[t], params, cfg)?;
    let eps_x = Tensor::from_vec(&[n, d], ex.into_data())?;
    Ok((eps_x, ey.into_data()))
}

/// Batched noise prediction: `x_t [B, N, D]`, `y_t [B, N]`, per-dataset
/// steps. Returns `([B, N, D], [B, N])`.
pub fn predict_noise_batch<T: Scalar>(
    x_t: &Tensor<T>,
    y_t: &Tensor<T>,
    ts: &[usize],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params, false);
    let (ex, ey) = forward_graph(&mut tape, &vars, x_t, y_t, ts, cfg)?;
    let (b, n, d) = (x_t.shape()[0], x_t.shape()[1], x_t.shape()[2]);
    let eps_x = Tensor::from_vec(&[b, n, d], tape.value(ex).data().to_vec())?;
    let eps_y = Tensor::from_vec(&[b, n], tape.value(ey).data().to_vec())?;
    Ok((eps_x, eps_y))
}

/// One bi-dimensional attention block on a single `[N, D, H]` tensor with an
/// already-projected H-dimensional time embedding.
pub fn bidim_block_apply<T: Scalar>(
    s: &Tensor<T>,
    t_emb: &[T],
    block: &BlockParams<T>,
) -> Result<Tensor<T>> {
    if s.rank() != 3 {
        return Err(NdpError::ShapeMismatch {
            op: "bidim_block_apply",
            detail: format!("want [N, D, H], got {:?}", s.shape()),
        });
    }
    let h = s.shape()[2];
    if t_emb.len() != h || block.seq_attn.embed_width() != h {
        return Err(NdpError::ShapeMismatch {
            op: "bidim_block_apply",
            detail: format!(
                "H = {h} vs t_emb len {} vs block width {}",
                t_emb.len(),
                block.seq_attn.embed_width()
            ),
        });
    }
    let mut tape = Tape::new();
    let s4 = tape.constant(Tensor::from_vec(
        &[1, s.shape()[0], s.shape()[1], h],
        s.data().to_vec(),
    )?);
    let emb = tape.constant(Tensor::from_vec(&[1, h], t_emb.to_vec())?);
    let vars = (
        MhsaVars::register(&mut tape, &block.seq_attn, false),
        MhsaVars::register(&mut tape, &block.dim_attn, false),
    );
    let out = block_graph(&mut tape, s4, emb, &vars)?;
    Tensor::from_vec(s.shape(), tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            embed_width: 8,
            num_blocks: 2,
            num_heads: 2,
            timesteps: 10,
            deterministic_inputs: false,
            head_depth: 1,
        }
    }

    fn rand_xy(n: usize, d: usize, rng: &mut Rng) -> (Tensor<f64>, Vec<f64>) {
        let x = Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.standard_normal()).collect())
            .unwrap();
        let y = (0..n).map(|_| rng.standard_normal()).collect();
        (x, y)
    }

    #[test]
    fn preprocess_matches_construction() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = vec![7.0, 8.0];
        let s = preprocess_pairs(&x, &y).unwrap();
        assert_eq!(s.shape(), &[2, 3, 2]);
        assert_eq!(
            s.data(),
            &[1.0, 7.0, 2.0, 7.0, 3.0, 7.0, 4.0, 8.0, 5.0, 8.0, 6.0, 8.0]
        );
    }

    #[test]
    fn preprocess_single_dimension() {
        let x = Tensor::from_vec(&[2, 1], vec![0.5, -0.5]).unwrap();
        let y = vec![1.0, 2.0];
        let s = preprocess_pairs(&x, &y).unwrap();
        assert_eq!(s.data(), &[0.5, 1.0, -0.5, 2.0]);
    }

    #[test]
    fn preprocess_row_permutation_permutes_first_axis() {
        let mut rng = Rng::new(70);
        let (x, y) = rand_xy(5, 3, &mut rng);
        let s = preprocess_pairs(&x, &y).unwrap();
        let perm = rng.permutation(5);
        let mut xp = Tensor::zeros(&[5, 3]);
        let mut yp = vec![0.0; 5];
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..3 {
                xp.set2(i, j, x.get2(p, j));
            }
            yp[i] = y[p];
        }
        let sp = preprocess_pairs(&xp, &yp).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(sp.data()[i * 6..(i + 1) * 6], s.data()[p * 6..(p + 1) * 6]);
        }
    }

    #[test]
    fn time_embedding_values() {
        let e0 = embed_time::<f64>(0);
        assert_eq!(e0.numel(), TIME_EMBED_DIM);
        for i in 0..64 {
            assert_eq!(e0.data()[i], 0.0);
            assert_eq!(e0.data()[64 + i], 1.0);
        }
        let e1 = embed_time::<f64>(1);
        assert!((e1.data()[0] - 1f64.sin()).abs() < 1e-15);
        assert!((e1.data()[0] - 0.84147).abs() < 1e-5);
        for t in [0, 1, 5, 100, 500] {
            assert_eq!(embed_time::<f64>(t).numel(), 128);
        }
    }

    fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let (n, d) = (x.nrows(), x.ncols());
        let mut out = Tensor::zeros(&[n, d]);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..d {
                out.set2(i, j, x.get2(p, j));
            }
        }
        out
    }

    fn permute_cols(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let (n, d) = (x.nrows(), x.ncols());
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for (j, &p) in perm.iter().enumerate() {
                out.set2(i, j, x.get2(i, p));
            }
        }
        out
    }

    #[test]
    fn block_equivariance_both_axes() {
        let cfg = small_cfg();
        let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
        let block = &params.blocks[0];
        let mut rng = Rng::new(71);
        let (n, d, h) = (4, 3, cfg.embed_width);
        let s = Tensor::from_vec(
            &[n, d, h],
            (0..n * d * h).map(|_| rng.standard_normal()).collect(),
        )
        .unwrap();
        let t_emb: Vec<f64> = (0..h).map(|_| rng.standard_normal()).collect();
        let out = bidim_block_apply(&s, &t_emb, block).unwrap();

        // sequence-axis permutation
        let pn = rng.permutation(n);
        let mut sp = Tensor::zeros(&[n, d, h]);
        for (i, &p) in pn.iter().enumerate() {
            sp.data_mut()[i * d * h..(i + 1) * d * h]
                .copy_from_slice(&s.data()[p * d * h..(p + 1) * d * h]);
        }
        let out_p = bidim_block_apply(&sp, &t_emb, block).unwrap();
        for (i, &p) in pn.iter().enumerate() {
            for j in 0..d * h {
                assert!((out_p.data()[i * d * h + j] - out.data()[p * d * h + j]).abs() <= 1e-10);
            }
        }

        // dimension-axis permutation
        let pd = rng.permutation(d);
        let mut sd = Tensor::zeros(&[n, d, h]);
        for i in 0..n {
            for (j, &p) in pd.iter().enumerate() {
                let dst = (i * d + j) * h;
                let src = (i * d + p) * h;
                sd.data_mut()[dst..dst + h].copy_from_slice(&s.data()[src..src + h]);
            }
        }
        let out_d = bidim_block_apply(&sd, &t_emb, block).unwrap();
        for i in 0..n {
            for (j, &p) in pd.iter().enumerate() {
                for c in 0..h {
                    let a = out_d.data()[(i * d + j) * h + c];
                    let b = out.data()[(i * d + p) * h + c];
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn block_axis_permutations_commute() {
        let cfg = small_cfg();
        let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
        let block = &params.blocks[1];
        let mut rng = Rng::new(72);
        let (n, d, h) = (3, 4, cfg.embed_width);
        let s = Tensor::from_vec(
            &[n, d, h],
            (0..n * d * h).map(|_| rng.standard_normal()).collect(),
        )
        .unwrap();
        let t_emb: Vec<f64> = (0..h).map(|_| rng.standard_normal()).collect();
        let pn = rng.permutation(n);
        let pd = rng.permutation(d);
        let apply_pn = |x: &Tensor<f64>| {
            let mut out = Tensor::zeros(&[n, d, h]);
            for (i, &p) in pn.iter().enumerate() {
                out.data_mut()[i * d * h..(i + 1) * d * h]
                    .copy_from_slice(&x.data()[p * d * h..(p + 1) * d * h]);
            }
            out
        };
        let apply_pd = |x: &Tensor<f64>| {
            let mut out = Tensor::zeros(&[n, d, h]);
            for i in 0..n {
                for (j, &p) in pd.iter().enumerate() {
                    let dst = (i * d + j) * h;
                    let src = (i * d + p) * h;
                    out.data_mut()[dst..dst + h].copy_from_slice(&x.data()[src..src + h]);
                }
            }
            out
        };
        let a = bidim_block_apply(&apply_pd(&apply_pn(&s)), &t_emb, block).unwrap();
        let b = bidim_block_apply(&apply_pn(&apply_pd(&s)), &t_emb, block).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn noise_model_symmetry_contracts() {
        let cfg = small_cfg();
        let params = ModelParams::<f64>::init(&cfg, 5).unwrap();
        let mut rng = Rng::new(73);
        let (n, d) = (5, 3);
        let (x, y) = rand_xy(n, d, &mut rng);
        let (ex, ey) = predict_noise(&x, &y, 4, &params, &cfg).unwrap();

        // column shuffle: eps_y invariant, eps_x columns shuffled
        let pd = rng.permutation(d);
        let xd = permute_cols(&x, &pd);
        let (ex_d, ey_d) = predict_noise(&xd, &y, 4, &params, &cfg).unwrap();
        for (a, b) in ey_d.iter().zip(&ey) {
            assert!((a - b).abs() <= 1e-10);
        }
        for i in 0..n {
            for (j, &p) in pd.iter().enumerate() {
                assert!((ex_d.get2(i, j) - ex.get2(i, p)).abs() <= 1e-10);
            }
        }

        // row shuffle: both outputs row-shuffled
        let pn = rng.permutation(n);
        let xn = permute_rows(&x, &pn);
        let yn: Vec<f64> = pn.iter().map(|&p| y[p]).collect();
        let (ex_n, ey_n) = predict_noise(&xn, &yn, 4, &params, &cfg).unwrap();
        for (i, &p) in pn.iter().enumerate() {
            assert!((ey_n[i] - ey[p]).abs() <= 1e-10);
            for j in 0..d {
                assert!((ex_n.get2(i, j) - ex.get2(p, j)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn shape_agnostic_evaluation() {
        let cfg = small_cfg();
        let params = ModelParams::<f64>::init(&cfg, 6).unwrap();
        let mut rng = Rng::new(74);
        for (n, d) in [(10, 2), (17, 5), (1, 1)] {
            let (x, y) = rand_xy(n, d, &mut rng);
            let (ex, ey) = predict_noise(&x, &y, 2, &params, &cfg).unwrap();
            assert_eq!(ex.shape(), &[n, d]);
            assert_eq!(ey.len(), n);
            assert!(ex.all_finite());
        }
    }

    #[test]
    fn weights_do_not_depend_on_data_shape() {
        let cfg = small_cfg();
        let params = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let before = params.num_scalars();
        let mut rng = Rng::new(75);
        let (x, y) = rand_xy(9, 4, &mut rng);
        predict_noise(&x, &y, 1, &params, &cfg).unwrap();
        let (x, y) = rand_xy(3, 1, &mut rng);
        predict_noise(&x, &y, 1, &params, &cfg).unwrap();
        assert_eq!(params.num_scalars(), before);
    }

    #[test]
    fn deterministic_given_inputs() {
        let cfg = small_cfg();
        let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
        let mut rng = Rng::new(76);
        let (x, y) = rand_xy(6, 2, &mut rng);
        let (ex1, ey1) = predict_noise(&x, &y, 3, &params, &cfg).unwrap();
        let (ex2, ey2) = predict_noise(&x, &y, 3, &params, &cfg).unwrap();
        assert_eq!(ex1, ex2);
        assert_eq!(ey1, ey2);
    }

    #[test]
    fn batched_matches_single() {
        let cfg = small_cfg();
        let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let mut rng = Rng::new(77);
        let (n, d, b) = (4, 2, 3);
        let xb = Tensor::from_vec(
            &[b, n, d],
            (0..b * n * d).map(|_| rng.standard_normal()).collect(),
        )
        .unwrap();
        let yb =
            Tensor::from_vec(&[b, n], (0..b * n).map(|_| rng.standard_normal()).collect()).unwrap();
        let ts = [1usize, 5, 9];
        let (ex, ey) = predict_noise_batch(&xb, &yb, &ts, &params, &cfg).unwrap();
        for bi in 0..b {
            let x = Tensor::from_vec(&[n, d], xb.data()[bi * n * d..(bi + 1) * n * d].to_vec())
                .unwrap();
            let y = yb.data()[bi * n..(bi + 1) * n].to_vec();
            let (ex1, ey1) = predict_noise(&x, &y, ts[bi], &params, &cfg).unwrap();
            for i in 0..n {
                assert!((ey.data()[bi * n + i] - ey1[i]).abs() < 1e-12);
                for j in 0..d {
                    assert!(
                        (ex.data()[(bi * n + i) * d + j] - ex1.get2(i, j)).abs() < 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn out_of_range_step_rejected() {
        let cfg = small_cfg();
        let params = ModelParams::<f64>::init(&cfg, 10).unwrap();
        let mut rng = Rng::new(78);
        let (x, y) = rand_xy(2, 1, &mut rng);
        assert!(predict_noise(&x, &y, 11, &params, &cfg).is_err());
    }
}
