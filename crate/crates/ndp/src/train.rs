//! Training objective and loop over streamed synthetic GP batches.

use crate::autodiff::{Tape, Var};
use crate::error::{NdpError, Result};
use crate::gp::{self, FunctionDraw, InputMode, KernelSpec, LengthscalePrior};
use crate::model::{forward_graph, ModelConfig, ModelParams, ModelVars};
use crate::optim::{adam_update, lr_at, AdamHyper, AdamState, LrSchedule};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};

const TAG_DATA: u64 = 0x44415441; // "DATA"
const TAG_STEP: u64 = 0x53544550; // "STEP"

/// Pointwise training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean absolute error (the experimental default).
    L1,
    /// Mean squared error.
    L2,
}

/// Pre-drawn corruption noise and per-dataset diffusion steps.
#[derive(Clone, Debug)]
pub struct NoiseDraws<T> {
    /// `[B, N, D]` standard normal.
    pub eps_x: Tensor<T>,
    /// `[B, N]` standard normal.
    pub eps_y: Tensor<T>,
    /// One step per dataset, each in 1..=T.
    pub ts: Vec<usize>,
}

impl<T: Scalar> NoiseDraws<T> {
    pub fn sample(b: usize, n: usize, d: usize, timesteps: usize, rng: &mut Rng) -> Self {
        let eps_x = Tensor::from_vec(
            &[b, n, d],
            (0..b * n * d).map(|_| T::from_f64(rng.standard_normal())).collect(),
        )
        .expect("noise shape");
        let eps_y = Tensor::from_vec(
            &[b, n],
            (0..b * n).map(|_| T::from_f64(rng.standard_normal())).collect(),
        )
        .expect("noise shape");
        let ts = (0..b).map(|_| 1 + rng.below(timesteps)).collect();
        NoiseDraws { eps_x, eps_y, ts }
    }
}

/// Everything the training loop needs besides the architecture.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub points_per_dataset: usize,
    pub dimension: usize,
    pub loss: LossKind,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub kernel: KernelSpec,
    pub lengthscale_prior: LengthscalePrior,
    pub input_mode: InputMode,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples_per_epoch % self.batch_size != 0 {
            return Err(NdpError::ConfigInvalid(format!(
                "batch size {} must divide samples_per_epoch {}",
                self.batch_size, self.samples_per_epoch
            )));
        }
        if self.points_per_dataset < 2 {
            return Err(NdpError::ConfigInvalid(format!(
                "points_per_dataset {} must be >= 2",
                self.points_per_dataset
            )));
        }
        if self.kernel.dim() != self.dimension {
            return Err(NdpError::ConfigInvalid(format!(
                "kernel has {} lengthscales but dimension is {}",
                self.kernel.dim(),
                self.dimension
            )));
        }
        self.kernel.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch / self.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: (self.warmup_epochs * self.steps_per_epoch()) as u64,
            total_steps: self.total_steps().max(1) as u64,
            lr_max: self.lr_max,
        }
    }
}

/// One row of the loss trace.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct TrainOutput<T: Scalar> {
    pub params: ModelParams<T>,
    pub opt_state: AdamState<T>,
    pub trace: Vec<StepRecord>,
}

fn loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    x0: &Tensor<T>,
    y0: &Tensor<T>,
    draws: &NoiseDraws<T>,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    kind: LossKind,
) -> Result<Var> {
    let (b, n, d) = (x0.shape()[0], x0.shape()[1], x0.shape()[2]);
    if y0.shape() != [b, n] || draws.eps_x.shape() != [b, n, d] || draws.ts.len() != b {
        return Err(NdpError::ShapeMismatch {
            op: "diffusion_loss",
            detail: format!(
                "x0 {:?}, y0 {:?}, eps_x {:?}, {} steps",
                x0.shape(),
                y0.shape(),
                draws.eps_x.shape(),
                draws.ts.len()
            ),
        });
    }

    // corrupt to the per-dataset step (pure data, outside the graph)
    let mut x_t = x0.clone();
    let mut y_t = y0.clone();
    for (bi, &t) in draws.ts.iter().enumerate() {
        let a = T::from_f64(sched.alpha_bar(t).sqrt());
        let g = T::from_f64(sched.gamma(t));
        if !cfg.deterministic_inputs {
            let xs = &mut x_t.data_mut()[bi * n * d..(bi + 1) * n * d];
            for (v, &e) in xs.iter_mut().zip(&draws.eps_x.data()[bi * n * d..(bi + 1) * n * d]) {
                *v = a * *v + g * e;
            }
        }
        let ys = &mut y_t.data_mut()[bi * n..(bi + 1) * n];
        for (v, &e) in ys.iter_mut().zip(&draws.eps_y.data()[bi * n..(bi + 1) * n]) {
            *v = a * *v + g * e;
        }
    }

    let (eps_x_hat, eps_y_hat) = forward_graph(tape, vars, &x_t, &y_t, &draws.ts, cfg)?;

    let penalty = |tape: &mut Tape<T>, v: Var| match kind {
        LossKind::L1 => tape.abs(v),
        LossKind::L2 => tape.square(v),
    };

    let target_y = tape.constant(Tensor::from_vec(&[b, n, 1, 1], draws.eps_y.data().to_vec())?);
    let res_y = tape.sub(eps_y_hat, target_y)?;
    let res_y = penalty(tape, res_y);
    let sum_y = tape.sum_all(res_y);

    if cfg.deterministic_inputs {
        let count = T::from_f64((b * n) as f64);
        Ok(tape.scale(sum_y, T::one() / count))
    } else {
        let target_x =
            tape.constant(Tensor::from_vec(&[b, n, d, 1], draws.eps_x.data().to_vec())?);
        let res_x = tape.sub(eps_x_hat, target_x)?;
        let res_x = penalty(tape, res_x);
        let sum_x = tape.sum_all(res_x);
        let total = tape.add(sum_x, sum_y)?;
        let count = T::from_f64((b * (n * d + n)) as f64);
        Ok(tape.scale(total, T::one() / count))
    }
}

/// Per-element mean of the noise-prediction residuals over the batch.
pub fn diffusion_loss<T: Scalar>(
    x0: &Tensor<T>,
    y0: &Tensor<T>,
    draws: &NoiseDraws<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    kind: LossKind,
) -> Result<T> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params, false);
    let loss = loss_graph(&mut tape, &vars, x0, y0, draws, cfg, sched, kind)?;
    let v = tape.value(loss).item();
    if !v.as_f64().is_finite() {
        return Err(NdpError::NonFinite { context: "diffusion loss".into(), value: v.as_f64() });
    }
    Ok(v)
}

/// Loss plus exact gradients in [`ModelParams::named`] order.
pub fn diffusion_loss_and_grad<T: Scalar>(
    x0: &Tensor<T>,
    y0: &Tensor<T>,
    draws: &NoiseDraws<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    kind: LossKind,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params, true);
    let loss = loss_graph(&mut tape, &vars, x0, y0, draws, cfg, sched, kind)?;
    let v = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((v, grads))
}

/// Convert a slice of equally-sized function draws to batch tensors.
pub fn batch_from_draws<T: Scalar>(draws: &[FunctionDraw]) -> Result<(Tensor<T>, Tensor<T>)> {
    if draws.is_empty() {
        return Err(NdpError::InvalidArgument("empty batch".into()));
    }
    let n = draws[0].len();
    let d = draws[0].dim();
    let b = draws.len();
    let mut x = Tensor::zeros(&[b, n, d]);
    let mut y = Tensor::zeros(&[b, n]);
    for (bi, draw) in draws.iter().enumerate() {
        if draw.len() != n || draw.dim() != d {
            return Err(NdpError::ShapeMismatch {
                op: "batch_from_draws",
                detail: format!(
                    "dataset {bi} is {}x{}, expected {n}x{d}",
                    draw.len(),
                    draw.dim()
                ),
            });
        }
        for (v, s) in x.data_mut()[bi * n * d..(bi + 1) * n * d].iter_mut().zip(draw.x.data()) {
            *v = T::from_f64(*s);
        }
        for (v, s) in y.data_mut()[bi * n..(bi + 1) * n].iter_mut().zip(&draw.y) {
            *v = T::from_f64(*s);
        }
    }
    Ok((x, y))
}

/// One optimiser step on a prepared batch: draws noise and per-dataset
/// diffusion steps from `rng`, then applies Adam at the given rate.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut AdamState<T>,
    x0: &Tensor<T>,
    y0: &Tensor<T>,
    lr: f64,
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    kind: LossKind,
    rng: &mut Rng,
) -> Result<f64> {
    let (b, n, d) = (x0.shape()[0], x0.shape()[1], x0.shape()[2]);
    let draws = NoiseDraws::<T>::sample(b, n, d, sched.timesteps(), rng);
    let (loss, grads) = diffusion_loss_and_grad(x0, y0, &draws, params, cfg, sched, kind)?;
    if lr > 0.0 {
        let mut tensors: Vec<&mut Tensor<T>> =
            params.named_mut().into_iter().map(|(_, t)| t).collect();
        adam_update(&mut tensors, &grads, opt, lr)?;
    }
    Ok(loss.as_f64())
}

/// One synthetic batch: a shared kernel-hyperparameter draw, then
/// `batch_size` independent GP datasets.
pub fn generate_batch(settings: &TrainSettings, step: usize) -> Result<Vec<FunctionDraw>> {
    let base = Rng::new(settings.seed).derive(TAG_DATA).derive(step as u64);
    let kernel = settings.lengthscale_prior.sample(&settings.kernel, &mut base.derive(0));
    let shared_inputs = matches!(settings.input_mode, InputMode::Grid);
    let mut shared: Option<(Tensor<f64>, Tensor<f64>)> = None;
    if shared_inputs {
        let mut r = base.derive(1);
        let x =
            gp::sample_inputs(settings.points_per_dataset, settings.dimension, settings.input_mode, &mut r)?;
        let l = gp::prior_cholesky(&x, &kernel)?;
        shared = Some((x, l));
    }
    (0..settings.batch_size)
        .map(|bi| {
            let mut r = base.derive(2 + bi as u64);
            match &shared {
                Some((x, l)) => {
                    let y = gp::draw_with_cholesky(l, &mut r);
                    FunctionDraw::new(x.clone(), y)
                }
                None => {
                    let x = gp::sample_inputs(
                        settings.points_per_dataset,
                        settings.dimension,
                        settings.input_mode,
                        &mut r,
                    )?;
                    gp::sample_prior_function(&x, &kernel, &mut r)
                }
            }
        })
        .collect()
}

/// Full training run; `on_step` fires after every optimiser step.
pub fn train_with_callback<T: Scalar>(
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    settings: &TrainSettings,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    settings.validate()?;
    if sched.timesteps() != cfg.timesteps {
        return Err(NdpError::ConfigInvalid(format!(
            "schedule T = {} does not match model T = {}",
            sched.timesteps(),
            cfg.timesteps
        )));
    }
    let mut params = ModelParams::<T>::init(cfg, settings.seed)?;
    let mut opt = {
        let named = params.named();
        let refs: Vec<&Tensor<T>> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs, AdamHyper::default())
    };
    let lr_cfg = settings.lr_schedule();
    let steps_per_epoch = settings.steps_per_epoch();
    let mut trace = Vec::with_capacity(settings.total_steps());

    for step in 0..settings.total_steps() {
        let epoch = step / steps_per_epoch;
        let batch = generate_batch(settings, step)?;
        let (x0, y0) = batch_from_draws::<T>(&batch)?;
        let lr = lr_at(step as u64, &lr_cfg);
        let mut rng = Rng::new(settings.seed).derive(TAG_STEP).derive(step as u64);
        let loss = train_step(
            &mut params,
            &mut opt,
            &x0,
            &y0,
            lr,
            cfg,
            sched,
            settings.loss,
            &mut rng,
        )?;
        let rec = StepRecord { step, epoch, lr, loss };
        on_step(&rec);
        trace.push(rec);
    }
    Ok(TrainOutput { params, opt_state: opt, trace })
}

/// Full training run per the settings; returns final params and loss trace.
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    sched: &NoiseSchedule,
    settings: &TrainSettings,
) -> Result<TrainOutput<T>> {
    train_with_callback(cfg, sched, settings, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::KernelFamily;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_width: 16,
            num_blocks: 2,
            num_heads: 4,
            timesteps: 20,
            deterministic_inputs: false,
            head_depth: 1,
        }
    }

    fn tiny_settings(seed: u64) -> TrainSettings {
        TrainSettings {
            epochs: 1,
            samples_per_epoch: 16,
            batch_size: 8,
            points_per_dataset: 12,
            dimension: 1,
            loss: LossKind::L1,
            lr_max: 1e-3,
            warmup_epochs: 0,
            kernel: KernelSpec::new(KernelFamily::SquaredExponential, vec![0.2], 1.0, 1e-6)
                .unwrap(),
            lengthscale_prior: LengthscalePrior::Fixed,
            input_mode: InputMode::UniformRandom,
            seed,
        }
    }

    fn random_batch(b: usize, n: usize, d: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_vec(
            &[b, n, d],
            (0..b * n * d).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let y =
            Tensor::from_vec(&[b, n], (0..b * n).map(|_| rng.standard_normal()).collect()).unwrap();
        (x, y)
    }

    #[test]
    fn loss_zero_at_perfect_prediction() {
        // with zero noise scale the residual targets equal the model output
        // only in the trivial L2 sense; instead check directly: eps == model
        // output gives zero by constructing draws equal to the prediction.
        let cfg = tiny_cfg();
        let sched = NoiseSchedule::cosine(cfg.timesteps).unwrap();
        let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        let (x0, y0) = random_batch(2, 5, 1, 2);
        let mut rng = Rng::new(3);
        let mut draws = NoiseDraws::<f64>::sample(2, 5, 1, cfg.timesteps, &mut rng);
        // corrupt, predict, then substitute predictions as the "true" noise
        let (b, n, d) = (2, 5, 1);
        let mut x_t = x0.clone();
        let mut y_t = y0.clone();
        for bi in 0..b {
            let t = draws.ts[bi];
            let a = sched.alpha_bar(t).sqrt();
            let g = sched.gamma(t);
            for i in 0..n * d {
                let idx = bi * n * d + i;
                x_t.data_mut()[idx] = a * x0.data()[idx] + g * draws.eps_x.data()[idx];
            }
            for i in 0..n {
                let idx = bi * n + i;
                y_t.data_mut()[idx] = a * y0.data()[idx] + g * draws.eps_y.data()[idx];
            }
        }
        for bi in 0..b {
            let x = Tensor::from_vec(&[n, d], x_t.data()[bi * n * d..(bi + 1) * n * d].to_vec())
                .unwrap();
            let y = y_t.data()[bi * n..(bi + 1) * n].to_vec();
            let (ex, ey) = crate::model::predict_noise(&x, &y, draws.ts[bi], &params, &cfg).unwrap();
            // recompute x0/y0 so that the drawn eps equals the prediction
            let t = draws.ts[bi];
            let a = sched.alpha_bar(t).sqrt();
            let g = sched.gamma(t);
            for i in 0..n * d {
                let idx = bi * n * d + i;
                draws.eps_x.data_mut()[idx] = ex.data()[i];
                // x0 = (x_t - g eps)/a
                let v = (x_t.data()[idx] - g * ex.data()[i]) / a;
                // write back into a copy of x0
                let _ = v;
            }
            for i in 0..n {
                draws.eps_y.data_mut()[bi * n + i] = ey[i];
            }
        }
        // rebuild x0/y0 consistent with the substituted noise
        let mut x0b = x_t.clone();
        let mut y0b = y_t.clone();
        for bi in 0..b {
            let t = draws.ts[bi];
            let a = sched.alpha_bar(t).sqrt();
            let g = sched.gamma(t);
            for i in 0..n * d {
                let idx = bi * n * d + i;
                x0b.data_mut()[idx] = (x_t.data()[idx] - g * draws.eps_x.data()[idx]) / a;
            }
            for i in 0..n {
                let idx = bi * n + i;
                y0b.data_mut()[idx] = (y_t.data()[idx] - g * draws.eps_y.data()[idx]) / a;
            }
        }
        let loss =
            diffusion_loss(&x0b, &y0b, &draws, &params, &cfg, &sched, LossKind::L1).unwrap();
        assert!(loss.abs() < 1e-9, "loss {loss}");
    }

    #[test]
    fn l1_loss_of_zero_network_is_half_normal_mean() {
        // an untrained network output is not zero, so zero the heads: with
        // zero output the residual is exactly the drawn noise.
        let cfg = tiny_cfg();
        let sched = NoiseSchedule::cosine(cfg.timesteps).unwrap();
        let mut params = ModelParams::<f64>::init(&cfg, 4).unwrap();
        for layer in params.x_head.iter_mut().chain(params.y_head.iter_mut()) {
            layer.weights = Tensor::zeros(layer.weights.shape());
            layer.bias = Tensor::zeros(layer.bias.shape());
        }
        // ~1e5 residual elements: B=100 datasets x (N*D + N) with N=500
        let (b, n, d) = (100, 500, 1);
        let (x0, y0) = random_batch(b, n, d, 5);
        let mut rng = Rng::new(6);
        let draws = NoiseDraws::<f64>::sample(b, n, d, cfg.timesteps, &mut rng);
        let loss = diffusion_loss(&x0, &y0, &draws, &params, &cfg, &sched, LossKind::L1).unwrap();
        let expect = (2.0 / std::f64::consts::PI).sqrt();
        assert!((loss - expect).abs() < 0.01, "loss {loss} vs {expect}");
    }

    #[test]
    fn deterministic_inputs_ignore_x_head() {
        let mut cfg = tiny_cfg();
        cfg.deterministic_inputs = true;
        let sched = NoiseSchedule::cosine(cfg.timesteps).unwrap();
        let mut params = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let (x0, y0) = random_batch(3, 6, 2, 8);
        let mut rng = Rng::new(9);
        let draws = NoiseDraws::<f64>::sample(3, 6, 2, cfg.timesteps, &mut rng);
        let loss1 = diffusion_loss(&x0, &y0, &draws, &params, &cfg, &sched, LossKind::L1).unwrap();
        for layer in params.x_head.iter_mut() {
            layer.weights = layer.weights.map(|v| v + 10.0);
            layer.bias = layer.bias.map(|v| v - 3.0);
        }
        let loss2 = diffusion_loss(&x0, &y0, &draws, &params, &cfg, &sched, LossKind::L1).unwrap();
        assert_eq!(loss1, loss2);

        // and the x-head gradient is exactly zero
        let (_, grads) =
            diffusion_loss_and_grad(&x0, &y0, &draws, &params, &cfg, &sched, LossKind::L1)
                .unwrap();
        let named = params.named();
        for (i, (name, _)) in named.iter().enumerate() {
            if name.starts_with("x_head") {
                assert!(grads[i].max_abs() == 0.0, "{name} grad nonzero");
            }
        }
    }

    #[test]
    fn loss_invariant_to_joint_row_permutation() {
        let cfg = tiny_cfg();
        let sched = NoiseSchedule::cosine(cfg.timesteps).unwrap();
        let params = ModelParams::<f64>::init(&cfg, 10).unwrap();
        let (b, n, d) = (2, 7, 2);
        let (x0, y0) = random_batch(b, n, d, 11);
        let mut rng = Rng::new(12);
        let draws = NoiseDraws::<f64>::sample(b, n, d, cfg.timesteps, &mut rng);
        let loss = diffusion_loss(&x0, &y0, &draws, &params, &cfg, &sched, LossKind::L1).unwrap();

        let perm = rng.permutation(n);
        let permute_bnd = |t: &Tensor<f64>, width: usize| {
            let mut out = t.clone();
            for bi in 0..b {
                for (i, &p) in perm.iter().enumerate() {
                    let dst = (bi * n + i) * width;
                    let src = (bi * n + p) * width;
                    let row = t.data()[src..src + width].to_vec();
                    out.data_mut()[dst..dst + width].copy_from_slice(&row);
                }
            }
            out
        };
        let x0p = permute_bnd(&x0, d);
        let y0p = permute_bnd(&y0, 1);
        let draws_p = NoiseDraws {
            eps_x: permute_bnd(&draws.eps_x, d),
            eps_y: permute_bnd(&draws.eps_y, 1),
            ts: draws.ts.clone(),
        };
        let loss_p =
            diffusion_loss(&x0p, &y0p, &draws_p, &params, &cfg, &sched, LossKind::L1).unwrap();
        assert!((loss - loss_p).abs() <= 1e-6, "{loss} vs {loss_p}");
    }

    #[test]
    fn train_step_deterministic_for_fixed_seed() {
        let cfg = tiny_cfg();
        let sched = NoiseSchedule::cosine(cfg.timesteps).unwrap();
        let settings = tiny_settings(13);
        let run = |seed: u64| -> Vec<f32> {
            let out = train::<f32>(&cfg, &sched, &settings).unwrap();
            let _ = seed;
            out.params.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
        };
        let a = run(13);
        let b = run(13);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let cfg = tiny_cfg();
        let sched = NoiseSchedule::cosine(cfg.timesteps).unwrap();
        let mut params = ModelParams::<f64>::init(&cfg, 14).unwrap();
        let before: Vec<f64> =
            params.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let mut opt = {
            let named = params.named();
            let refs: Vec<&Tensor<f64>> = named.iter().map(|(_, t)| *t).collect();
            AdamState::new(&refs, AdamHyper::default())
        };
        let (x0, y0) = random_batch(2, 5, 1, 15);
        let mut rng = Rng::new(16);
        train_step(&mut params, &mut opt, &x0, &y0, 0.0, &cfg, &sched, LossKind::L1, &mut rng)
            .unwrap();
        let after: Vec<f64> = params.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_epochs_returns_initial_params_and_empty_trace() {
        let cfg = tiny_cfg();
        let sched = NoiseSchedule::cosine(cfg.timesteps).unwrap();
        let mut settings = tiny_settings(17);
        settings.epochs = 0;
        let out = train::<f64>(&cfg, &sched, &settings).unwrap();
        assert!(out.trace.is_empty());
        let init = ModelParams::<f64>::init(&cfg, 17).unwrap();
        let a: Vec<f64> = out.params.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let b: Vec<f64> = init.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn smoke_train_two_hundred_steps_reduces_loss() {
        let cfg = tiny_cfg();
        let sched = NoiseSchedule::cosine(cfg.timesteps).unwrap();
        let mut settings = tiny_settings(18);
        settings.epochs = 25; // 25 epochs x 16/8 = 50... bump for 200 steps
        settings.samples_per_epoch = 64;
        settings.batch_size = 8;
        // 25 * 8 = 200 steps
        settings.lr_max = 3e-3;
        settings.warmup_epochs = 2;
        let out = train::<f32>(&cfg, &sched, &settings).unwrap();
        assert_eq!(out.trace.len(), 200);
        let first: f64 = out.trace[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let last: f64 = out.trace[180..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(last < first, "loss did not improve: first {first} last {last}");
    }

    #[test]
    fn batches_share_kernel_draw() {
        let mut settings = tiny_settings(19);
        settings.lengthscale_prior = LengthscalePrior::LogNormal {
            mu_log: 0.5f64.ln(),
            sigma_log: 0.5f64.sqrt(),
            per_dimension: true,
        };
        settings.input_mode = InputMode::Grid;
        let batch = generate_batch(&settings, 0).unwrap();
        assert_eq!(batch.len(), settings.batch_size);
        // same grid inputs across the batch
        for d in &batch[1..] {
            assert_eq!(d.x, batch[0].x);
        }
        // different steps draw different kernels: compare dataset smoothness
        let b2 = generate_batch(&settings, 1).unwrap();
        assert_ne!(batch[0].y, b2[0].y);
    }
}
