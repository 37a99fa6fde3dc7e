//! Reverse-process machinery: the backward kernel, prior sampling, and
//! conditional sampling by in-painting with resampling.
//!
//! Conditional noise is drawn from counter-keyed streams indexed by
//! (sample, point identity, channel, t, u, purpose), with context points
//! keyed by their payload bits and canonically ordered, so reordering the
//! context cannot change the result — see the exchangeability test.

use crate::error::{NdpError, Result};
use crate::gp::FunctionDraw;
use crate::model::{predict_noise, predict_noise_batch, ModelConfig, ModelParams};
use crate::rng::{bits_tag, Rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Scalar, Tensor};

const TAG_PRIOR: u64 = 0x5052494f; // "PRIO"
const TAG_COND: u64 = 0x434f4e44; // "COND"
const TAG_CTX_POINT: u64 = 0x43505431;
const TAG_TARGET_POINT: u64 = 0x54505431;

const PURPOSE_INIT: u64 = 0;
const PURPOSE_BACKWARD: u64 = 1;
const PURPOSE_CTX_FORWARD: u64 = 2;
const PURPOSE_REDIFFUSE: u64 = 3;

/// Observed (x, y) pairs that conditional sampling clamps.
#[derive(Clone, Debug)]
pub struct Context {
    pub x: Tensor<f64>,
    pub y: Vec<f64>,
}

impl Context {
    pub fn new(x: Tensor<f64>, y: Vec<f64>) -> Result<Self> {
        if x.rank() != 2 || x.nrows() != y.len() {
            return Err(NdpError::ShapeMismatch {
                op: "context",
                detail: format!("x {:?} vs y len {}", x.shape(), y.len()),
            });
        }
        if x.first_non_finite().is_some() || y.iter().any(|v| !v.is_finite()) {
            return Err(NdpError::InvalidArgument("context contains non-finite values".into()));
        }
        Ok(Context { x, y })
    }

    pub fn empty(d: usize) -> Self {
        Context { x: Tensor::zeros(&[0, d]), y: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Context plus one more observation.
    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(NdpError::ShapeMismatch {
                op: "context",
                detail: format!("point dim {} vs context dim {}", x.len(), self.dim()),
            });
        }
        let mut data = self.x.data().to_vec();
        data.extend_from_slice(x);
        self.x = Tensor::from_vec(&[self.len() + 1, self.dim()], data)?;
        self.y.push(y);
        Ok(())
    }

    pub fn to_function_draw(&self) -> FunctionDraw {
        FunctionDraw::new(self.x.clone(), self.y.clone()).expect("context shapes agree")
    }
}

/// Per-target channel mask: `Some` marks a known channel that is clamped to
/// its forward-diffused value; `None` channels are sampled.
#[derive(Clone, Debug)]
pub struct TargetSpec {
    pub x: Vec<Option<f64>>,
    pub y: Option<f64>,
}

impl TargetSpec {
    /// All channels unknown.
    pub fn free(d: usize) -> Self {
        TargetSpec { x: vec![None; d], y: None }
    }

    /// Known input location, unknown output.
    pub fn at(x: &[f64]) -> Self {
        TargetSpec { x: x.iter().map(|&v| Some(v)).collect(), y: None }
    }

    /// Known output value, unknown location.
    pub fn with_y(d: usize, y: f64) -> Self {
        TargetSpec { x: vec![None; d], y: Some(y) }
    }

    fn fully_unknown(&self) -> bool {
        self.y.is_none() && self.x.iter().all(Option::is_none)
    }
}

/// Targets with known locations at the rows of `x`.
pub fn targets_at(x: &Tensor<f64>) -> Vec<TargetSpec> {
    (0..x.nrows()).map(|i| TargetSpec::at(x.row(i))).collect()
}

/// Backward-kernel variance parameterisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceForm {
    /// `beta_tilde_t = (gamma_{t-1}^2 / gamma_t^2) beta_t` (the default).
    TildeBeta,
    /// `(gamma_t^2 / gamma_{t-1}^2) beta_t`, which diverges at t = 1.
    Eq4AsWritten,
}

/// Sampler knobs.
#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    /// Inner resampling iterations U per diffusion step.
    pub resample_count: usize,
    /// Make the final (t = 1) backward step deterministic.
    pub clamp_final_step: bool,
    pub variance_form: VarianceForm,
    /// Default number of target points for CLI sampling.
    pub num_targets: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            resample_count: 5,
            clamp_final_step: true,
            variance_form: VarianceForm::TildeBeta,
            num_targets: 64,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resample_count == 0 {
            return Err(NdpError::ConfigInvalid("resample_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean coefficients of the backward kernel at step t:
/// `mean = c1 (state - c2 eps_hat)`.
fn backward_coeffs(t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let beta = sched.beta(t);
    (1.0 / (1.0 - beta).sqrt(), beta / sched.gamma(t))
}

/// Backward-kernel standard deviation at step t (zero when deterministic).
fn backward_sigma(t: usize, sched: &NoiseSchedule, cfg: &SamplerConfig) -> Result<f64> {
    if t == 1 && cfg.clamp_final_step {
        return Ok(0.0);
    }
    let beta = sched.beta(t);
    let (g_prev, g) = (sched.gamma(t - 1), sched.gamma(t));
    match cfg.variance_form {
        VarianceForm::TildeBeta => Ok((g_prev * g_prev / (g * g) * beta).sqrt()),
        VarianceForm::Eq4AsWritten => {
            if t == 1 {
                return Err(NdpError::InvalidArgument(
                    "eq4 variance is undefined at t = 1 (gamma_0 = 0); enable clamp_final_step"
                        .into(),
                ));
            }
            Ok((g * g / (g_prev * g_prev) * beta).sqrt())
        }
    }
}

/// One backward step on a single state. With a deterministic-inputs model
/// the inputs pass through unchanged and only y is denoised.
#[allow(clippy::too_many_arguments)]
pub fn backward_step<T: Scalar>(
    x_t: &Tensor<T>,
    y_t: &[T],
    t: usize,
    params: &ModelParams<T>,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Vec<T>)> {
    if t < 1 || t > sched.timesteps() {
        return Err(NdpError::InvalidArgument(format!(
            "backward step t = {t} out of range 1..={}",
            sched.timesteps()
        )));
    }
    let sigma = backward_sigma(t, sched, scfg)?;
    let (c1, c2) = backward_coeffs(t, sched);
    let (c1, c2, sig) = (T::from_f64(c1), T::from_f64(c2), T::from_f64(sigma));
    let (eps_x, eps_y) = predict_noise(x_t, y_t, t, params, mcfg)?;

    let mut x_prev = x_t.clone();
    if !mcfg.deterministic_inputs {
        for (v, &e) in x_prev.data_mut().iter_mut().zip(eps_x.data()) {
            let z = if sigma > 0.0 { T::from_f64(rng.standard_normal()) } else { T::zero() };
            *v = c1 * (*v - c2 * e) + sig * z;
        }
    }
    let y_prev = y_t
        .iter()
        .zip(&eps_y)
        .map(|(&v, &e)| {
            let z = if sigma > 0.0 { T::from_f64(rng.standard_normal()) } else { T::zero() };
            c1 * (v - c2 * e) + sig * z
        })
        .collect();
    Ok((x_prev, y_prev))
}

/// Input locations for prior sampling.
pub enum PriorInputs<'a> {
    /// Diffuse the inputs too (requires a jointly trained model).
    Diffused { n: usize, d: usize },
    /// Keep the given locations fixed and diffuse only the outputs.
    Fixed(&'a Tensor<f64>),
}

/// Draw function samples from the prior by running the reverse process from
/// white noise; samples share the chain in lockstep.
#[allow(clippy::too_many_arguments)]
pub fn sample_prior_many<T: Scalar>(
    inputs: PriorInputs<'_>,
    params: &ModelParams<T>,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    seed: u64,
    num_samples: usize,
) -> Result<Vec<FunctionDraw>> {
    sample_prior_impl(inputs, params, mcfg, sched, scfg, seed, num_samples, |_, _, _| {})
}

/// Single prior draw.
pub fn sample_prior<T: Scalar>(
    inputs: PriorInputs<'_>,
    params: &ModelParams<T>,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    seed: u64,
) -> Result<FunctionDraw> {
    Ok(sample_prior_many(inputs, params, mcfg, sched, scfg, seed, 1)?.remove(0))
}

/// Single prior draw recording the state after every step, for diagnostics.
pub fn sample_prior_trajectory<T: Scalar>(
    inputs: PriorInputs<'_>,
    params: &ModelParams<T>,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    seed: u64,
) -> Result<(FunctionDraw, Vec<(usize, FunctionDraw)>)> {
    let mut trace = Vec::new();
    let mut out = sample_prior_impl(inputs, params, mcfg, sched, scfg, seed, 1, |t, x, y| {
        trace.push((t, FunctionDraw::new(x.clone(), y.to_vec()).expect("state shapes")));
    })?;
    Ok((out.remove(0), trace))
}

#[allow(clippy::too_many_arguments)]
fn sample_prior_impl<T: Scalar>(
    inputs: PriorInputs<'_>,
    params: &ModelParams<T>,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    seed: u64,
    num_samples: usize,
    mut record: impl FnMut(usize, &Tensor<f64>, &[f64]),
) -> Result<Vec<FunctionDraw>> {
    scfg.validate()?;
    if sched.timesteps() != mcfg.timesteps {
        return Err(NdpError::ConfigInvalid(format!(
            "schedule T = {} does not match model T = {}",
            sched.timesteps(),
            mcfg.timesteps
        )));
    }
    let (n, d, fixed_x): (usize, usize, Option<&Tensor<f64>>) = match inputs {
        PriorInputs::Diffused { n, d } => {
            if mcfg.deterministic_inputs {
                return Err(NdpError::InvalidArgument(
                    "model was trained with fixed inputs; supply x0 to sample the prior".into(),
                ));
            }
            (n, d, None)
        }
        PriorInputs::Fixed(x) => (x.nrows(), x.ncols(), Some(x)),
    };
    if n == 0 || num_samples == 0 {
        return Ok(Vec::new());
    }
    let diffuse_x = fixed_x.is_none();
    let s = num_samples;
    let base = Rng::new(seed).derive(TAG_PRIOR);
    let mut rngs: Vec<Rng> = (0..s).map(|i| base.derive(i as u64)).collect();

    // initial white-noise state (x kept clean when fixed)
    let mut x = Tensor::<T>::zeros(&[s, n, d]);
    let mut y = Tensor::<T>::zeros(&[s, n]);
    for si in 0..s {
        let r = &mut rngs[si];
        for p in 0..n {
            for c in 0..d {
                let v = match fixed_x {
                    Some(fx) => T::from_f64(fx.get2(p, c)),
                    None => T::from_f64(r.standard_normal()),
                };
                x.data_mut()[(si * n + p) * d + c] = v;
            }
        }
        for p in 0..n {
            y.data_mut()[si * n + p] = T::from_f64(r.standard_normal());
        }
    }

    for t in (1..=sched.timesteps()).rev() {
        let sigma = backward_sigma(t, sched, scfg)?;
        let (c1, c2) = backward_coeffs(t, sched);
        let (c1t, c2t, sig) = (T::from_f64(c1), T::from_f64(c2), T::from_f64(sigma));
        let ts = vec![t; s];
        let (eps_x, eps_y) = predict_noise_batch(&x, &y, &ts, params, mcfg)?;
        for si in 0..s {
            let r = &mut rngs[si];
            if diffuse_x {
                for i in 0..n * d {
                    let idx = si * n * d + i;
                    let z =
                        if sigma > 0.0 { T::from_f64(r.standard_normal()) } else { T::zero() };
                    x.data_mut()[idx] = c1t * (x.data()[idx] - c2t * eps_x.data()[idx]) + sig * z;
                }
            }
            for i in 0..n {
                let idx = si * n + i;
                let z = if sigma > 0.0 { T::from_f64(r.standard_normal()) } else { T::zero() };
                y.data_mut()[idx] = c1t * (y.data()[idx] - c2t * eps_y.data()[idx]) + sig * z;
            }
        }
        if s == 1 {
            let xs = Tensor::from_vec(&[n, d], x.data().iter().map(|v| v.as_f64()).collect())?;
            let ys: Vec<f64> = y.data().iter().map(|v| v.as_f64()).collect();
            record(t - 1, &xs, &ys);
        }
    }

    (0..s)
        .map(|si| {
            let xs = Tensor::from_vec(
                &[n, d],
                x.data()[si * n * d..(si + 1) * n * d].iter().map(|v| v.as_f64()).collect(),
            )?;
            let ys = y.data()[si * n..(si + 1) * n].iter().map(|v| v.as_f64()).collect();
            FunctionDraw::new(xs, ys)
        })
        .collect()
}

/// Stable identity for a context point, derived from its payload bits.
fn payload_key(xs: &[f64], y: f64) -> u64 {
    let mut r = Rng::new(TAG_CTX_POINT);
    for &v in xs {
        r = r.derive(bits_tag(v));
    }
    r.derive(bits_tag(y)).derive(0).next_u64()
}

struct ChainPoint {
    key: u64,
    /// Known (clamped) channel values; x channels then y.
    known: Vec<Option<f64>>,
}

struct ChainLayout {
    points: Vec<ChainPoint>,
    num_targets: usize,
}

impl ChainLayout {
    fn build(ctx: &Context, targets: &[TargetSpec], d: usize) -> Result<Self> {
        // canonical context order: lexicographic on payload bits, so the
        // chain is independent of how the caller ordered the context
        let mut order: Vec<usize> = (0..ctx.len()).collect();
        order.sort_by(|&a, &b| {
            let ka: Vec<u64> = (0..d)
                .map(|c| ctx.x.get2(a, c).to_bits())
                .chain(std::iter::once(ctx.y[a].to_bits()))
                .collect();
            let kb: Vec<u64> = (0..d)
                .map(|c| ctx.x.get2(b, c).to_bits())
                .chain(std::iter::once(ctx.y[b].to_bits()))
                .collect();
            ka.cmp(&kb)
        });
        let mut points = Vec::with_capacity(ctx.len() + targets.len());
        for &i in &order {
            let xs: Vec<f64> = (0..d).map(|c| ctx.x.get2(i, c)).collect();
            let mut known: Vec<Option<f64>> = xs.iter().map(|&v| Some(v)).collect();
            known.push(Some(ctx.y[i]));
            points.push(ChainPoint { key: payload_key(&xs, ctx.y[i]), known });
        }
        for (i, t) in targets.iter().enumerate() {
            if t.x.len() != d {
                return Err(NdpError::ShapeMismatch {
                    op: "sample_conditional",
                    detail: format!("target {i} has {} x channels, expected {d}", t.x.len()),
                });
            }
            let mut known = t.x.clone();
            known.push(t.y);
            for v in known.iter().flatten() {
                if !v.is_finite() {
                    return Err(NdpError::NonFinite {
                        context: format!("target {i} known channel"),
                        value: *v,
                    });
                }
            }
            points.push(ChainPoint {
                key: Rng::new(TAG_TARGET_POINT).derive(i as u64).derive(0).next_u64(),
                known,
            });
        }
        Ok(ChainLayout { points, num_targets: targets.len() })
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn any_known(&self) -> bool {
        self.points.iter().any(|p| p.known.iter().any(Option::is_some))
    }
}

fn keyed_normal(base: &Rng, tags: &[u64]) -> f64 {
    base.derive_all(tags).standard_normal()
}

/// Conditional samples via in-painting with resampling: per step t, U inner
/// iterations of backward step, re-clamp of known channels to their
/// forward-diffused values, and one-step re-diffusion (skipped on the last
/// inner iteration so the chain descends).
#[allow(clippy::too_many_arguments)]
pub fn sample_conditional_many<T: Scalar>(
    ctx: &Context,
    targets: &[TargetSpec],
    params: &ModelParams<T>,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    seed: u64,
    num_samples: usize,
) -> Result<Vec<FunctionDraw>> {
    scfg.validate()?;
    if sched.timesteps() != mcfg.timesteps {
        return Err(NdpError::ConfigInvalid(format!(
            "schedule T = {} does not match model T = {}",
            sched.timesteps(),
            mcfg.timesteps
        )));
    }
    if targets.is_empty() {
        return Err(NdpError::InvalidArgument("no target points to sample".into()));
    }
    let d = ctx.dim();

    // no information to condition on: the scheme reduces to prior sampling
    if ctx.is_empty() && targets.iter().all(TargetSpec::fully_unknown) {
        if mcfg.deterministic_inputs {
            return Err(NdpError::InvalidArgument(
                "fixed-input model requires target x locations".into(),
            ));
        }
        return sample_prior_many(
            PriorInputs::Diffused { n: targets.len(), d },
            params,
            mcfg,
            sched,
            scfg,
            seed,
            num_samples,
        );
    }

    if mcfg.deterministic_inputs {
        for (i, t) in targets.iter().enumerate() {
            if t.x.iter().any(Option::is_none) {
                return Err(NdpError::InvalidArgument(format!(
                    "fixed-input model requires known x for every target (target {i})",
                )));
            }
        }
    }

    let layout = ChainLayout::build(ctx, targets, d)?;
    let p = layout.len();
    let s = num_samples;
    if s == 0 {
        return Ok(Vec::new());
    }
    let base = Rng::new(seed).derive(TAG_COND);
    let big_t = sched.timesteps();
    let u_count = if layout.any_known() { scfg.resample_count } else { 1 };

    // state tensors [S, P, D] / [S, P]
    let mut x = Tensor::<T>::zeros(&[s, p, d]);
    let mut y = Tensor::<T>::zeros(&[s, p]);
    for si in 0..s {
        for (pi, point) in layout.points.iter().enumerate() {
            for c in 0..=d {
                let v = if mcfg.deterministic_inputs && c < d {
                    // inputs are never diffused: clean location from the start
                    point.known[c].expect("checked above")
                } else {
                    keyed_normal(&base, &[si as u64, point.key, c as u64, PURPOSE_INIT])
                };
                if c < d {
                    x.data_mut()[(si * p + pi) * d + c] = T::from_f64(v);
                } else {
                    y.data_mut()[si * p + pi] = T::from_f64(v);
                }
            }
        }
    }

    for t in (1..=big_t).rev() {
        let sigma = backward_sigma(t, sched, scfg)?;
        let (c1, c2) = backward_coeffs(t, sched);
        let (c1t, c2t, sig) = (T::from_f64(c1), T::from_f64(c2), T::from_f64(sigma));
        let sqrt_ab_prev = sched.alpha_bar(t - 1).sqrt();
        let gamma_prev = sched.gamma(t - 1);
        let sqrt_1mb = (1.0 - sched.beta(t)).sqrt();
        let sqrt_b = sched.beta(t).sqrt();
        for u in 1..=u_count {
            // backward step on the full augmented state
            let ts = vec![t; s];
            let (eps_x, eps_y) = predict_noise_batch(&x, &y, &ts, params, mcfg)?;
            for si in 0..s {
                for (pi, point) in layout.points.iter().enumerate() {
                    if !mcfg.deterministic_inputs {
                        for c in 0..d {
                            let idx = (si * p + pi) * d + c;
                            let z = if sigma > 0.0 {
                                T::from_f64(keyed_normal(
                                    &base,
                                    &[si as u64, point.key, c as u64, t as u64, u as u64, PURPOSE_BACKWARD],
                                ))
                            } else {
                                T::zero()
                            };
                            x.data_mut()[idx] =
                                c1t * (x.data()[idx] - c2t * eps_x.data()[idx]) + sig * z;
                        }
                    }
                    let idx = si * p + pi;
                    let z = if sigma > 0.0 {
                        T::from_f64(keyed_normal(
                            &base,
                            &[si as u64, point.key, d as u64, t as u64, u as u64, PURPOSE_BACKWARD],
                        ))
                    } else {
                        T::zero()
                    };
                    y.data_mut()[idx] = c1t * (y.data()[idx] - c2t * eps_y.data()[idx]) + sig * z;
                }
            }

            // re-clamp known channels to their (t-1)-step forward diffusion
            for si in 0..s {
                for (pi, point) in layout.points.iter().enumerate() {
                    for c in 0..=d {
                        let Some(v0) = point.known[c] else { continue };
                        let clamped = if mcfg.deterministic_inputs && c < d {
                            v0
                        } else {
                            let z = keyed_normal(
                                &base,
                                &[si as u64, point.key, c as u64, t as u64, u as u64, PURPOSE_CTX_FORWARD],
                            );
                            sqrt_ab_prev * v0 + gamma_prev * z
                        };
                        if c < d {
                            x.data_mut()[(si * p + pi) * d + c] = T::from_f64(clamped);
                        } else {
                            y.data_mut()[si * p + pi] = T::from_f64(clamped);
                        }
                    }
                }
            }

            // re-diffuse one step, except on the last inner iteration
            if u < u_count {
                for si in 0..s {
                    for (pi, point) in layout.points.iter().enumerate() {
                        for c in 0..=d {
                            if mcfg.deterministic_inputs && c < d {
                                continue;
                            }
                            let z = keyed_normal(
                                &base,
                                &[si as u64, point.key, c as u64, t as u64, u as u64, PURPOSE_REDIFFUSE],
                            );
                            if c < d {
                                let idx = (si * p + pi) * d + c;
                                x.data_mut()[idx] = T::from_f64(
                                    sqrt_1mb * x.data()[idx].as_f64() + sqrt_b * z,
                                );
                            } else {
                                let idx = si * p + pi;
                                y.data_mut()[idx] = T::from_f64(
                                    sqrt_1mb * y.data()[idx].as_f64() + sqrt_b * z,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    // extract the targets (the tail of the augmented state)
    let n_ctx = p - layout.num_targets;
    (0..s)
        .map(|si| {
            let mut xs = Tensor::zeros(&[layout.num_targets, d]);
            let mut ys = Vec::with_capacity(layout.num_targets);
            for ti in 0..layout.num_targets {
                let pi = n_ctx + ti;
                for c in 0..d {
                    xs.set2(ti, c, x.data()[(si * p + pi) * d + c].as_f64());
                }
                ys.push(y.data()[si * p + pi].as_f64());
            }
            FunctionDraw::new(xs, ys)
        })
        .collect()
}

/// One conditional sample.
#[allow(clippy::too_many_arguments)]
pub fn sample_conditional<T: Scalar>(
    ctx: &Context,
    targets: &[TargetSpec],
    params: &ModelParams<T>,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    seed: u64,
) -> Result<FunctionDraw> {
    Ok(sample_conditional_many(ctx, targets, params, mcfg, sched, scfg, seed, 1)?.remove(0))
}

/// Sample an input location whose output is believed to equal `y_star`:
/// conditional sampling with one extra target whose y channel is clamped and
/// all x channels free. Requires a jointly trained model.
#[allow(clippy::too_many_arguments)]
pub fn sample_x_given_y<T: Scalar>(
    ctx: &Context,
    y_star: f64,
    params: &ModelParams<T>,
    mcfg: &ModelConfig,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if mcfg.deterministic_inputs {
        return Err(NdpError::InvalidArgument(
            "sample_x_given_y needs a model trained with diffused inputs (the x head is untrained)"
                .into(),
        ));
    }
    let targets = vec![TargetSpec::with_y(ctx.dim(), y_star)];
    let draw = sample_conditional(ctx, &targets, params, mcfg, sched, scfg, seed)?;
    Ok(draw.x.row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn joint_cfg() -> ModelConfig {
        ModelConfig {
            embed_width: 8,
            num_blocks: 2,
            num_heads: 2,
            timesteps: 12,
            deterministic_inputs: false,
            head_depth: 1,
        }
    }

    fn fixed_cfg() -> ModelConfig {
        ModelConfig { deterministic_inputs: true, ..joint_cfg() }
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> (ModelParams<f64>, NoiseSchedule, SamplerConfig) {
        let params = ModelParams::init(cfg, seed).unwrap();
        let sched = NoiseSchedule::build(ScheduleKind::Cosine, cfg.timesteps).unwrap();
        (params, sched, SamplerConfig::default())
    }

    #[test]
    fn backward_step_identity_limit() {
        // beta -> 0: the backward mean collapses to the input state
        let cfg = joint_cfg();
        let (params, _, scfg) = setup(&cfg, 1);
        let mut beta = vec![f64::NAN; 13];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            *b = if t == 5 { 1e-12 } else { 0.01 };
        }
        let sched = NoiseSchedule::from_betas(beta);
        let mut rng = Rng::new(2);
        let x = Tensor::from_vec(&[3, 1], vec![0.1, -0.2, 0.3]).unwrap();
        let y = vec![0.5, -0.5, 0.0];
        let (x1, y1) =
            backward_step(&x, &y, 5, &params, &cfg, &sched, &scfg, &mut rng).unwrap();
        assert!(x1.max_abs_diff(&x) <= 1e-5);
        for (a, b) in y1.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn backward_final_step_is_deterministic_when_clamped() {
        let cfg = joint_cfg();
        let (params, sched, scfg) = setup(&cfg, 1);
        assert!(scfg.clamp_final_step);
        let mut rng = Rng::new(2);
        let x = Tensor::from_vec(&[3, 1], vec![0.1, -0.2, 0.3]).unwrap();
        let y = vec![0.5, -0.5, 0.0];
        let (x1, y1) =
            backward_step(&x, &y, 1, &params, &cfg, &sched, &scfg, &mut rng.derive(0)).unwrap();
        let (x2, y2) =
            backward_step(&x, &y, 1, &params, &cfg, &sched, &scfg, &mut rng.derive(1)).unwrap();
        assert_eq!(x1, x2);
        assert_eq!(y1, y2);
    }

    #[test]
    fn backward_mean_matches_mu_tilde_form() {
        // (s - (beta/gamma) eps)/sqrt(1-beta) == (s - (beta/sqrt(1-ab)) eps)/sqrt(alpha)
        let sched = NoiseSchedule::cosine(50).unwrap();
        for t in [1usize, 7, 25, 50] {
            let (c1, c2) = super::backward_coeffs(t, &sched);
            let beta = sched.beta(t);
            let alpha = 1.0 - beta;
            let ab = sched.alpha_bar(t);
            let s = 0.73;
            let e = -0.41;
            let ours = c1 * (s - c2 * e);
            let mu_tilde = (s - beta / (1.0 - ab).sqrt() * e) / alpha.sqrt();
            assert!((ours - mu_tilde).abs() <= 1e-12, "t = {t}: {ours} vs {mu_tilde}");
        }
    }

    #[test]
    fn eq4_variance_errors_at_final_step_without_clamp() {
        let cfg = joint_cfg();
        let (params, sched, _) = setup(&cfg, 3);
        let scfg = SamplerConfig {
            variance_form: VarianceForm::Eq4AsWritten,
            clamp_final_step: false,
            ..SamplerConfig::default()
        };
        let x = Tensor::from_vec(&[2, 1], vec![0.1, 0.2]).unwrap();
        let mut rng = Rng::new(4);
        assert!(backward_step(&x, &[0.0, 0.0], 1, &params, &cfg, &sched, &scfg, &mut rng).is_err());
        // and fine at t = 2
        assert!(backward_step(&x, &[0.0, 0.0], 2, &params, &cfg, &sched, &scfg, &mut rng).is_ok());
    }

    #[test]
    fn prior_fixed_x_branch_keeps_inputs_bit_exact() {
        let cfg = fixed_cfg();
        let (params, sched, scfg) = setup(&cfg, 5);
        let x0 = Tensor::from_vec(&[4, 1], vec![-1.0, -0.3, 0.3, 1.0]).unwrap();
        let draw =
            sample_prior(PriorInputs::Fixed(&x0), &params, &cfg, &sched, &scfg, 7).unwrap();
        assert_eq!(draw.x, x0);
        assert!(draw.y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prior_untrained_model_is_finite_with_right_shapes() {
        let cfg = joint_cfg();
        let (params, sched, scfg) = setup(&cfg, 6);
        let draw = sample_prior(
            PriorInputs::Diffused { n: 5, d: 2 },
            &params,
            &cfg,
            &sched,
            &scfg,
            8,
        )
        .unwrap();
        assert_eq!(draw.x.shape(), &[5, 2]);
        assert_eq!(draw.y.len(), 5);
        assert!(draw.x.all_finite());
        assert!(draw.y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prior_rejects_diffused_inputs_on_fixed_model() {
        let cfg = fixed_cfg();
        let (params, sched, scfg) = setup(&cfg, 7);
        assert!(sample_prior(
            PriorInputs::Diffused { n: 3, d: 1 },
            &params,
            &cfg,
            &sched,
            &scfg,
            9
        )
        .is_err());
    }

    #[test]
    fn empty_context_free_targets_delegate_to_prior() {
        let cfg = joint_cfg();
        let (params, sched, scfg) = setup(&cfg, 8);
        let ctx = Context::empty(2);
        let targets = vec![TargetSpec::free(2); 4];
        let cond =
            sample_conditional(&ctx, &targets, &params, &cfg, &sched, &scfg, 11).unwrap();
        let prior = sample_prior(
            PriorInputs::Diffused { n: 4, d: 2 },
            &params,
            &cfg,
            &sched,
            &scfg,
            11,
        )
        .unwrap();
        assert_eq!(cond.x, prior.x);
        assert_eq!(cond.y, prior.y);
    }

    #[test]
    fn conditional_does_not_mutate_context() {
        let cfg = joint_cfg();
        let (params, sched, scfg) = setup(&cfg, 9);
        let ctx = Context::new(
            Tensor::from_vec(&[2, 1], vec![-0.5, 0.5]).unwrap(),
            vec![1.0, -1.0],
        )
        .unwrap();
        let x_before = ctx.x.clone();
        let y_before = ctx.y.clone();
        let targets = targets_at(&Tensor::from_vec(&[3, 1], vec![-0.8, 0.0, 0.8]).unwrap());
        sample_conditional(&ctx, &targets, &params, &cfg, &sched, &scfg, 13).unwrap();
        assert_eq!(ctx.x, x_before);
        assert_eq!(ctx.y, y_before);
    }

    #[test]
    fn conditional_bit_identical_under_context_permutation() {
        let cfg = joint_cfg();
        let (params, sched, scfg) = setup(&cfg, 10);
        let ctx = Context::new(
            Tensor::from_vec(&[4, 1], vec![-0.7, -0.1, 0.4, 0.9]).unwrap(),
            vec![0.3, -0.2, 0.8, -0.6],
        )
        .unwrap();
        let mut perm_rng = Rng::new(99);
        let perm = perm_rng.permutation(4);
        let xp: Vec<f64> = perm.iter().map(|&i| ctx.x.get2(i, 0)).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| ctx.y[i]).collect();
        let ctx_p = Context::new(Tensor::from_vec(&[4, 1], xp).unwrap(), yp).unwrap();

        let targets = targets_at(&Tensor::from_vec(&[2, 1], vec![-0.4, 0.6]).unwrap());
        let a = sample_conditional(&ctx, &targets, &params, &cfg, &sched, &scfg, 17).unwrap();
        let b = sample_conditional(&ctx_p, &targets, &params, &cfg, &sched, &scfg, 17).unwrap();
        assert_eq!(a.x, b.x, "sampled target inputs differ under context permutation");
        assert_eq!(a.y, b.y, "sampled target outputs differ under context permutation");
    }

    #[test]
    fn conditional_deterministic_given_seed_and_stochastic_across_seeds() {
        let cfg = joint_cfg();
        let (params, sched, scfg) = setup(&cfg, 11);
        let ctx = Context::new(Tensor::from_vec(&[1, 1], vec![0.2]).unwrap(), vec![0.5]).unwrap();
        let targets = vec![TargetSpec::free(1); 2];
        let a = sample_conditional(&ctx, &targets, &params, &cfg, &sched, &scfg, 21).unwrap();
        let b = sample_conditional(&ctx, &targets, &params, &cfg, &sched, &scfg, 21).unwrap();
        assert_eq!(a.y, b.y);
        let c = sample_conditional(&ctx, &targets, &params, &cfg, &sched, &scfg, 22).unwrap();
        assert_ne!(a.y, c.y, "different seeds should give different draws");
    }

    #[test]
    fn x_given_y_shape_and_model_requirements() {
        let cfg = joint_cfg();
        let (params, sched, scfg) = setup(&cfg, 12);
        let ctx = Context::new(
            Tensor::from_vec(&[2, 2], vec![0.0, 0.1, -0.2, 0.3]).unwrap(),
            vec![0.4, -0.4],
        )
        .unwrap();
        let x = sample_x_given_y(&ctx, -1.0, &params, &cfg, &sched, &scfg, 23).unwrap();
        assert_eq!(x.len(), 2);
        assert!(x.iter().all(|v| v.is_finite()));

        let cfg_fixed = fixed_cfg();
        let (params_f, sched_f, scfg_f) = setup(&cfg_fixed, 13);
        assert!(sample_x_given_y(&ctx, -1.0, &params_f, &cfg_fixed, &sched_f, &scfg_f, 24)
            .is_err());
    }

    #[test]
    fn fixed_model_requires_target_locations() {
        let cfg = fixed_cfg();
        let (params, sched, scfg) = setup(&cfg, 14);
        let ctx = Context::new(Tensor::from_vec(&[1, 1], vec![0.0]).unwrap(), vec![1.0]).unwrap();
        let bad = vec![TargetSpec::free(1)];
        assert!(sample_conditional(&ctx, &bad, &params, &cfg, &sched, &scfg, 25).is_err());
        let good = vec![TargetSpec::at(&[0.5])];
        let draw = sample_conditional(&ctx, &good, &params, &cfg, &sched, &scfg, 26).unwrap();
        assert_eq!(draw.x.get2(0, 0), 0.5);
    }

    #[test]
    fn lockstep_many_matches_single() {
        let cfg = joint_cfg();
        let (params, sched, scfg) = setup(&cfg, 15);
        let ctx = Context::new(Tensor::from_vec(&[1, 1], vec![0.3]).unwrap(), vec![0.7]).unwrap();
        let targets = targets_at(&Tensor::from_vec(&[2, 1], vec![-0.5, 0.5]).unwrap());
        let many =
            sample_conditional_many(&ctx, &targets, &params, &cfg, &sched, &scfg, 31, 3).unwrap();
        // sample 0 of the batch equals the single-sample call (same keys)
        let single =
            sample_conditional(&ctx, &targets, &params, &cfg, &sched, &scfg, 31).unwrap();
        assert_eq!(many[0].y, single.y);
        // distinct samples differ
        assert_ne!(many[0].y, many[1].y);
    }
}
