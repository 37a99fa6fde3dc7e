//! Noise schedule tables and the fixed forward process.

use crate::error::{NdpError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Schedule construction used for the beta tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

/// The beta / alpha-bar / gamma tables driving both processes.
///
/// `beta` is indexed 1..=T, `alpha_bar` and `gamma` 0..=T with
/// `alpha_bar[0] = 1` and `gamma[0] = 0`.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    timesteps: usize,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    gamma: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const BETA_MIN: f64 = 1e-8;
const BETA_MAX: f64 = 0.999;

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, timesteps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => Self::cosine(timesteps),
            ScheduleKind::Linear => Self::linear(timesteps),
        }
    }

    /// Cosine alpha-bar construction with offset s = 0.008;
    /// `beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}` clipped to (1e-8, 0.999].
    pub fn cosine(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(NdpError::InvalidArgument(format!(
                "schedule needs T >= 2, got {timesteps}"
            )));
        }
        let f = |t: f64| {
            let arg = (t / timesteps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                * std::f64::consts::FRAC_PI_2;
            arg.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut beta = vec![f64::NAN; timesteps + 1];
        let mut prev = 1.0;
        for t in 1..=timesteps {
            let ab = f(t as f64) / f0;
            let b = (1.0 - ab / prev).clamp(BETA_MIN, BETA_MAX);
            beta[t] = b;
            prev = ab;
        }
        Ok(Self::from_betas(beta))
    }

    /// Linear beta ramp, for ablation.
    pub fn linear(timesteps: usize) -> Result<Self> {
        if timesteps < 2 {
            return Err(NdpError::InvalidArgument(format!(
                "schedule needs T >= 2, got {timesteps}"
            )));
        }
        let (lo, hi) = (1e-4, 0.02);
        let mut beta = vec![f64::NAN; timesteps + 1];
        for t in 1..=timesteps {
            beta[t] = lo + (hi - lo) * (t - 1) as f64 / (timesteps - 1) as f64;
        }
        Ok(Self::from_betas(beta))
    }

    /// Rebuild alpha-bar as the running product of (1 - beta) so the
    /// telescoping identity holds exactly.
    pub(crate) fn from_betas(beta: Vec<f64>) -> Self {
        let timesteps = beta.len() - 1;
        let mut alpha_bar = vec![1.0; timesteps + 1];
        let mut gamma = vec![0.0; timesteps + 1];
        for t in 1..=timesteps {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
            gamma[t] = (1.0 - alpha_bar[t]).sqrt();
        }
        NoiseSchedule { timesteps, beta, alpha_bar, gamma }
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    /// `beta_t` for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.timesteps, "beta index {t} out of 1..={}", self.timesteps);
        self.beta[t]
    }

    /// `alpha_bar_t` for t in 0..=T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.timesteps, "alpha_bar index {t} out of 0..={}", self.timesteps);
        self.alpha_bar[t]
    }

    /// `gamma_t = sqrt(1 - alpha_bar_t)` for t in 0..=T.
    pub fn gamma(&self, t: usize) -> f64 {
        assert!(t <= self.timesteps, "gamma index {t} out of 0..={}", self.timesteps);
        self.gamma[t]
    }

    pub fn validate(&self) -> Result<()> {
        for t in 1..=self.timesteps {
            let b = self.beta[t];
            if !(b > 0.0 && b < 1.0) {
                return Err(NdpError::InvalidArgument(format!("beta[{t}] = {b} outside (0, 1)")));
            }
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(NdpError::InvalidArgument(format!(
                    "alpha_bar not strictly decreasing at t = {t}"
                )));
            }
        }
        if self.gamma[0] != 0.0 || self.alpha_bar[0] != 1.0 {
            return Err(NdpError::InvalidArgument("schedule must start at (1, 0)".into()));
        }
        Ok(())
    }

    /// CSV rows `t,beta,alpha_bar,gamma` (beta is NaN at t = 0).
    pub fn csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,gamma\n");
        for t in 0..=self.timesteps {
            out.push_str(&format!(
                "{t},{:.16e},{:.16e},{:.16e}\n",
                self.beta[t], self.alpha_bar[t], self.gamma[t]
            ));
        }
        out
    }
}

/// Closed-form corruption to step `t`:
/// `x_t = sqrt(alpha_bar_t) x0 + gamma_t eps_x`, and the same for y.
pub fn forward_to_t<T: Scalar>(
    x0: &Tensor<T>,
    y0: &[T],
    t: usize,
    eps_x: &Tensor<T>,
    eps_y: &[T],
    sched: &NoiseSchedule,
) -> Result<(Tensor<T>, Vec<T>)> {
    if t > sched.timesteps() {
        return Err(NdpError::InvalidArgument(format!(
            "t = {t} out of range 0..={}",
            sched.timesteps()
        )));
    }
    if x0.shape() != eps_x.shape() || y0.len() != eps_y.len() {
        return Err(NdpError::ShapeMismatch {
            op: "forward_to_t",
            detail: format!(
                "x0 {:?} vs eps_x {:?}, y0 len {} vs eps_y len {}",
                x0.shape(),
                eps_x.shape(),
                y0.len(),
                eps_y.len()
            ),
        });
    }
    let a = T::from_f64(sched.alpha_bar(t).sqrt());
    let g = T::from_f64(sched.gamma(t));
    let mut x = x0.clone();
    for (v, &e) in x.data_mut().iter_mut().zip(eps_x.data()) {
        *v = a * *v + g * e;
    }
    let y = y0.iter().zip(eps_y).map(|(&v, &e)| a * v + g * e).collect();
    Ok((x, y))
}

/// One-step corruption draw from `N(sqrt(1 - beta_t) state, beta_t I)`.
pub fn forward_one_step<T: Scalar>(
    state: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    if t < 1 || t > sched.timesteps() {
        return Err(NdpError::InvalidArgument(format!(
            "t = {t} out of range 1..={}",
            sched.timesteps()
        )));
    }
    let a = T::from_f64((1.0 - sched.beta(t)).sqrt());
    let s = T::from_f64(sched.beta(t).sqrt());
    let mut out = state.clone();
    for v in out.data_mut() {
        *v = a * *v + s * T::from_f64(rng.standard_normal());
    }
    Ok(out)
}
