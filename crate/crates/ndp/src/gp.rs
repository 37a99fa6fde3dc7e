//! Synthetic data engine and evaluation oracle: stationary kernels, input
//! samplers, exact GP prior draws, posteriors and log marginal likelihood.
//!
//! Everything here runs at 64-bit; the fixed observation noise of 1e-6 sits
//! near the edge of 32-bit stability.

use crate::error::{NdpError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Stationary kernel family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    SquaredExponential,
    Matern32,
    Matern52,
}

/// Kernel family with ARD lengthscales and variances.
#[derive(Clone, Debug)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Per-dimension (ARD) lengthscales, all positive.
    pub lengthscales: Vec<f64>,
    pub kernel_variance: f64,
    pub noise_variance: f64,
}

impl KernelSpec {
    pub fn new(
        family: KernelFamily,
        lengthscales: Vec<f64>,
        kernel_variance: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        let k = KernelSpec { family, lengthscales, kernel_variance, noise_variance };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() || self.lengthscales.iter().any(|&l| !(l > 0.0)) {
            return Err(NdpError::InvalidArgument(format!(
                "lengthscales must be positive, got {:?}",
                self.lengthscales
            )));
        }
        if !(self.kernel_variance > 0.0) {
            return Err(NdpError::InvalidArgument(format!(
                "kernel variance {} must be > 0",
                self.kernel_variance
            )));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(NdpError::InvalidArgument(format!(
                "noise variance {} must be >= 0",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn with_lengthscales(&self, ls: Vec<f64>) -> Self {
        KernelSpec { lengthscales: ls, ..self.clone() }
    }
}

/// Prior over lengthscales during training-data generation.
#[derive(Clone, Debug)]
pub enum LengthscalePrior {
    Fixed,
    /// `exp(N(mu_log, sigma_log^2))`; sampled i.i.d. per dimension when
    /// `per_dimension`, otherwise one shared draw.
    LogNormal { mu_log: f64, sigma_log: f64, per_dimension: bool },
}

impl LengthscalePrior {
    /// Draw a kernel for one batch by resampling the base lengthscales.
    pub fn sample(&self, base: &KernelSpec, rng: &mut Rng) -> KernelSpec {
        match self {
            LengthscalePrior::Fixed => base.clone(),
            LengthscalePrior::LogNormal { mu_log, sigma_log, per_dimension } => {
                let d = base.dim();
                let ls = if *per_dimension {
                    (0..d).map(|_| (mu_log + sigma_log * rng.standard_normal()).exp()).collect()
                } else {
                    let v = (mu_log + sigma_log * rng.standard_normal()).exp();
                    vec![v; d]
                };
                base.with_lengthscales(ls)
            }
        }
    }
}

/// One function sample: paired inputs (N x D) and outputs (N).
#[derive(Clone, Debug)]
pub struct FunctionDraw {
    pub x: Tensor<f64>,
    pub y: Vec<f64>,
}

impl FunctionDraw {
    pub fn new(x: Tensor<f64>, y: Vec<f64>) -> Result<Self> {
        if x.rank() != 2 || x.nrows() != y.len() {
            return Err(NdpError::ShapeMismatch {
                op: "function_draw",
                detail: format!("x {:?} vs y len {}", x.shape(), y.len()),
            });
        }
        Ok(FunctionDraw { x, y })
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
}

/// Gram matrix of the chosen stationary kernel between two point sets; the
/// observation noise is *not* added here.
pub fn kernel_gram(xa: &Tensor<f64>, xb: &Tensor<f64>, k: &KernelSpec) -> Result<Tensor<f64>> {
    if xa.rank() != 2 || xb.rank() != 2 || xa.ncols() != k.dim() || xb.ncols() != k.dim() {
        return Err(NdpError::ShapeMismatch {
            op: "kernel_gram",
            detail: format!("xa {:?}, xb {:?} vs kernel dim {}", xa.shape(), xb.shape(), k.dim()),
        });
    }
    let (na, nb, d) = (xa.nrows(), xb.nrows(), k.dim());
    let mut out = Tensor::zeros(&[na, nb]);
    for i in 0..na {
        for j in 0..nb {
            let mut r2 = 0.0;
            for c in 0..d {
                let diff = (xa.get2(i, c) - xb.get2(j, c)) / k.lengthscales[c];
                r2 += diff * diff;
            }
            let v = match k.family {
                KernelFamily::SquaredExponential => (-0.5 * r2).exp(),
                KernelFamily::Matern32 => {
                    let r = r2.sqrt();
                    let s = 3f64.sqrt() * r;
                    (1.0 + s) * (-s).exp()
                }
                KernelFamily::Matern52 => {
                    let r = r2.sqrt();
                    let s = 5f64.sqrt() * r;
                    (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
                }
            };
            out.set2(i, j, k.kernel_variance * v);
        }
    }
    Ok(out)
}

/// Input-location sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    UniformRandom,
    Grid,
    Halton,
}

/// First `d` primes, for the Halton bases.
fn primes(d: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(d);
    let mut c = 2u64;
    while out.len() < d {
        if (2..c).take_while(|p| p * p <= c).all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

/// Radical inverse of `index` in the given base (the Halton construction).
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// N points in [-1, 1]^D. Grid is a linear spacing for D = 1 and a row-major
/// sqrt(N) x sqrt(N) lattice for D = 2; Halton uses the first D primes.
pub fn sample_inputs(n: usize, d: usize, mode: InputMode, rng: &mut Rng) -> Result<Tensor<f64>> {
    if n == 0 || d == 0 {
        return Err(NdpError::InvalidArgument(format!("need n >= 1 and d >= 1, got {n}, {d}")));
    }
    let mut out = Tensor::zeros(&[n, d]);
    match mode {
        InputMode::UniformRandom => {
            for v in out.data_mut() {
                *v = rng.uniform_in(-1.0, 1.0);
            }
        }
        InputMode::Grid => match d {
            1 => {
                for i in 0..n {
                    let v = if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
                    out.set2(i, 0, v);
                }
            }
            2 => {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n {
                    return Err(NdpError::InvalidArgument(format!(
                        "grid inputs with D = 2 need a square N, got {n}"
                    )));
                }
                for i in 0..side {
                    for j in 0..side {
                        let a =
                            if side == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (side - 1) as f64 };
                        let b =
                            if side == 1 { 0.0 } else { -1.0 + 2.0 * j as f64 / (side - 1) as f64 };
                        out.set2(i * side + j, 0, a);
                        out.set2(i * side + j, 1, b);
                    }
                }
            }
            _ => {
                return Err(NdpError::InvalidArgument(format!(
                    "grid inputs support D <= 2 (got D = {d}); use halton for higher dimensions"
                )))
            }
        },
        InputMode::Halton => {
            let bases = primes(d);
            for i in 0..n {
                for (c, &b) in bases.iter().enumerate() {
                    out.set2(i, c, 2.0 * radical_inverse(i as u64 + 1, b) - 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Jitter escalation: relative steps applied to the diagonal until the
/// factorisation succeeds, from 1e-8 * variance up to 1e-2 * variance.
const JITTER_START_REL: f64 = 1e-8;
const JITTER_MAX_REL: f64 = 1e-2;

/// Lower-triangular Cholesky factor; `None` when the matrix is not positive
/// definite at working precision.
pub(crate) fn cholesky(a: &Tensor<f64>) -> Option<Tensor<f64>> {
    let n = a.nrows();
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get2(i, j);
            for k in 0..j {
                sum -= l.get2(i, k) * l.get2(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l.set2(i, j, sum.sqrt());
            } else {
                l.set2(i, j, sum / l.get2(j, j));
            }
        }
    }
    Some(l)
}

/// Cholesky of `a + jitter I`, escalating jitter relative to `scale`.
/// `start_at_zero` first tries the matrix as given.
fn cholesky_jittered(
    a: &Tensor<f64>,
    scale: f64,
    start_at_zero: bool,
) -> Result<(Tensor<f64>, f64)> {
    let n = a.nrows();
    let mut jitter = if start_at_zero { 0.0 } else { JITTER_START_REL * scale };
    loop {
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..n {
                let v = m.get2(i, i) + jitter;
                m.set2(i, i, v);
            }
        }
        if let Some(l) = cholesky(&m) {
            return Ok((l, jitter));
        }
        if jitter >= JITTER_MAX_REL * scale {
            return Err(NdpError::CholeskyFailure { size: n, final_jitter: jitter });
        }
        jitter = if jitter == 0.0 { JITTER_START_REL * scale } else { jitter * 10.0 };
    }
}

/// Solve `L L^T x = b` in place given the lower factor.
fn chol_solve(l: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l.get2(i, k) * x[k];
        }
        x[i] = s / l.get2(i, i);
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l.get2(k, i) * x[k];
        }
        x[i] = s / l.get2(i, i);
    }
    x
}

/// Draw `y = L z` from the centred prior `N(0, Gram + noise I + jitter I)`.
pub fn sample_prior_function(
    x: &Tensor<f64>,
    k: &KernelSpec,
    rng: &mut Rng,
) -> Result<FunctionDraw> {
    let n = x.nrows();
    let mut gram = kernel_gram(x, x, k)?;
    for i in 0..n {
        let v = gram.get2(i, i) + k.noise_variance;
        gram.set2(i, i, v);
    }
    let (l, _) = cholesky_jittered(&gram, k.kernel_variance, false)?;
    let z: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += l.get2(i, j) * z[j];
        }
        y[i] = acc;
    }
    FunctionDraw::new(x.clone(), y)
}

/// Cholesky factor of the prior covariance at the given inputs, for reuse
/// across draws that share a kernel and input set.
pub fn prior_cholesky(x: &Tensor<f64>, k: &KernelSpec) -> Result<Tensor<f64>> {
    let n = x.nrows();
    let mut gram = kernel_gram(x, x, k)?;
    for i in 0..n {
        let v = gram.get2(i, i) + k.noise_variance;
        gram.set2(i, i, v);
    }
    Ok(cholesky_jittered(&gram, k.kernel_variance, false)?.0)
}

/// `y = L z` with fresh standard normals.
pub fn draw_with_cholesky(l: &Tensor<f64>, rng: &mut Rng) -> Vec<f64> {
    let n = l.nrows();
    let z: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += l.get2(i, j) * z[j];
        }
        y[i] = acc;
    }
    y
}

/// Exact Gaussian conditional of the joint prior at the target points:
/// mean `K*c (Kcc + noise I)^-1 y` and covariance
/// `K** - K*c (Kcc + noise I)^-1 Kc*`.
pub fn posterior_moments(
    x_star: &Tensor<f64>,
    context: &FunctionDraw,
    k: &KernelSpec,
) -> Result<(Vec<f64>, Tensor<f64>)> {
    if context.is_empty() {
        return Err(NdpError::InvalidArgument("posterior_moments needs a non-empty context".into()));
    }
    let m = x_star.nrows();
    if m == 0 {
        return Ok((Vec::new(), Tensor::zeros(&[0, 0])));
    }
    let n = context.len();
    let mut kcc = kernel_gram(&context.x, &context.x, k)?;
    for i in 0..n {
        let v = kcc.get2(i, i) + k.noise_variance;
        kcc.set2(i, i, v);
    }
    let (l, _) = cholesky_jittered(&kcc, k.kernel_variance, true)?;
    let ksc = kernel_gram(x_star, &context.x, k)?;
    let kss = kernel_gram(x_star, x_star, k)?;

    let alpha = chol_solve(&l, &context.y);
    let mut mean = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..n {
            acc += ksc.get2(i, j) * alpha[j];
        }
        mean[i] = acc;
    }

    // S = K** - Ksc Kcc^-1 Kcs, via solves against the columns of Kcs
    let mut cov = kss;
    for t in 0..m {
        let col: Vec<f64> = (0..n).map(|j| ksc.get2(t, j)).collect();
        let sol = chol_solve(&l, &col);
        for t2 in 0..m {
            let mut acc = 0.0;
            for j in 0..n {
                acc += ksc.get2(t2, j) * sol[j];
            }
            let v = cov.get2(t2, t) - acc;
            cov.set2(t2, t, v);
        }
    }
    Ok((mean, cov))
}

/// `log N(y; 0, Gram + noise I)` via Cholesky.
pub fn log_marginal_likelihood(dataset: &FunctionDraw, k: &KernelSpec) -> Result<f64> {
    if dataset.is_empty() {
        return Err(NdpError::InvalidArgument(
            "log_marginal_likelihood needs a non-empty dataset".into(),
        ));
    }
    let n = dataset.len();
    let mut gram = kernel_gram(&dataset.x, &dataset.x, k)?;
    for i in 0..n {
        let v = gram.get2(i, i) + k.noise_variance;
        gram.set2(i, i, v);
    }
    let (l, _) = cholesky_jittered(&gram, k.kernel_variance, true)?;
    let alpha = chol_solve(&l, &dataset.y);
    let quad: f64 = dataset.y.iter().zip(&alpha).map(|(y, a)| y * a).sum();
    let logdet: f64 = (0..n).map(|i| l.get2(i, i).ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Grid refit of a shared (non-ARD) lengthscale by maximising the log
/// marginal likelihood, with the kernel variance set to its closed-form
/// maximiser and the noise kept proportional to it.
pub fn fit_lengthscale_grid(
    data: &FunctionDraw,
    family: KernelFamily,
    grid: &[f64],
    relative_noise: f64,
) -> Result<KernelSpec> {
    if data.is_empty() {
        return Err(NdpError::InvalidArgument("cannot fit a kernel to an empty dataset".into()));
    }
    if grid.is_empty() {
        return Err(NdpError::InvalidArgument("empty lengthscale grid".into()));
    }
    let n = data.len();
    let d = data.dim();
    let mut best: Option<(f64, KernelSpec)> = None;
    for &ls in grid {
        let unit = KernelSpec::new(family, vec![ls; d], 1.0, 0.0)?;
        let mut k0 = kernel_gram(&data.x, &data.x, &unit)?;
        for i in 0..n {
            let v = k0.get2(i, i) + relative_noise;
            k0.set2(i, i, v);
        }
        let Ok((l, _)) = cholesky_jittered(&k0, 1.0, true) else { continue };
        let alpha = chol_solve(&l, &data.y);
        let quad: f64 = data.y.iter().zip(&alpha).map(|(y, a)| y * a).sum();
        let var = (quad / n as f64).max(1e-12);
        let logdet: f64 = (0..n).map(|i| l.get2(i, i).ln()).sum::<f64>() * 2.0;
        let lml = -0.5
            * (n as f64 * (2.0 * std::f64::consts::PI * var).ln() + logdet + n as f64);
        let spec = KernelSpec::new(family, vec![ls; d], var, relative_noise * var)?;
        match &best {
            Some((b, _)) if lml <= *b => {}
            _ => best = Some((lml, spec)),
        }
    }
    best.map(|(_, k)| k).ok_or(NdpError::CholeskyFailure { size: n, final_jitter: f64::NAN })
}

/// Joint draw from the posterior at the given points (used by the GPR
/// Thompson-sampling surrogate).
pub fn sample_posterior_function(
    x_star: &Tensor<f64>,
    context: &FunctionDraw,
    k: &KernelSpec,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let m = x_star.nrows();
    if context.is_empty() {
        return Ok(sample_prior_function(x_star, k, rng)?.y);
    }
    let (mean, cov) = posterior_moments(x_star, context, k)?;
    let (l, _) = cholesky_jittered(&cov, k.kernel_variance, false)?;
    let z: Vec<f64> = (0..m).map(|_| rng.standard_normal()).collect();
    let mut y = mean;
    for i in 0..m {
        for j in 0..=i {
            y[i] += l.get2(i, j) * z[j];
        }
    }
    Ok(y)
}
