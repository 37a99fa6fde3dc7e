//! Dense row-major tensors at configurable precision.
//!
//! Rank is dynamic (0 = scalar up to 4); the network activations use the
//! convention `[batch, sequence N, input-dim D, embedding H]`.

use std::fmt;

use num_traits::Float;

use crate::error::{NdpError, Result};

/// Element type of a tensor: `f32` for training speed, `f64` for the
/// property tests and the GP oracle.
pub trait Scalar:
    'static
    + Copy
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Float
    + num_traits::NumAssign
    + std::iter::Sum
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `exp` for softmax weights: exact for f64, a branch-free polynomial
    /// for f32 (relative error ~1e-7, vectorizable).
    fn exp_approx(self) -> Self;

    /// `tanh` for the nonlinearity: exact for f64, via [`Self::exp_approx`]
    /// for f32.
    fn tanh_approx(self) -> Self;

    /// `c[m,n] = alpha * a_eff[m,k] . b_eff[k,n] + beta * c[m,n]` with
    /// row-major storage; `a_trans` means `a` is stored as `[k,m]`.
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// Strided gemm on raw pointers (row/column strides in elements).
    ///
    /// # Safety
    /// The strided index ranges must lie within the allocations and `c` must
    /// not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// Branch-free f32 exponential: `2^t` split into integer and fractional
/// parts with a degree-5 polynomial for the fraction.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    let t = (x * LOG2E).clamp(-126.0, 126.0);
    let i = t.round();
    let f = t - i;
    // Taylor of 2^f on [-0.5, 0.5]: coefficients ln2^k / k!
    let p = 1.0
        + f * (0.693_147_2
            + f * (0.240_226_5 + f * (0.055_504_11 + f * (0.009_618_13 + f * 0.001_333_55))));
    f32::from_bits((((i as i32) + 127) << 23) as u32) * p
}

#[inline]
fn tanh_f32(x: f32) -> f32 {
    let e = exp_f32(-2.0 * x.abs());
    let t = (1.0 - e) / (1.0 + e);
    if x < 0.0 {
        -t
    } else {
        t
    }
}

macro_rules! impl_scalar {
    ($ty:ty, $name:expr, $gemm:path, $exp:expr, $tanh:expr) => {
        impl Scalar for $ty {
            const NAME: &'static str = $name;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn exp_approx(self) -> Self {
                ($exp)(self)
            }

            #[inline]
            fn tanh_approx(self) -> Self {
                ($tanh)(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: a buffer length");
                assert_eq!(b.len(), k * n, "gemm: b buffer length");
                assert_eq!(c.len(), m * n, "gemm: c buffer length");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, exp_f32, tanh_f32);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, f64::exp, f64::tanh);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(NdpError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} wants {expect} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_f64s(shape: &[usize], vals: &[f64]) -> Result<Self> {
        Self::from_vec(shape, vals.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    pub fn nrows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    pub fn ncols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c] = v;
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[T] {
        debug_assert_eq!(self.rank(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64s(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// First NaN/Inf entry, if any.
    pub fn first_non_finite(&self) -> Option<f64> {
        self.data.iter().find(|v| !v.is_finite()).map(|v| v.as_f64())
    }

    pub fn all_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
    }
}

/// Rank-2 matrix product `a[m,k] . b[k,n]`.
pub fn matmul2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.ncols() != b.nrows() {
        return Err(NdpError::ShapeMismatch {
            op: "matmul2",
            detail: format!("{:?} x {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k, n) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(m, k, n, T::one(), a.data(), false, b.data(), false, T::zero(), out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let mut rng = Rng::new(1);
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|_| rng.standard_normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.standard_normal()).collect();
        let mut c = vec![0.0f64; m * n];
        f64::gemm(m, k, n, 1.0, &a, false, &b, false, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_f32_exp_and_tanh_track_libm() {
        for i in -800..=0 {
            let x = i as f32 * 0.1;
            let got = x.exp_approx();
            let want = x.exp();
            assert!(
                (got - want).abs() <= 2e-7 * want.max(1e-30),
                "exp({x}): {got} vs {want}"
            );
        }
        for i in -100..=100 {
            let x = i as f32 * 0.1;
            let got = x.tanh_approx();
            let want = x.tanh();
            assert!((got - want).abs() <= 4e-7, "tanh({x}): {got} vs {want}");
        }
        // f64 paths stay exact
        assert_eq!(2.5f64.exp_approx(), 2.5f64.exp());
        assert_eq!(0.7f64.tanh_approx(), 0.7f64.tanh());
    }

    #[test]
    fn gemm_transposes() {
        // a stored [k,m], b stored [n,k]
        let a = vec![1.0f64, 2.0, 3.0, 4.0]; // [2,2] = [[1,2],[3,4]]
        let b = vec![5.0f64, 6.0, 7.0, 8.0];
        let mut c = vec![0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, true, &b, true, 0.0, &mut c);
        // a_eff = [[1,3],[2,4]], b_eff = [[5,7],[6,8]]
        assert_eq!(c, vec![23.0, 31.0, 34.0, 46.0]);
    }
}
