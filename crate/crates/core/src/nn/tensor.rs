use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;

use super::{shape_err, NnError};

/// Floating-point element type: `f64` for verification, `f32` for training and inference.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices as
    /// required by `matrixmultiply::{s,d}gemm`.
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

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite cast")
    }

    #[inline]
    fn f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<R> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R> Debug for Tensor<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<R>(), self.shape)
    }
}

impl<R: Real> Tensor<R> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<R>) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("zero extent in {shape:?}")));
        }
        if len != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self, NnError> {
        Self::from_vec(shape, data.iter().map(|&x| R::of(x)).collect())
    }

    /// Uniform samples in `[-bound, bound)`, drawn in f64 then cast.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        if bound <= 0.0 {
            return Self::zeros(shape);
        }
        let data = (0..len)
            .map(|_| R::of(rng.random_range(-bound..bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, NnError> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| S::of(x.f64())).collect(),
        }
    }

    pub fn fill(&mut self, value: R) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<R>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: R) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&x| x.f64() * x.f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<R>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<(), NnError> {
        if self.shape.len() != rank {
            return Err(shape_err(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// A trainable parameter: value plus accumulated gradient of identical shape.
#[derive(Clone, Debug)]
pub struct ParamTensor<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Tensor<R>,
}

impl<R: Real> ParamTensor<R> {
    pub fn new(name: impl Into<String>, value: Tensor<R>) -> Self {
        let grad = Tensor::zeros(value.shape());
        ParamTensor {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(R::zero());
    }

    pub fn accumulate(&mut self, g: &Tensor<R>) {
        self.grad.add_assign(g);
    }

    pub fn cast<S: Real>(&self) -> ParamTensor<S> {
        ParamTensor {
            name: self.name.clone(),
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}
