//! Dense tensors over f32 (training/inference) or f64 (gradient checks).

use crate::error::{shape_err, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar element of the numeric kernel. f32 is the production dtype;
/// f64 exists for tight finite-difference verification.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const LABEL: &'static str;

    fn c(v: f64) -> Self;
    fn f64(self) -> f64;
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// exp() tuned per precision: f32 uses a 2-ulp polynomial, f64 libm.
    fn exp_fast(self) -> Self;
}

/// Cephes-style expf: range-reduce by ln2, degree-6 polynomial, scale by
/// 2^n through the exponent bits. Max error ~2 ulp.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2EF: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    let n = (LOG2EF * x).round();
    let r = x - n * C1 - n * C2;
    let mut y = 1.987_569_2e-4f32;
    y = y.mul_add(r, 1.398_200_0e-3);
    y = y.mul_add(r, 8.333_452_0e-3);
    y = y.mul_add(r, 4.166_579_6e-2);
    y = y.mul_add(r, 1.666_666_5e-1);
    y = y.mul_add(r, 5.000_000_1e-1);
    let y = y * r * r + r + 1.0;
    let scale = f32::from_bits((((n as i32) + 127) as u32) << 23);
    y * scale
}

impl Real for f32 {
    const LABEL: &'static str = "f32";

    fn c(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }
}

impl Real for f64 {
    const LABEL: &'static str = "f64";

    fn c(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
    fn exp_fast(self) -> Self {
        self.exp()
    }
}

/// Contiguous row-major tensor. `product(shape) == data.len()` always holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::std_normal(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Interpret as [N, C, H, W].
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(format!("expected 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(shape_err(format!("expected 3-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(shape_err(format!("expected 2-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        check_slice_finite(&self.data, context).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{m} (shape {:?})", self.shape)),
            other => other,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise a - b.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "sub: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise a + b.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "add: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    /// Max |a - b| over all elements.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max)
    }
}

/// Vectorizable finiteness scan: x*0 is zero for finite x and NaN for
/// NaN/Inf, so eight independent lanes of sum(x*0) stay exactly zero iff
/// the slice is finite. On failure, rescan to name the offender.
pub(crate) fn check_slice_finite<T: Real>(data: &[T], context: &str) -> Result<()> {
    let zero = T::zero();
    let mut lanes = [zero; 8];
    let mut chunks = data.chunks_exact(8);
    for chunk in &mut chunks {
        for (lane, &v) in lanes.iter_mut().zip(chunk) {
            *lane = *lane + v * zero;
        }
    }
    let mut tail_ok = true;
    for v in chunks.remainder() {
        tail_ok &= v.is_finite();
    }
    if tail_ok && lanes.iter().all(|l| *l == zero) {
        return Ok(());
    }
    let (i, v) = data
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite())
        .expect("scan flagged a non-finite value");
    Err(Error::NonFinite(format!("{context}: element {i} is {v}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn finiteness_is_an_error_state() {
        let mut t = Tensor::<f32>::zeros(&[4]);
        assert!(t.check_finite("ok").is_ok());
        t.data_mut()[2] = f32::NAN;
        assert!(matches!(t.check_finite("bad"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::<f32>::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(t, back);
    }
}
