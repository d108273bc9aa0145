//! Dense row-major tensors, the kernels the adapter equations need, and a
//! tape-based reverse-mode differentiator.
//!
//! Values are always stored as `f64`. A tensor tagged [`DType::F32`] has every
//! value rounded through `f32` after each operation, which reproduces
//! single-precision results without a second code path.

mod fd;
pub mod kernels;
mod tape;

pub use fd::{finite_diff_coords, finite_diff_grad};
pub use tape::{BackwardFault, Gradients, ParamId, ParamStore, Tape, Var};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "float32" => Ok(DType::F32),
            "f64" | "float64" => Ok(DType::F64),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            dtype: DType::F64,
            requires_grad: false,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            dtype,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![1], vec![v], DType::F64)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![v; n], DType::F64)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect(), DType::F64)
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Re-tags the tensor and rounds its values to the new precision.
    pub fn to_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        if dtype == DType::F32 {
            for v in &mut self.data {
                *v = dtype.round(*v);
            }
        }
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.dtype = self.dtype;
        Ok(t)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor::from_parts(
            vec![c, r],
            kernels::transpose(&self.data, r, c),
            self.dtype,
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let dt = self.dtype;
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| dt.round(v * c)).collect(),
            dt,
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!("add {:?} + {:?}", self.shape, other.shape));
        }
        let dt = self.dtype;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| dt.round(a + b))
                .collect(),
            dt,
        ))
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return shape_err(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape, b.shape
        ));
    }
    let mut out = kernels::gemm(&a.data, &b.data, m, k, n);
    let dt = a.dtype;
    if dt == DType::F32 {
        out.iter_mut().for_each(|v| *v = dt.round(*v));
    }
    Ok(Tensor::from_parts(vec![m, n], out, dt))
}

/// Numerically stabilized softmax along `axis`. `-inf` entries map to exactly 0.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return shape_err(format!("softmax axis {axis} out of range for {:?}", x.shape));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = vec![0.0; x.data.len()];
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = x.data[base + j * inner];
            }
            let probs = kernels::softmax_lane(&lane)?;
            for (j, p) in probs.into_iter().enumerate() {
                out[base + j * inner] = x.dtype.round(p);
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out, x.dtype))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = matmul(&Tensor::eye(2), &b).unwrap();
        assert_eq!(out.data(), b.data());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let out = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                assert!((out.at2(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax(&t(&[3], &[2.0, 1.0, f64::NEG_INFINITY]), 0).unwrap();
        let e = 1.0f64.exp();
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.data()[1] - 0.2689).abs() < 1e-4);
        assert_eq!(s.data()[2], 0.0);

        let s = softmax(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let x = t(&[2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(softmax(&x, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn f32_rounding() {
        let a = t(&[1, 1], &[0.1]).to_dtype(DType::F32);
        assert_eq!(a.data()[0], 0.1f32 as f64);
        assert_eq!(a.dtype(), DType::F32);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }
}
