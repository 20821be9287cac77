//! Dense tensors, the scalar abstraction shared by f32 training and f64
//! verification, and the named parameter store.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks and oracles).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c <- alpha * a * b + beta * c` for strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are in elements
    /// and must be non-negative.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn extent(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                assert!(a.len() >= extent(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= extent(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= extent(m, n, c_strides), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above guarantee every addressed element
                // lies inside the borrowed slices, and `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(channels, height, width)` of a rank-3 tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C,H,W], got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Tensor<T>, scale: T) {
        assert_eq!(self.shape, other.shape, "add_scaled: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).expect("cast"))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape, "diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Periodic shift of every `[H,W]` plane: element `(y, x)` moves to
    /// `((y + dy) mod H, (x + dx) mod W)`.
    pub fn roll(&self, dy: usize, dx: usize) -> Tensor<T> {
        let (_, h, w) = self.dims3();
        let mut data = Vec::with_capacity(self.data.len());
        for plane in self.data.chunks(h * w) {
            for y in 0..h {
                let src = (y + h - dy % h) % h;
                let row = &plane[src * w..(src + 1) * w];
                let split = w - dx % w;
                data.extend_from_slice(&row[split % w..]);
                data.extend_from_slice(&row[..split % w]);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Channel plane `c` of a `[C,H,W]` tensor.
    pub fn channel(&self, c: usize) -> &[T] {
        let (_, h, w) = self.dims3();
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let (_, h, w) = self.dims3();
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    /// Channel concatenation of two `[C,H,W]` tensors with equal spatial size.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ca, ha, wa) = a.dims3();
        let (cb, hb, wb) = b.dims3();
        if (ha, wa) != (hb, wb) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}: spatial sizes differ",
                a.shape, b.shape
            )));
        }
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor {
            shape: vec![ca + cb, ha, wa],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: split after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Tensor<T>, Tensor<T>) {
        let (c, h, w) = self.dims3();
        assert!(first <= c);
        let cut = first * h * w;
        (
            Tensor {
                shape: vec![first, h, w],
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                shape: vec![c - first, h, w],
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

/// Trainable tensors addressed by hierarchical dotted names.
///
/// The same type doubles as a gradient accumulator (see [`ParamStore::zeros_like`]).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    /// Registers a tensor. Panics when the name is already taken: every
    /// parameter must be registered exactly once.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), tensor);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Gradient slot for `name`, created on first use.
    pub fn slot(&mut self, name: &str, shape: &[usize]) -> &mut Tensor<T> {
        self.tensors
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(k, _)| k.as_str())
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors.values_mut() {
            t.scale(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposed_operands() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, &a, (3, 1), &b, (4, 1), 0.0, &mut c, (4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) * c (2x4), reading `a` through swapped strides.
        let mut d = vec![0.0; 12];
        f64::gemm(3, 2, 4, 1.0, &a, (1, 3), &c, (4, 1), 0.0, &mut d, (4, 1));
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|k| a[k * 3 + i] * c[k * 4 + j]).sum();
                assert!((d[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn roll_moves_elements_periodically() {
        let (c, h, w) = (2, 3, 5);
        let t = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|v| v as f64).collect()).unwrap();
        for (dy, dx) in [(0, 0), (1, 2), (2, 4), (3, 5), (7, 11)] {
            let r = t.roll(dy, dx);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let moved = ((y + dy) % h) * w + (x + dx) % w;
                        assert_eq!(r.channel(ch)[moved], t.channel(ch)[y * w + x]);
                    }
                }
            }
        }
    }

    #[test]
    fn concat_then_split_restores_inputs() {
        let a = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let ab = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(ab.shape(), &[3, 2, 2]);
        let (a2, b2) = ab.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn concat_rejects_misaligned() {
        let a = Tensor::<f32>::zeros(&[1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 2, 3]);
        assert!(Tensor::concat_channels(&a, &b).is_err());
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut ps = ParamStore::<f32>::new();
        ps.register("a", Tensor::zeros(&[1]));
        ps.register("a", Tensor::zeros(&[1]));
    }
}
