//! Dense row-major tensors and named parameters.
//!
//! Tensors are deliberately plain: a shape and a `Vec` of values. All layer
//! arithmetic happens on slices in [`crate::ops`]; this type is the unit of
//! exchange at module boundaries, in checkpoints and in tests.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element width tag as stored in checkpoint and trace containers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
    U32 = 3,
    U64 = 4,
}

impl DType {
    pub fn from_code(code: u8) -> Option<DType> {
        Some(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U8,
            3 => DType::U32,
            4 => DType::U64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 | DType::U64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Floating point element usable by every layer (`f32` or `f64`).
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero extent in shape {shape:?}")));
        }
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| {
                assert!(i < e, "index {index:?} out of bounds for {:?}", self.shape);
                acc * e + i
            })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Position of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.first_non_finite() {
            Some(i) => Err(Error::Numerical(format!(
                "{what}: non-finite value at flat index {i}"
            ))),
            None => Ok(()),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, treating values by their exact representation.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        if self.shape != other.shape {
            return false;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&x, &y) in self.data.iter().zip(&other.data) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }
}

/// Batch of `[height×width×channels]` maps flowing between blocks, tagged
/// with the pyramid stage that produced it (0 = embedding).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stage: usize,
    pub data: Vec<T>,
}

impl<T: Element> FeatureMap<T> {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, stage: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), batch * height * width * channels, "feature map size");
        FeatureMap {
            batch,
            height,
            width,
            channels,
            stage,
            data,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.batch * self.height * self.width
    }

    /// Values of one sample, `[height×width×channels]`.
    pub fn sample(&self, b: usize) -> &[T] {
        let len = self.pixels() * self.channels;
        &self.data[b * len..(b + 1) * len]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.batch, self.height, self.width, self.channels], self.data.clone())
            .expect("consistent map")
    }

    pub fn from_tensor(t: &Tensor<T>, stage: usize) -> Result<Self> {
        match *t.shape() {
            [b, h, w, c] => Ok(FeatureMap::new(b, h, w, c, stage, t.data().to_vec())),
            [h, w, c] => Ok(FeatureMap::new(1, h, w, c, stage, t.data().to_vec())),
            _ => Err(Error::Dimension(format!("feature map from shape {:?}", t.shape()))),
        }
    }
}

/// A named, optionally learnable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub learnable: bool,
    /// Whether decoupled weight decay applies (matrices and kernels only).
    pub decay: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, decay: bool) -> Self {
        Parameter {
            name: name.into(),
            value,
            grad: None,
            learnable: true,
            decay,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    /// Gradient buffer, allocated on first use. Frozen parameters get `None`.
    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        if !self.learnable {
            return None;
        }
        let shape = self.value.shape().to_vec();
        Some(
            self.grad
                .get_or_insert_with(|| Tensor::zeros(&shape))
                .data_mut(),
        )
    }

    pub fn accumulate(&mut self, delta: &[T]) {
        if let Some(g) = self.grad_mut() {
            for (gi, &d) in g.iter_mut().zip(delta) {
                *gi += d;
            }
        }
    }

    /// Clears the gradient; learnable parameters get a zeroed slot.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Anything owning parameters. Visiting order is stable and defines the
/// checkpoint layout and optimizer order.
pub trait Module<T: Element> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn num_learnable(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |p| {
            if p.learnable {
                total += p.numel();
            }
        });
        total
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }
}

impl<T: Element, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl<T: Element, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for m in self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}
