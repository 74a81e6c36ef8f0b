//! Dense 4-D tensors (`N×C×H×W`, row-major) and a small reverse-mode tape.
//!
//! The network only needs a fixed vocabulary of image operators, so instead of
//! a general autodiff engine the tape records an [`graph::Op`] enum per node and
//! the backward pass is one `match` per operator.

pub mod conv;
pub mod graph;

pub use graph::{GateBackward, Graph, Var};

/// Shape of a tensor as `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![value])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Number of elements in one `H×W` plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `H×W` plane of sample `n`, channel `c`.
    pub fn plane_slice(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_slice_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `[start, start + len)` of every sample.
    pub fn slice_channels(&self, start: usize, len: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(start + len <= c, "channel slice out of range");
        let p = h * w;
        let mut out = Vec::with_capacity(n * len * p);
        for b in 0..n {
            let base = (b * c + start) * p;
            out.extend_from_slice(&self.data[base..base + len * p]);
        }
        Self::from_vec([n, len, h, w], out)
    }

    /// Concatenate along the channel axis. All parts must agree on `N`, `H`, `W`.
    pub fn concat_channels(parts: &[&Tensor]) -> Self {
        assert!(!parts.is_empty());
        let [n, _, h, w] = parts[0].shape;
        let p = h * w;
        let total: usize = parts.iter().map(|t| t.c()).sum();
        let mut out = Vec::with_capacity(n * total * p);
        for b in 0..n {
            for t in parts {
                assert!(t.n() == n && t.h() == h && t.w() == w, "concat shape mismatch");
                let base = b * t.c() * p;
                out.extend_from_slice(&t.data[base..base + t.c() * p]);
            }
        }
        Self::from_vec([n, total, h, w], out)
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor]) -> Self {
        assert!(!parts.is_empty());
        let [_, c, h, w] = parts[0].shape;
        let mut out = Vec::with_capacity(parts.len() * c * h * w);
        for t in parts {
            assert_eq!([t.c(), t.h(), t.w()], [c, h, w], "stack shape mismatch");
            out.extend_from_slice(&t.data);
        }
        Self::from_vec([out.len() / (c * h * w), c, h, w], out)
    }

    /// Sample `n` as a batch of one.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.shape[1] * self.plane();
        Self::from_vec(
            [1, self.shape[1], self.shape[2], self.shape[3]],
            self.data[n * per..(n + 1) * per].to_vec(),
        )
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_and_concat_invert() {
        let t = Tensor::from_vec([2, 3, 1, 2], (0..12).map(f64::from).collect());
        let a = t.slice_channels(0, 1);
        let b = t.slice_channels(1, 2);
        assert_eq!(a.data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(Tensor::concat_channels(&[&a, &b]), t);
    }

    #[test]
    fn stack_then_sample() {
        let a = Tensor::full([1, 2, 2, 2], 1.0);
        let b = Tensor::full([1, 2, 2, 2], 2.0);
        let s = Tensor::stack_batch(&[&a, &b]);
        assert_eq!(s.shape(), [2, 2, 2, 2]);
        assert_eq!(s.sample(1), b);
    }
}
