//! Dense 4-D tensors and the reverse-mode differentiation tape.
//!
//! Everything numeric in this crate flows through [`Tensor4D`]: a row-major,
//! contiguous `(n, c, h, w)` block of `f32`. There is no broadcasting, no
//! views, no dtype zoo. Vectors are carried as `(n, c, 1, 1)` tensors so a
//! single value type runs through the whole tape.

pub mod gradcheck;
pub mod kernels;
pub mod tape;

use crate::error::{Error, Result};
use rand::Rng;

/// A dense `(n, c, h, w)` array of 32-bit floats, row-major and contiguous.
///
/// `data.len() == n * c * h * w` always holds; constructors enforce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4D {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor4D {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4D {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, value: f32) -> Self {
        Tensor4D {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match shape ({n}, {c}, {h}, {w})",
                data.len()
            )));
        }
        Ok(Tensor4D { n, c, h, w, data })
    }

    pub fn from_fn(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut t = Tensor4D::zeros(n, c, h, w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = f(ni, ci, y, x);
                        t.data[((ni * c + ci) * h + y) * w + x] = v;
                    }
                }
            }
        }
        t
    }

    /// Uniform samples in `[lo, hi)`, filled in row-major order.
    pub fn rand_uniform<R: Rng>(
        rng: &mut R,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        lo: f32,
        hi: f32,
    ) -> Self {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor4D { n, c, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        self.data[((n * self.c + c) * self.h + y) * self.w + x] = v;
    }

    /// The contiguous `(h, w)` plane for sample `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.h * self.w;
        let off = (n * self.c + c) * hw;
        &self.data[off..off + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        let off = (n * self.c + c) * hw;
        &mut self.data[off..off + hw]
    }

    /// The contiguous `(c, h, w)` block for sample `n`.
    #[inline]
    pub fn sample(&self, n: usize) -> &[f32] {
        let chw = self.c * self.h * self.w;
        &self.data[n * chw..(n + 1) * chw]
    }

    #[inline]
    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let chw = self.c * self.h * self.w;
        &mut self.data[n * chw..(n + 1) * chw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor4D) -> bool {
        self.shape() == other.shape()
    }

    /// Copies sample `n` out as a batch-of-one tensor.
    pub fn slice_sample(&self, n: usize) -> Tensor4D {
        Tensor4D {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.sample(n).to_vec(),
        }
    }

    /// Stacks batch-of-one tensors along the batch axis.
    pub fn stack(parts: &[Tensor4D]) -> Result<Tensor4D> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let (_, c, h, w) = first.shape();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
        let mut n = 0;
        for p in parts {
            if p.c != c || p.h != h || p.w != w {
                return Err(Error::Shape(format!(
                    "stack parts disagree: ({}, {}, {}) vs ({c}, {h}, {w})",
                    p.c, p.h, p.w
                )));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor4D { n, c, h, w, data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4D {
        Tensor4D {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute entry, 0.0 for empty tensors.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor4D::from_vec(1, 2, 2, 2, vec![0.0; 7]).is_err());
        assert!(Tensor4D::from_vec(1, 2, 2, 2, vec![0.0; 8]).is_ok());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor4D::from_fn(2, 3, 4, 5, |n, c, y, x| (n * 1000 + c * 100 + y * 10 + x) as f32);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.numel() - 1], 1234.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 1234.0);
    }

    #[test]
    fn stack_restores_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor4D::rand_uniform(&mut rng, 3, 2, 4, 4, -1.0, 1.0);
        let parts: Vec<_> = (0..3).map(|i| t.slice_sample(i)).collect();
        assert_eq!(Tensor4D::stack(&parts).unwrap(), t);
    }
}
