//! Rank-4 tensors, column-major matrix views and convolution geometry.
//!
//! All storage is leftmost-index-fastest: element `(i0, i1, i2, i3)` of a
//! `d0 × d1 × d2 × d3` tensor lives at `i0 + i1·d0 + i2·d0·d1 + i3·d0·d1·d2`.
//! Matrices follow the BLAS column-major convention with a leading dimension.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul};

use crate::error::{ConvError, Result};

/// Scalar type accepted by the kernels.
pub trait Element:
    Copy + Send + Sync + Default + PartialEq + Debug + Add<Output = Self> + Mul<Output = Self> + AddAssign + 'static
{
    const ZERO: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `self · a + b` with a single rounding.
    fn mul_add(self, a: Self, b: Self) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
}

/// Allocates `len` default-initialized elements, reporting failure instead of aborting.
pub(crate) fn try_alloc<T: Element>(len: usize) -> Result<Vec<T>> {
    let bytes = len as u128 * std::mem::size_of::<T>() as u128;
    let mut v = Vec::new();
    v.try_reserve_exact(len)
        .map_err(|_| ConvError::AllocationFailure { bytes })?;
    v.resize(len, T::ZERO);
    Ok(v)
}

/// Dense rank-4 tensor with leftmost-fastest layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![T::ZERO; dims.iter().product()],
        }
    }

    /// Like [`Tensor4::zeros`] but surfaces allocation failure as an error.
    pub fn try_zeros(dims: [usize; 4]) -> Result<Self> {
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(ConvError::AllocationFailure { bytes: u128::MAX })?;
        Ok(Self {
            dims,
            data: try_alloc(len)?,
        })
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(ConvError::DimensionMismatch(format!(
                "tensor {dims:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i3 in 0..dims[3] {
            for i2 in 0..dims[2] {
                for i1 in 0..dims[1] {
                    for i0 in 0..dims[0] {
                        data.push(f([i0, i1, i2, i3]));
                    }
                }
            }
        }
        Self { dims, data }
    }
}

impl<T> Tensor4<T> {
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [d0, d1, d2, _] = self.dims;
        idx[0] + d0 * (idx[1] + d1 * (idx[2] + d2 * idx[3]))
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
}

impl<T> std::ops::Index<[usize; 4]> for Tensor4<T> {
    type Output = T;

    fn index(&self, idx: [usize; 4]) -> &T {
        debug_assert!(idx.iter().zip(&self.dims).all(|(i, d)| i < d));
        &self.data[self.offset(idx)]
    }
}

impl<T> std::ops::IndexMut<[usize; 4]> for Tensor4<T> {
    fn index_mut(&mut self, idx: [usize; 4]) -> &mut T {
        debug_assert!(idx.iter().zip(&self.dims).all(|(i, d)| i < d));
        let off = self.offset(idx);
        &mut self.data[off]
    }
}

/// Read-only column-major view: element `(i, j)` is `data[base + i + j·ld]`.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    base: usize,
    m: usize,
    n: usize,
    ld: usize,
}

impl<'a, T: Copy> MatRef<'a, T> {
    pub fn new(data: &'a [T], base: usize, m: usize, n: usize, ld: usize) -> Result<Self> {
        check_view(data.len(), base, m, n, ld)?;
        Ok(Self { data, base, m, n, ld })
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn ld(&self) -> usize {
        self.ld
    }

    pub fn base(&self) -> usize {
        self.base
    }

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize) -> T {
        debug_assert!(i < self.m && j < self.n);
        self.data[self.base + i + j * self.ld]
    }

    /// Column `j` as a contiguous slice of length `m`.
    #[inline]
    pub fn col(&self, j: usize) -> &'a [T] {
        let start = self.base + j * self.ld;
        &self.data[start..start + self.m]
    }
}

/// Mutable column-major view.
#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    base: usize,
    m: usize,
    n: usize,
    ld: usize,
}

impl<'a, T: Copy> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], base: usize, m: usize, n: usize, ld: usize) -> Result<Self> {
        check_view(data.len(), base, m, n, ld)?;
        Ok(Self { data, base, m, n, ld })
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn ld(&self) -> usize {
        self.ld
    }

    #[inline(always)]
    pub fn get(&self, i: usize, j: usize) -> T {
        debug_assert!(i < self.m && j < self.n);
        self.data[self.base + i + j * self.ld]
    }

    #[inline(always)]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        debug_assert!(i < self.m && j < self.n);
        self.data[self.base + i + j * self.ld] = v;
    }

    pub fn as_ref(&self) -> MatRef<'_, T> {
        MatRef {
            data: self.data,
            base: self.base,
            m: self.m,
            n: self.n,
            ld: self.ld,
        }
    }

    pub fn reborrow(&mut self) -> MatMut<'_, T> {
        MatMut {
            data: self.data,
            base: self.base,
            m: self.m,
            n: self.n,
            ld: self.ld,
        }
    }

    /// The storage spanned by columns `j0..j1`: starts at `(0, j0)` and ends
    /// just past `(m-1, j1-1)`. Column strips are disjoint in memory, which is
    /// what lets the macro-kernel hand them to different workers.
    pub(crate) fn col_span_mut(&mut self, j0: usize, j1: usize) -> &mut [T] {
        debug_assert!(j0 < j1 && j1 <= self.n);
        let start = self.base + j0 * self.ld;
        let end = self.base + (j1 - 1) * self.ld + self.m;
        &mut self.data[start..end]
    }
}

fn check_view(len: usize, base: usize, m: usize, n: usize, ld: usize) -> Result<()> {
    if ld < m.max(1) {
        return Err(ConvError::DimensionMismatch(format!(
            "leading dimension {ld} smaller than row count {m}"
        )));
    }
    if m > 0 && n > 0 {
        let last = base + (m - 1) + (n - 1) * ld;
        if last >= len {
            return Err(ConvError::DimensionMismatch(format!(
                "{m}x{n} view (ld {ld}, base {base}) exceeds buffer of {len} elements"
            )));
        }
    }
    Ok(())
}

/// Owned column-major matrix with `ld == rows`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    data: Vec<T>,
    m: usize,
    n: usize,
}

impl<T: Element> Matrix<T> {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            data: vec![T::ZERO; m * n],
            m,
            n,
        }
    }

    pub fn try_zeros(m: usize, n: usize) -> Result<Self> {
        let len = m
            .checked_mul(n)
            .ok_or(ConvError::AllocationFailure { bytes: u128::MAX })?;
        Ok(Self {
            data: try_alloc(len)?,
            m,
            n,
        })
    }

    pub fn from_col_major(m: usize, n: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != m * n {
            return Err(ConvError::DimensionMismatch(format!(
                "{m}x{n} matrix needs {} elements, got {}",
                m * n,
                data.len()
            )));
        }
        Ok(Self { data, m, n })
    }

    pub fn from_fn(m: usize, n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(f(i, j));
            }
        }
        Self { data, m, n }
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i + j * self.m]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn as_ref(&self) -> MatRef<'_, T> {
        MatRef {
            data: &self.data,
            base: 0,
            m: self.m,
            n: self.n,
            ld: self.m.max(1),
        }
    }

    pub fn as_mut(&mut self) -> MatMut<'_, T> {
        let ld = self.m.max(1);
        MatMut {
            data: &mut self.data,
            base: 0,
            m: self.m,
            n: self.n,
            ld,
        }
    }
}

/// Geometry of a convolution layer.
///
/// Filters are `k_n × k_h × k_w × c_i`, inputs `h_i × w_i × c_i × b` and
/// outputs `k_n × h_o × w_o × b`. Padding `p` is symmetric and virtual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvParams {
    pub k_n: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub c_i: usize,
    pub h_i: usize,
    pub w_i: usize,
    pub b: usize,
    pub s: usize,
    pub p: usize,
}

impl ConvParams {
    pub fn with_batch(mut self, b: usize) -> Self {
        self.b = b;
        self
    }

    pub fn filter_dims(&self) -> [usize; 4] {
        [self.k_n, self.k_h, self.k_w, self.c_i]
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.h_i, self.w_i, self.c_i, self.b]
    }

    pub fn output_tensor_dims(&self) -> Result<[usize; 4]> {
        let (h_o, w_o) = output_dims(self)?;
        Ok([self.k_n, h_o, w_o, self.b])
    }

    pub fn validate(&self) -> Result<()> {
        output_dims(self).map(|_| ())
    }
}

/// `(h_o, w_o)` from the floor formula `⌊(x_i − k + 2p)/s⌋ + 1`.
pub fn output_dims(cp: &ConvParams) -> Result<(usize, usize)> {
    let extents = [
        ("k_n", cp.k_n),
        ("k_h", cp.k_h),
        ("k_w", cp.k_w),
        ("c_i", cp.c_i),
        ("h_i", cp.h_i),
        ("w_i", cp.w_i),
        ("b", cp.b),
        ("s", cp.s),
    ];
    if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
        return Err(ConvError::InvalidGeometry(format!("{name} must be positive")));
    }
    let out = |input: usize, k: usize| -> Option<usize> {
        let span = (input + 2 * cp.p) as i64 - k as i64;
        (span >= 0).then(|| span as usize / cp.s + 1)
    };
    match (out(cp.h_i, cp.k_h), out(cp.w_i, cp.k_w)) {
        (Some(h_o), Some(w_o)) => Ok((h_o, w_o)),
        _ => Err(ConvError::InvalidGeometry(format!(
            "{}x{} filter with padding {} exceeds {}x{} input",
            cp.k_h, cp.k_w, cp.p, cp.h_i, cp.w_i
        ))),
    }
}

/// GEMM extents `m × n × k` of the lowered convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GemmDims {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GemmDims {
    pub fn new(m: usize, n: usize, k: usize) -> Self {
        Self { m, n, k }
    }

    pub fn flops(&self) -> f64 {
        2.0 * self.m as f64 * self.n as f64 * self.k as f64
    }
}

pub fn gemm_dims(cp: &ConvParams) -> Result<GemmDims> {
    let (h_o, w_o) = output_dims(cp)?;
    Ok(GemmDims {
        m: cp.k_n,
        n: h_o * w_o * cp.b,
        k: cp.k_h * cp.k_w * cp.c_i,
    })
}

/// Views `k_n × k_h × k_w × c_i` filters as the `k_n × (k_h·k_w·c_i)` matrix Â.
pub fn filters_as_matrix<T: Copy>(f: &Tensor4<T>) -> MatRef<'_, T> {
    let [k_n, k_h, k_w, c_i] = f.dims();
    MatRef {
        data: f.data(),
        base: 0,
        m: k_n,
        n: k_h * k_w * c_i,
        ld: k_n.max(1),
    }
}

/// Views a `k_n × h_o × w_o × b` output tensor as the `k_n × (h_o·w_o·b)` matrix Ĉ.
pub fn output_as_matrix<T: Copy>(o: &mut Tensor4<T>) -> MatMut<'_, T> {
    let [k_n, h_o, w_o, b] = o.dims();
    MatMut {
        data: o.data_mut(),
        base: 0,
        m: k_n,
        n: h_o * w_o * b,
        ld: k_n.max(1),
    }
}
