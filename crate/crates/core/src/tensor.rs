//! Dense tensors, row-major matrices, im2col lowering, and the GEMM and CSR
//! product kernels everything else is built on.
//!
//! All storage is row-major. Lowering follows the "filter as a row, receptive
//! field as a column" convention: `lower_weights(w)` is `N × (C·M·K)`,
//! `im2col(x)` is `(C·M·K) × (H_out·W_out)`, and their product is the
//! convolution output with one row per filter.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Floating-point element type accepted by the matrix kernels.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← alpha·A·B + beta·C` over arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (for `c`)
    /// matrices of the stated extents.
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

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// N-dimensional dense array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return shape_err(format!("tensor extents must be >= 1, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {len} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// # Panics
    /// If any extent is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be >= 1, got {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

// ---------------------------------------------------------------------------
// Dense matrices
// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return shape_err(format!(
                "{rows}x{cols} matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn view(&self) -> MatRef<'_, T> {
        MatRef::new(&self.data, self.rows, self.cols)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn cast<U: Scalar>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    /// Copy of the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Copy of the listed columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }
}

/// Borrowed strided matrix view, used to express transposed GEMM operands
/// without copying.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// Row-major view of `rows × cols` elements at the start of `data`.
    ///
    /// # Panics
    /// If `data` is shorter than `rows·cols`.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view exceeds backing slice");
        Self {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `C ← alpha·A·B + beta·C` where `C` is a row-major `a.rows × b.cols` slice.
pub fn matmul_into<T: Scalar>(
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) -> Result<()> {
    if a.cols != b.rows {
        return shape_err(format!(
            "gemm inner dimensions differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    if c.len() != a.rows * b.cols {
        return shape_err(format!(
            "gemm output buffer holds {} elements, expected {}",
            c.len(),
            a.rows * b.cols
        ));
    }
    if a.rows == 0 || b.cols == 0 {
        return Ok(());
    }
    // SAFETY: extents and strides were validated against the backing slices
    // when the views were built; `c` is an exclusive borrow.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
    Ok(())
}

/// Dense product `a · b`.
pub fn gemm<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    matmul_into(T::one(), a.view(), b.view(), T::zero(), &mut out.data)?;
    Ok(out)
}

/// Rows of the output per parallel task.
const PAR_ROW_CHUNK: usize = 16;

/// Dense product split over output row blocks on the current rayon pool.
pub fn gemm_par<T: Scalar>(a: &DenseMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if a.cols != b.rows {
        return shape_err(format!(
            "gemm inner dimensions differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    let n = b.cols;
    let mut out = DenseMatrix::zeros(a.rows, n);
    if n == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(PAR_ROW_CHUNK * n)
        .enumerate()
        .try_for_each(|(chunk, c)| {
            let r0 = chunk * PAR_ROW_CHUNK;
            let rows = c.len() / n;
            let a_blk = MatRef::new(&a.data[r0 * a.cols..(r0 + rows) * a.cols], rows, a.cols);
            matmul_into(T::one(), a_blk, b.view(), T::zero(), c)
        })?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// CSR
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix<T = f64> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1 || row_ptr[0] != 0 {
            return shape_err("row_ptr must have rows+1 entries starting at 0");
        }
        if row_ptr[rows] != values.len() || values.len() != col_idx.len() {
            return shape_err("row_ptr[rows], values and col_idx lengths disagree");
        }
        for i in 0..rows {
            let (lo, hi) = (row_ptr[i], row_ptr[i + 1]);
            if lo > hi {
                return shape_err(format!("row_ptr decreases at row {i}"));
            }
            let cols_in_row = &col_idx[lo..hi];
            if cols_in_row.windows(2).any(|w| w[0] >= w[1]) {
                return shape_err(format!("column indices not strictly increasing in row {i}"));
            }
            if cols_in_row.last().is_some_and(|&c| c >= cols) {
                return shape_err(format!("column index out of range in row {i}"));
            }
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Drops every entry with `|value| <= zero_tol`.
    pub fn from_dense(m: &DenseMatrix<T>, zero_tol: T) -> Self {
        let mut row_ptr = Vec::with_capacity(m.rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..m.rows {
            for (j, &v) in m.row(i).iter().enumerate() {
                if v.abs() > zero_tol {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Self {
            rows: m.rows,
            cols: m.cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.data[i * self.cols + self.col_idx[p]] = self.values[p];
            }
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    fn row_product(&self, i: usize, b: &[T], n: usize, out: &mut [T]) {
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx512f") {
                // SAFETY: the feature was detected at runtime.
                unsafe { csr_row_avx512(self, i, b, n, out) };
                return;
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { csr_row_avx2(self, i, b, n, out) };
                return;
            }
        }
        csr_row_generic(self, i, b, n, out);
    }
}

#[inline(always)]
fn csr_row_generic<T: Scalar>(a: &CsrMatrix<T>, i: usize, b: &[T], n: usize, out: &mut [T]) {
    out.fill(T::zero());
    for p in a.row_ptr[i]..a.row_ptr[i + 1] {
        let v = a.values[p];
        let brow = &b[a.col_idx[p] * n..(a.col_idx[p] + 1) * n];
        for (o, &x) in out.iter_mut().zip(brow) {
            *o = *o + v * x;
        }
    }
}

// Same loop, compiled with wider vectors so the sparse kernel competes on
// equal instruction-set footing with the dense GEMM, which also picks its
// widest kernel at runtime.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn csr_row_avx512<T: Scalar>(a: &CsrMatrix<T>, i: usize, b: &[T], n: usize, out: &mut [T]) {
    csr_row_generic(a, i, b, n, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn csr_row_avx2<T: Scalar>(a: &CsrMatrix<T>, i: usize, b: &[T], n: usize, out: &mut [T]) {
    csr_row_generic(a, i, b, n, out)
}

fn check_csr_dims<T: Scalar>(a: &CsrMatrix<T>, b: &DenseMatrix<T>) -> Result<()> {
    if a.cols != b.rows {
        return shape_err(format!(
            "csr product inner dimensions differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        ));
    }
    Ok(())
}

/// Sparse-dense product `a · b` (row-wise scaled-row accumulation).
pub fn csr_dense_matmul<T: Scalar>(a: &CsrMatrix<T>, b: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    check_csr_dims(a, b)?;
    let n = b.cols;
    let mut out = DenseMatrix::zeros(a.rows, n);
    if n == 0 {
        return Ok(out);
    }
    for (i, c) in out.data.chunks_mut(n).enumerate() {
        a.row_product(i, &b.data, n, c);
    }
    Ok(out)
}

/// Sparse-dense product split over output rows on the current rayon pool.
pub fn csr_dense_matmul_par<T: Scalar>(
    a: &CsrMatrix<T>,
    b: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    check_csr_dims(a, b)?;
    let n = b.cols;
    let mut out = DenseMatrix::zeros(a.rows, n);
    if n == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, c)| a.row_product(i, &b.data, n, c));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Lowering
// ---------------------------------------------------------------------------

/// Convolution window geometry: kernel `(M, K)`, stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// `(H_out, W_out)`; errors unless both extents are positive integers.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |len: usize, k: usize, s: usize, p: usize, name: &str| -> Result<usize> {
            if k == 0 || s == 0 {
                return shape_err(format!("{name}: kernel and stride must be >= 1"));
            }
            let span = len + 2 * p;
            if span < k {
                return shape_err(format!("{name}: kernel {k} exceeds padded extent {span}"));
            }
            if (span - k) % s != 0 {
                return shape_err(format!(
                    "{name}: ({len} + 2*{p} - {k}) is not divisible by stride {s}"
                ));
            }
            Ok((span - k) / s + 1)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.pad.0, "height")?,
            axis(w, self.kernel.1, self.stride.1, self.pad.1, "width")?,
        ))
    }
}

/// Spatial description of one lowering call.
#[derive(Clone, Copy, Debug)]
pub struct LoweringShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub geometry: ConvGeometry,
}

impl LoweringShape {
    pub fn new(channels: usize, height: usize, width: usize, geometry: ConvGeometry) -> Result<Self> {
        let (out_height, out_width) = geometry.output_extent(height, width)?;
        Ok(Self {
            channels,
            height,
            width,
            out_height,
            out_width,
            geometry,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.geometry.kernel.0 * self.geometry.kernel.1
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Input column offset for output column `ox` at kernel column `kx`,
    /// or `None` when it falls in the padding.
    #[inline]
    fn source(&self, o: usize, kk: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + kk) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    /// Range of output columns whose source column is inside the image.
    fn valid_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.geometry.stride.1, self.geometry.pad.1, self.width);
        let mut lo = 0;
        while lo < self.out_width && self.source(lo, kx, s, p, w).is_none() {
            lo += 1;
        }
        let mut hi = self.out_width;
        while hi > lo && self.source(hi - 1, kx, s, p, w).is_none() {
            hi -= 1;
        }
        (lo, hi)
    }
}

/// Writes the lowered patches of one sample into `out`, a row-major matrix
/// with leading dimension `ld`, starting at column `col_offset`.
///
/// `rows` optionally restricts (and orders) the patch rows `(c, m, k)` that
/// are emitted; output row `r` takes patch row `rows[r]`.
pub fn im2col_into(
    input: &[f64],
    shape: &LoweringShape,
    rows: Option<&[usize]>,
    out: &mut [f64],
    ld: usize,
    col_offset: usize,
) {
    let (kh, kw) = shape.geometry.kernel;
    let (sh, sw) = shape.geometry.stride;
    let (ph, _) = shape.geometry.pad;
    let (h, w) = (shape.height, shape.width);
    let (ho, wo) = (shape.out_height, shape.out_width);
    let n_rows = rows.map_or(shape.patch_len(), <[usize]>::len);
    debug_assert!(input.len() >= shape.channels * h * w);
    for r in 0..n_rows {
        let patch_row = rows.map_or(r, |sel| sel[r]);
        let c = patch_row / (kh * kw);
        let ky = (patch_row / kw) % kh;
        let kx = patch_row % kw;
        let plane = &input[c * h * w..(c + 1) * h * w];
        let (lo, hi) = shape.valid_range(kx);
        let dst_row = &mut out[r * ld + col_offset..r * ld + col_offset + ho * wo];
        for oy in 0..ho {
            let dst = &mut dst_row[oy * wo..(oy + 1) * wo];
            let Some(iy) = shape.source(oy, ky, sh, ph, h) else {
                dst.fill(0.0);
                continue;
            };
            dst[..lo].fill(0.0);
            dst[hi..].fill(0.0);
            if lo == hi {
                continue;
            }
            let src = &plane[iy * w..(iy + 1) * w];
            let x0 = (lo * sw + kx) - shape.geometry.pad.1;
            if sw == 1 {
                dst[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
            } else {
                for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                    *d = src[x0 + j * sw];
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters lowered columns back onto the input
/// grid, accumulating into `grad`.
pub fn col2im_add(
    cols: &[f64],
    shape: &LoweringShape,
    rows: Option<&[usize]>,
    ld: usize,
    col_offset: usize,
    grad: &mut [f64],
) {
    let (kh, kw) = shape.geometry.kernel;
    let (sh, sw) = shape.geometry.stride;
    let (ph, _) = shape.geometry.pad;
    let (h, w) = (shape.height, shape.width);
    let (ho, wo) = (shape.out_height, shape.out_width);
    let n_rows = rows.map_or(shape.patch_len(), <[usize]>::len);
    for r in 0..n_rows {
        let patch_row = rows.map_or(r, |sel| sel[r]);
        let c = patch_row / (kh * kw);
        let ky = (patch_row / kw) % kh;
        let kx = patch_row % kw;
        let plane = &mut grad[c * h * w..(c + 1) * h * w];
        let (lo, hi) = shape.valid_range(kx);
        let src_row = &cols[r * ld + col_offset..r * ld + col_offset + ho * wo];
        for oy in 0..ho {
            let Some(iy) = shape.source(oy, ky, sh, ph, h) else {
                continue;
            };
            if lo == hi {
                continue;
            }
            let src = &src_row[oy * wo..(oy + 1) * wo];
            let dst = &mut plane[iy * w..(iy + 1) * w];
            let x0 = (lo * sw + kx) - shape.geometry.pad.1;
            for (j, &v) in src[lo..hi].iter().enumerate() {
                dst[x0 + j * sw] += v;
            }
        }
    }
}

/// Lowers a `C×H×W` input to its `(C·M·K) × (H_out·W_out)` patch matrix.
pub fn im2col(input: &Tensor, geometry: ConvGeometry) -> Result<DenseMatrix> {
    let &[c, h, w] = input.shape() else {
        return shape_err(format!("im2col expects a C×H×W tensor, got {:?}", input.shape()));
    };
    let shape = LoweringShape::new(c, h, w, geometry)?;
    let (rows, cols) = (shape.patch_len(), shape.positions());
    let mut out = DenseMatrix::zeros(rows, cols);
    im2col_into(input.data(), &shape, None, &mut out.data, cols, 0);
    Ok(out)
}

/// Reshapes a 4-D `N×C×M×K` weight tensor into the `N × (C·M·K)` GEMM weight
/// matrix. Column `(c, m, k)` is the shape fiber `W[:, c, m, k]`.
pub fn lower_weights(w: &Tensor) -> Result<DenseMatrix> {
    let &[n, c, m, k] = w.shape() else {
        return shape_err(format!("expected a 4-D weight tensor, got {:?}", w.shape()));
    };
    DenseMatrix::new(n, c * m * k, w.data().to_vec())
}
