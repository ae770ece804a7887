//! Dense row-major `f64` arrays and the handful of kernels the engine is
//! built from: matrix products, 2-D cross-correlation and max pooling.
//!
//! Matrix products go through `matrixmultiply`'s packed kernels. The output
//! is cut into fixed blocks of rows that are computed independently, so the
//! result does not depend on how many worker threads are available.

use crate::error::{Error, Result};
use crate::par;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Build a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Leading dimension (batch size for batched tensors).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.row_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.row_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                got: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn expect_shape(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: shape.to_vec(),
                got: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        self.expect_shape(op, &other.shape)
    }

    fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::ShapeMismatch {
                op,
                expected: vec![0, 0],
                got: self.shape.clone(),
            }),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.expect_2d("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Index of the largest entry of each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| argmax(self.row(i)))
            .collect()
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `c = beta * c + a * b` for row-major `a: m×k` (strides `rsa`, `csa`),
/// `b: k×n` (strides `rsb`, `csb`) and contiguous `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let block = par::GEMM_ROW_BLOCK * n;
    par::for_each_chunk_mut(c, block, |bi, chunk| {
        let row0 = bi * par::GEMM_ROW_BLOCK;
        let rows = chunk.len() / n;
        // SAFETY: the slices cover every element addressed by the given
        // dimensions and strides, and `chunk` is an exclusive borrow.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(row0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Standard matrix product of `a: m×k` and `b: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul")?;
    let (k2, n) = b.expect_2d("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: vec![k, n],
            got: b.shape.clone(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &a.data, k, 1, &b.data, n, 1, 0.0, &mut c);
    Tensor::new(vec![m, n], c)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul_nt")?;
    let (n, k2) = b.expect_2d("matmul_nt")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            expected: vec![n, k],
            got: b.shape.clone(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &a.data, k, 1, &b.data, 1, k, 0.0, &mut c);
    Tensor::new(vec![m, n], c)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.expect_2d("matmul_tn")?;
    let (k2, n) = b.expect_2d("matmul_tn")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            expected: vec![k, n],
            got: b.shape.clone(),
        });
    }
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, &a.data, 1, m, &b.data, n, 1, 0.0, &mut c);
    Tensor::new(vec![m, n], c)
}

/// Static geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d input",
                    expected: vec![0, 0, 0],
                    got: input.to_vec(),
                })
            }
        };
        let (c_out, k) = match *kernels {
            [co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d kernels",
                    expected: vec![0, c_in, 0, 0],
                    got: kernels.to_vec(),
                })
            }
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let padded = h.min(w) + 2 * pad;
        if k > padded || k == 0 {
            return Err(Error::KernelTooLarge { kernel: k, padded });
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.c_out, self.out_h(), self.out_w()]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Patch matrix of shape `(c_in·k·k) × (out_h·out_w)`; padded cells are 0.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.k);
        let npos = oh * ow;
        let mut cols = vec![0.0; self.patch_len() * npos];
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a patch matrix back onto an input-shaped buffer.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.k);
        let npos = oh * ow;
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * npos..(row + 1) * npos];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + iy as usize) * self.w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                x[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Cross-correlation of one `C_in×H×W` sample with `C_out×C_in×k×k` kernels.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernels.shape(), stride, pad)?;
    let out = conv2d_raw(&g, input.data(), kernels.data());
    Tensor::new(g.out_shape().to_vec(), out)
}

pub(crate) fn conv2d_raw(g: &ConvGeometry, x: &[f64], kernels: &[f64]) -> Vec<f64> {
    let cols = g.im2col(x);
    let (pl, np) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; g.c_out * np];
    gemm(g.c_out, pl, np, kernels, pl, 1, &cols, np, 1, 0.0, &mut out);
    out
}

/// Pull an output-shaped signal back onto the input through the transposed
/// kernels: `x_i = Σ_{j, pos} k_{j,i,pos} · up_{j,pos}`.
pub(crate) fn conv2d_backward_input(g: &ConvGeometry, upstream: &[f64], kernels: &[f64]) -> Vec<f64> {
    let (pl, np) = (g.patch_len(), g.positions());
    let mut cols = vec![0.0; pl * np];
    // kernelsᵀ (pl × c_out) · upstream (c_out × np)
    gemm(pl, g.c_out, np, kernels, 1, pl, upstream, np, 1, 0.0, &mut cols);
    g.col2im(&cols)
}

/// Correlate an output-shaped signal with the input patches:
/// `k_{j,i,pos} = Σ_positions up_j · x_i`.
pub(crate) fn conv2d_backward_kernel(g: &ConvGeometry, upstream: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = g.im2col(x);
    let (pl, np) = (g.patch_len(), g.positions());
    let mut dk = vec![0.0; g.c_out * pl];
    // upstream (c_out × np) · colsᵀ (np × pl)
    gemm(g.c_out, np, pl, upstream, np, 1, &cols, 1, np, 0.0, &mut dk);
    dk
}

/// Winner of every max-pooling window, as flat indices into the pooled input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndex {
    pub input_shape: Vec<usize>,
    pub k: usize,
    pub stride: usize,
    pub winners: Vec<usize>,
}

impl PoolIndex {
    /// Route an output-shaped signal to the recorded winners.
    pub fn scatter(&self, upstream: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_shape.iter().product()];
        for (&w, &u) in self.winners.iter().zip(upstream) {
            out[w] += u;
        }
        out
    }
}

/// Max pooling over the last two axes of a `…×H×W` tensor. Ties resolve to the
/// first cell of the window in row-major order.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, PoolIndex)> {
    let nd = input.ndim();
    if nd < 2 {
        return Err(Error::ShapeMismatch {
            op: "maxpool2d",
            expected: vec![0, 0, 0],
            got: input.shape().to_vec(),
        });
    }
    let (h, w) = (input.shape()[nd - 2], input.shape()[nd - 1]);
    if stride == 0 || k == 0 {
        return Err(Error::InvalidArgument("maxpool2d window and stride must be >= 1".into()));
    }
    if k > h.min(w) {
        return Err(Error::WindowTooLarge {
            window: k,
            extent: h.min(w),
        });
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let planes: usize = input.shape()[..nd - 2].iter().product();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut winners = Vec::with_capacity(planes * oh * ow);
    let x = input.data();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                winners.push(best);
            }
        }
    }
    let mut shape = input.shape()[..nd - 2].to_vec();
    shape.extend([oh, ow]);
    Ok((
        Tensor::new(shape, out)?,
        PoolIndex {
            input_shape: input.shape().to_vec(),
            k,
            stride,
            winners,
        },
    ))
}
