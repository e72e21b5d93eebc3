//! Dense row-major `f64` tensors.
//!
//! Every operation returns a fresh tensor and checks that its output is
//! finite. Convolution is cross-correlation (no kernel flip).

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    /// Builds a tensor, validating the shape/length invariant and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// Unchecked constructor for internal use where the invariant holds by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn checked(self, op: &'static str) -> Result<Self> {
        self.ensure_finite(op)?;
        Ok(self)
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn map_checked(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.map(f).checked(op)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c).checked("scale")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        broadcast_binary(self, other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        broadcast_binary(self, other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        broadcast_binary(self, other, "mul", |a, b| a * b)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        let target = broadcast_shape(&self.shape, shape)?;
        if target != shape {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} to {shape:?}",
                self.shape
            )));
        }
        broadcast_binary(self, &Tensor::zeros(shape), "broadcast_to", |a, _| a)
    }

    /// Rows `indices` of the leading axis, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let rows = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("select_rows on a scalar"))?;
        let row_len = self.numel() / rows;
        let mut data = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape(format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(&self.data[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        if indices.is_empty() {
            return Err(Error::shape("select_rows with no indices"));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Index of the largest entry in each row of a matrix; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        let (rows, cols) = self.dims2()?;
        Ok((0..rows)
            .map(|r| {
                let row = &self.data[r * cols..(r + 1) * cols];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `rank` trailing axes, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let axis = i + rank - shape.len();
        strides[axis] = if shape[i] == 1 && out[axis] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_parts(a.shape.clone(), data).checked(op);
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f(a.data[oa], b.data[ob]));
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape, data).checked(op)
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape(format!("concat axis {axis} on rank {rank}")));
    }
    for t in tensors {
        let same = t.rank() == rank
            && (0..rank).all(|i| i == axis || t.shape[i] == first.shape[i]);
        if !same {
            return Err(Error::shape(format!(
                "concat of {:?} with {:?} along axis {axis}",
                first.shape, t.shape
            )));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut shape = first.shape.clone();
    shape[axis] = tensors.iter().map(|t| t.shape[axis]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in tensors {
            let chunk = t.shape[axis] * inner;
            data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// `c (m×n) = op(a) · op(b)`, accumulated into `c` when `accumulate`.
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::from_parts(vec![m, n], out).checked("matmul")
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[_, c, h, wd], &[_, wc, kh, kw]) = (x, w) else {
            return Err(Error::shape(format!("conv2d expects rank-4 input and kernel, got {x:?} and {w:?}")));
        };
        if c != wc {
            return Err(Error::shape(format!(
                "conv2d input has {c} channels, kernel expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        Ok(Self {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }

    /// Input pixel feeding column `(oy, ox)` at kernel tap `(ky, kx)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then_some((y as usize, x as usize))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let area = self.out_area();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * area..(row + 1) * area];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, xx)) => plane[y * self.w + xx],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let area = self.out_area();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * area..(row + 1) * area];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                dx[(ci * self.h + y) * self.w + xx] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `x: N×C×H×W`, `w: F×C×kh×kw` → `N×F×H'×W'`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(&x.shape, &w.shape, stride, padding)?;
    let n = x.shape[0];
    let f = w.shape[0];
    let (patch, area) = (g.patch(), g.out_area());
    let in_len = g.c * g.h * g.w;
    let mut cols = vec![0.0; patch * area];
    let mut out = vec![0.0; n * f * area];
    for s in 0..n {
        g.im2col(&x.data[s * in_len..(s + 1) * in_len], &mut cols);
        gemm(
            f,
            patch,
            area,
            &w.data,
            false,
            &cols,
            false,
            &mut out[s * f * area..(s + 1) * f * area],
            false,
        );
    }
    Tensor::from_parts(vec![n, f, g.oh, g.ow], out).checked("conv2d")
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(&x.shape, &w.shape, stride, padding)?;
    let n = x.shape[0];
    let f = w.shape[0];
    let (patch, area) = (g.patch(), g.out_area());
    let in_len = g.c * g.h * g.w;
    let mut cols = vec![0.0; patch * area];
    let mut dcols = vec![0.0; patch * area];
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    for s in 0..n {
        let dys = &dy.data[s * f * area..(s + 1) * f * area];
        g.im2col(&x.data[s * in_len..(s + 1) * in_len], &mut cols);
        // dW += dY · colsᵀ
        gemm(f, area, patch, dys, false, &cols, true, &mut dw, true);
        // dcols = Wᵀ · dY
        gemm(patch, f, area, &w.data, true, dys, false, &mut dcols, false);
        g.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    Ok((
        Tensor::from_parts(x.shape.clone(), dx),
        Tensor::from_parts(w.shape.clone(), dw),
    ))
}

fn pool_geom(x: &Tensor, k: usize, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 {
        return Err(Error::invalid("pool window and stride must be positive"));
    }
    if k > h || k > w {
        return Err(Error::shape(format!(
            "pool window {k} exceeds spatial size {h}x{w}"
        )));
    }
    Ok((n, c, h, w, (h - k) / stride + 1, (w - k) / stride + 1))
}

/// Max pooling; also returns the flat input index of each selected element.
/// Ties resolve to the first index in scan order.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w, oh, ow) = pool_geom(x, k, stride)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                }
                out.push(x.data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn avg_pool2d(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w, oh, ow) = pool_geom(x, k, stride)?;
    let norm = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x.data[base + (oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Mean and biased (population) variance over `axes`. Reduced axes are kept
/// with size 1 so the statistics broadcast against `x`.
pub fn reduce_mean_var(x: &Tensor, axes: &[usize]) -> Result<(Tensor, Tensor)> {
    if axes.is_empty() {
        return Err(Error::EmptyReduction(axes.to_vec()));
    }
    if let Some(&bad) = axes.iter().find(|&&a| a >= x.rank()) {
        return Err(Error::shape(format!("axis {bad} out of range for {:?}", x.shape)));
    }
    let mut out_shape = x.shape.clone();
    for &a in axes {
        out_shape[a] = 1;
    }
    let out_n: usize = out_shape.iter().product();
    let count = (x.numel() / out_n) as f64;
    let out_strides = broadcast_strides(&out_shape, &x.shape);
    let offsets = flat_offsets(&x.shape, &out_strides);

    let mut mean = vec![0.0; out_n];
    for (v, &o) in x.data.iter().zip(&offsets) {
        mean[o] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; out_n];
    for (v, &o) in x.data.iter().zip(&offsets) {
        let d = v - mean[o];
        var[o] += d * d;
    }
    var.iter_mut().for_each(|s| *s /= count);
    Ok((
        Tensor::from_parts(out_shape.clone(), mean).checked("reduce_mean_var")?,
        Tensor::from_parts(out_shape, var).checked("reduce_mean_var")?,
    ))
}

/// For each element of a tensor of `shape`, its offset under `strides`.
fn flat_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    x.ensure_finite("softmax input")?;
    if axis >= x.rank() {
        return Err(Error::shape(format!("softmax axis {axis} on {:?}", x.shape)));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (x.data[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape.clone(), out).checked("softmax")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        t(&[m, n], &out)
    }

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (f, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * f * oh * ow];
        for s in 0..n {
            for fo in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ci) * h + y as usize) * wd + xx as usize]
                                        * w.data()[((fo * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((s * f + fo) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        t(&[n, f, oh, ow], &out)
    }

    #[test]
    fn new_rejects_bad_length_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut rng = SeededRng::new(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(matmul(&Tensor::eye(3), &a).unwrap(), a);
        let r = matmul(&t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2, 1], &[1., 1.])).unwrap();
        assert_eq!(r, t(&[2, 1], &[3., 7.]));
        let z = matmul(&Tensor::zeros(&[2, 3]), &a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_naive_and_rejects_mismatch() {
        let mut rng = SeededRng::new(2);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_hand_case() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let w = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), t(&[1, 1, 1, 1], &[5.]));
    }

    #[test]
    fn conv2d_identity_and_zero_kernels() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng);
        let id = conv2d(&x, &Tensor::ones(&[1, 1, 1, 1]), 1, 0).unwrap();
        assert_eq!(id, x);
        let z = conv2d(&x, &Tensor::zeros(&[3, 1, 3, 3]), 1, 1).unwrap();
        assert_eq!(z.shape(), &[2, 3, 4, 5]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_matches_naive_with_stride_and_padding() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let got = conv2d(&x, &w, s, p).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &w, s, p)) < 1e-12, "stride {s} pad {p}");
        }
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &w, 1, 0).is_err());
        assert!(conv2d(&x, &w, 1, 1).is_ok());
    }

    #[test]
    fn reduce_mean_var_cases() {
        let (m, v) = reduce_mean_var(&t(&[4], &[1., 2., 3., 4.]), &[0]).unwrap();
        assert_eq!(m.data(), &[2.5]);
        assert_eq!(v.data(), &[1.25]);
        let (_, v) = reduce_mean_var(&Tensor::full(&[2, 3, 4], 0.7), &[0, 2]).unwrap();
        assert_eq!(v.shape(), &[1, 3, 1]);
        assert!(v.data().iter().all(|&s| s <= 1e-15));
        assert!(matches!(
            reduce_mean_var(&Tensor::zeros(&[2]), &[]),
            Err(Error::EmptyReduction(_))
        ));
    }

    #[test]
    fn reduce_mean_var_of_self_concat_keeps_mean() {
        let mut rng = SeededRng::new(5);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let xx = concat(&[&x, &x], 0).unwrap();
        let (m1, v1) = reduce_mean_var(&x, &[0, 1]).unwrap();
        let (m2, v2) = reduce_mean_var(&xx, &[0, 1]).unwrap();
        assert!((m1.item().unwrap() - m2.item().unwrap()).abs() < 1e-15);
        assert!((v1.item().unwrap() - v2.item().unwrap()).abs() < 1e-14);
    }

    #[test]
    fn reduce_channel_stats_over_batch_and_space() {
        // [2, 2, 1, 2]: channel 0 holds 1,2,5,6; channel 1 holds 3,4,7,8.
        let x = t(&[2, 2, 1, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let (m, v) = reduce_mean_var(&x, &[0, 2, 3]).unwrap();
        assert_eq!(m.shape(), &[1, 2, 1, 1]);
        assert_eq!(m.data(), &[3.5, 5.5]);
        assert_eq!(v.data(), &[4.25, 4.25]);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&Tensor::zeros(&[4]), 0).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = softmax(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]), 0).unwrap();
        for (got, want) in p.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((got - want).abs() < 1e-12);
        }
        let x = t(&[2, 3], &[1., 2., 3., -1., 0., 1000.]);
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&x.map(|v| v + 17.5), 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn broadcasting_add() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        assert_eq!(a.add(&b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let c = t(&[2, 1], &[1., 2.]);
        assert_eq!(a.mul(&c).unwrap().data(), &[1., 2., 3., 8., 10., 12.]);
        assert!(a.add(&t(&[2], &[1., 2.])).is_err());
        assert_eq!(b.broadcast_to(&[2, 3]).unwrap().data(), &[10., 20., 30., 10., 20., 30.]);
    }

    #[test]
    fn pools() {
        let x = t(&[1, 1, 2, 4], &[1., 5., 2., 2., 3., 4., 0., 1.]);
        let (m, arg) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(m.data(), &[5., 2.]);
        assert_eq!(arg, vec![1, 2]);
        let a = avg_pool2d(&x, 2, 2).unwrap();
        assert_eq!(a.data(), &[13. / 4., 5. / 4.]);
        assert!(max_pool2d(&Tensor::zeros(&[1, 1, 1, 1]), 2, 2).is_err());
    }

    #[test]
    fn concat_axis1() {
        let a = t(&[2, 1], &[1., 2.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(concat(&[&a, &b], 1).unwrap().data(), &[1., 3., 4., 2., 5., 6.]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..8, shift in -50.0f64..50.0) {
                let mut rng = SeededRng::new(seed);
                let x = Tensor::randn(&[rows, cols], 5.0, &mut rng);
                let p = softmax(&x, 1).unwrap();
                for r in 0..rows {
                    let s: f64 = p.data()[r * cols..(r + 1) * cols].iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
                let q = softmax(&x.map(|v| v + shift), 1).unwrap();
                prop_assert!(p.max_abs_diff(&q) < 1e-12);
            }

            #[test]
            fn output_shapes_depend_only_on_input_shapes(
                n in 1usize..3, c in 1usize..3, h in 3usize..7, w in 3usize..7, f in 1usize..4,
                stride in 1usize..3, pad in 0usize..2, seed in 0u64..100,
            ) {
                let mut rng = SeededRng::new(seed);
                let x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);
                let k = Tensor::randn(&[f, c, 3, 3], 1.0, &mut rng);
                let y = conv2d(&x, &k, stride, pad).unwrap();
                prop_assert_eq!(y.shape(), &[n, f, (h + 2 * pad - 3) / stride + 1, (w + 2 * pad - 3) / stride + 1][..]);
                let (m, v) = reduce_mean_var(&x, &[0, 2, 3]).unwrap();
                prop_assert_eq!(m.shape(), &[1, c, 1, 1][..]);
                prop_assert_eq!(v.shape(), m.shape());
                let (p, _) = max_pool2d(&x, 2, 2).unwrap();
                prop_assert_eq!(p.shape(), &[n, c, (h - 2) / 2 + 1, (w - 2) / 2 + 1][..]);
            }

            #[test]
            fn randn_is_reproducible(seed in any::<u64>()) {
                let a = Tensor::randn(&[3, 4], 1.0, &mut SeededRng::new(seed));
                let b = Tensor::randn(&[3, 4], 1.0, &mut SeededRng::new(seed));
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
