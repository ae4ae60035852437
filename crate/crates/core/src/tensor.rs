//! Dense row-major tensors and the numeric kernels the autograd tape is
//! built from (im2col convolution, bilinear resampling, reductions).

use std::fmt::Debug;
use std::iter::Sum;

use num_like::FromF64;

use crate::error::{Error, Result};

/// Floating point element type usable by the engine.
///
/// Training runs in `f32`; gradient checks run the same graphs in `f64`.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Sum
    + FromF64
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    fn to_f64(self) -> f64;
    fn to_f32(self) -> f32;
    fn from_f32(v: f32) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a * b + beta * c` for an `m×k` by `k×n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn zero() -> Self {
        Self::default()
    }

    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

mod num_like {
    pub trait FromF64 {
        fn from_f64(v: f64) -> Self;
    }
    impl FromF64 for f32 {
        #[inline]
        fn from_f64(v: f64) -> Self {
            v as f32
        }
    }
    impl FromF64 for f64 {
        #[inline]
        fn from_f64(v: f64) -> Self {
            v
        }
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn to_f32(self) -> f32 {
                self as f32
            }
            #[inline]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(span(m, k, rsa, csa) <= a.len());
                debug_assert!(span(k, n, rsb, csb) <= b.len());
                debug_assert!(span(m, n, rsc, csc) <= c.len());
                // SAFETY: the three spans above are within their slices and
                // `c` is exclusively borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected N×C×H×W, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::Shape(format!("expected a rank-2 tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len().max(1) as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect() }
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = self.data[0];
        let mut hi = self.data[0];
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Borrow one `C×H×W` item of an `N×C×H×W` tensor.
    pub fn item_slice(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }
}

/// Output spatial size of a convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (size - 1) * stride + kernel + out_pad - 2 * pad
}

/// Unfold one `C×H×W` image into a `(C·k·k) × (oh·ow)` column matrix with
/// zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_span(ow, w, stride, kx, pad);
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * stride + kx - pad;
                        if stride == 1 {
                            line[lo..hi].copy_from_slice(&srow[first..first + hi - lo]);
                        } else {
                            for (d, s) in line[lo..hi].iter_mut().zip(srow[first..].iter().step_by(stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`.
#[inline]
fn valid_span(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(ow);
    // largest ox with ox·stride + kx < w + pad
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let (lo, hi) = valid_span(ow, w, stride, kx, pad);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * stride + kx - pad;
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    if stride == 1 {
                        for (d, s) in drow[first..first + hi - lo].iter_mut().zip(line) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in drow[first..].iter_mut().step_by(stride).zip(line) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Mirror index for reflect padding (edge sample not repeated).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Reflect-pad the spatial dims of an `N×C×H×W` tensor.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if pad >= h || pad >= w {
        return Err(Error::Shape(format!("reflect padding {pad} needs spatial size > {pad}, got {h}×{w}")));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in x.data().chunks(h * w) {
        for y in 0..ph {
            let sy = reflect_index(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect_index(xx as isize - pad as isize, w);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(&[n, c, ph, pw], out)
}

/// Adjoint of [`reflect_pad`].
pub fn reflect_pad_backward<T: Real>(grad: &Tensor<T>, pad: usize, h: usize, w: usize) -> Tensor<T> {
    let s = grad.shape();
    let (n, c, ph, pw) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (gp, op) in grad.data().chunks(ph * pw).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..ph {
            let sy = reflect_index(y as isize - pad as isize, h);
            for xx in 0..pw {
                let sx = reflect_index(xx as isize - pad as isize, w);
                op[sy * w + sx] += gp[y * pw + xx];
            }
        }
    }
    out
}

/// Two-tap weights of half-pixel bilinear 2× upsampling along one axis:
/// output `j` reads `(i0, i1, t)` meaning `(1 - t)·x[i0] + t·x[i1]`.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|j| {
            let src = ((j as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2× upsampling (half-pixel centres, edge clamp).
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut row = vec![T::zero(); ow];
    for plane in x.data().chunks(h * w) {
        for &(y0, y1, fy) in &ty {
            let (a, b) = (T::from_f64(1.0 - fy), T::from_f64(fy));
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (c0, c1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                let top = plane[y0 * w + x0] * c0 + plane[y0 * w + x1] * c1;
                let bot = plane[y1 * w + x0] * c0 + plane[y1 * w + x1] * c1;
                row[j] = top * a + bot * b;
            }
            out.extend_from_slice(&row);
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward<T: Real>(grad: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = grad.shape();
    let (n, c, ow) = (s[0], s[1], s[3]);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (gp, op) in grad.data().chunks(4 * h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (a, b) = (T::from_f64(1.0 - fy), T::from_f64(fy));
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = gp[i * ow + j];
                let (c0, c1) = (T::from_f64(1.0 - fx), T::from_f64(fx));
                op[y0 * w + x0] += g * a * c0;
                op[y0 * w + x1] += g * a * c1;
                op[y1 * w + x0] += g * b * c0;
                op[y1 * w + x1] += g * b * c1;
            }
        }
    }
    out
}

/// 2×2 box average, which is bilinear 0.5× resampling on half-pixel centres.
pub fn downsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("halving needs even dimensions, got {h}×{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Concatenate `N×Ci×H×W` tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = parts[0].dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "channel concat of {:?} with {:?}",
                parts[0].shape(),
                p.shape()
            )));
        }
        total_c += pc;
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for i in 0..n {
        for p in parts {
            out.extend_from_slice(p.item_slice(i));
        }
    }
    Tensor::new(&[n, total_c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_without_repeating_edge() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn upsample_then_box_downsample_recovers_linear_ramp_interior() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| (i % 8) as f64 * 0.1 + (i / 8) as f64 * 0.05);
        let back = downsample2x(&upsample2x(&x).unwrap()).unwrap();
        for y in 1..7 {
            for xx in 1..7 {
                assert!((back.data()[y * 8 + xx] - x.data()[y * 8 + xx]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 3, 5], |i| ((i * 7919) % 13) as f64 - 6.0);
        let g = Tensor::<f64>::from_fn(&[1, 2, 6, 10], |i| ((i * 104729) % 11) as f64 - 5.0);
        let lhs: f64 = upsample2x(&x).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2x_backward(&g, 3, 5).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn reflect_pad_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 4, 5], |i| ((i * 31) % 17) as f64);
        let g = Tensor::<f64>::from_fn(&[2, 1, 8, 9], |i| ((i * 13) % 7) as f64 - 3.0);
        let lhs: f64 = reflect_pad(&x, 2).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = reflect_pad_backward(&g, 2, 4, 5).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k, s, p) = (2, 5, 6, 3, 2, 1);
        let oh = conv_out(h, k, s, p).unwrap();
        let ow = conv_out(w, k, s, p).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let g: Vec<f64> = (0..c * k * k * oh * ow).map(|i| ((i * 17) % 9) as f64 - 4.0).collect();
        let mut cols = vec![0.0; g.len()];
        im2col(&x, c, h, w, k, s, p, oh, ow, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&g, c, h, w, k, s, p, oh, ow, &mut back);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2×3
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect(); // 3×4
        let mut c = vec![0.0f32; 8];
        f32::gemm(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1, 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }
}
