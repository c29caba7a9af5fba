//! Dense NCHW tensors and the kernels every MicroNet operator is built from.
//!
//! Two kernel families live here. The functions at module level are the
//! optimized paths used for inference and training. [`reference`] holds
//! naive loop implementations that count multiply-accumulates; they are the
//! oracle for the optimized paths and for the static cost model.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};

/// Element type tag, stable across archive versions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

/// Floating point element type usable in tensors.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to any float")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense 4-D array in row-major (N, C, H, W) order.
///
/// Matrices are stored as `(rows, cols, 1, 1)` and vectors as `(len, 1, 1, 1)`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for j in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new([rows, cols, 1, 1], data)
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: [data.len(), 1, 1, 1],
            data,
        }
    }

    /// Samples i.i.d. zero-mean normal values with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self { shape, data }
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    /// The `H×W` plane of one channel of one sample.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err!("shape {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Largest elementwise absolute difference, as f64.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub(crate) fn from_parts(shape: [usize; 4], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

/// Geometry of a (possibly grouped) 2-D convolution.
///
/// Padding is symmetric per axis: `padding.0` rows above and below,
/// `padding.1` columns left and right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, equal strides and padding on both axes.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (stride, stride),
            padding: (padding, padding),
            groups,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize, groups: usize) -> Self {
        Self::square(in_channels, out_channels, 1, 1, 0, groups)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.out_channels,
            self.kernel.0,
            self.kernel.1,
            self.stride.0,
            self.stride.1,
            self.groups,
        ];
        if positive.contains(&0) {
            return Err(config_err!("conv spec has a zero field: {:?}", self));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return Err(config_err!(
                "groups {} must divide in {} and out {} channels",
                self.groups,
                self.in_channels,
                self.out_channels
            ));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_per_group(), self.kernel.0, self.kernel.1]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(dim_err!(
                "input {}x{} with padding {:?} is smaller than kernel {:?}",
                h,
                w,
                self.padding,
                self.kernel
            ));
        }
        Ok((
            (h + 2 * ph - kh) / self.stride.0 + 1,
            (w + 2 * pw - kw) / self.stride.1 + 1,
        ))
    }

    /// Multiply-accumulates for one image at the given input size.
    pub fn madds(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok((oh * ow * self.out_channels * self.in_per_group() * self.kernel.0 * self.kernel.1) as u64)
    }

    fn check(&self, x: [usize; 4], w: [usize; 4], bias: Option<[usize; 4]>) -> Result<()> {
        self.validate()?;
        if x[1] != self.in_channels {
            return Err(dim_err!("input has {} channels, conv expects {}", x[1], self.in_channels));
        }
        if w != self.weight_shape() {
            return Err(dim_err!("weight shape {:?}, expected {:?}", w, self.weight_shape()));
        }
        if let Some(b) = bias {
            if b.iter().product::<usize>() != self.out_channels {
                return Err(dim_err!("bias of shape {:?} for {} outputs", b, self.out_channels));
            }
        }
        Ok(())
    }
}

/// Range of output columns `ox` for which `ox * stride + tap - pad` is in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // lo = ceil((pad - tap) / stride) when pad > tap
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    // hi = floor((in_len - 1 + pad - tap) / stride) + 1
    let hi = if in_len + pad > tap {
        ((in_len - 1 + pad - tap) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Grouped 2-D convolution (optimized direct path).
///
/// `w` has shape `(out, in/groups, kh, kw)`; `bias`, if given, has `out` elements.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.check(x.shape(), w.shape(), bias.map(|b| b.shape()))?;
    let [n, _, h, wd] = x.shape();
    let (oh, ow) = spec.output_hw(h, wd)?;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let ipg = spec.in_per_group();
    let opg = spec.out_per_group();
    let mut out = vec![T::zero(); n * spec.out_channels * oh * ow];
    let xd = x.data();
    let wdat = w.data();

    for b in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / opg;
            let plane = &mut out[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            if let Some(bias) = bias {
                let bv = bias.data()[oc];
                plane.iter_mut().for_each(|v| *v = bv);
            }
            for icg in 0..ipg {
                let ic = g * ipg + icg;
                let in_plane = &xd[(b * spec.in_channels + ic) * h * wd..][..h * wd];
                for u in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, sh, u, ph);
                    for v in 0..kw {
                        let wv = wdat[((oc * ipg + icg) * kh + u) * kw + v];
                        let (ox0, ox1) = valid_range(ow, wd, sw, v, pw);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * sh + u - ph;
                            let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                            let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                            if sw == 1 {
                                let ix0 = ox0 + v - pw;
                                let src = &in_row[ix0..ix0 + (ox1 - ox0)];
                                for (o, &s) in out_row[ox0..ox1].iter_mut().zip(src) {
                                    *o += wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    out_row[ox] += wv * in_row[ox * sw + v - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts([n, spec.out_channels, oh, ow], out))
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(grad_out: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec, in_hw: (usize, usize)) -> Result<Tensor<T>> {
    let [n, oc_n, oh, ow] = grad_out.shape();
    let (h, wd) = in_hw;
    if oc_n != spec.out_channels || spec.output_hw(h, wd)? != (oh, ow) {
        return Err(dim_err!("conv grad shape {:?} inconsistent with {:?}", grad_out.shape(), spec));
    }
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let ipg = spec.in_per_group();
    let opg = spec.out_per_group();
    let mut gx = vec![T::zero(); n * spec.in_channels * h * wd];
    let gd = grad_out.data();
    let wdat = w.data();
    for b in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / opg;
            let gplane = &gd[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            for icg in 0..ipg {
                let ic = g * ipg + icg;
                let in_plane = &mut gx[(b * spec.in_channels + ic) * h * wd..][..h * wd];
                for u in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, sh, u, ph);
                    for v in 0..kw {
                        let wv = wdat[((oc * ipg + icg) * kh + u) * kw + v];
                        let (ox0, ox1) = valid_range(ow, wd, sw, v, pw);
                        for oy in oy0..oy1 {
                            let iy = oy * sh + u - ph;
                            for ox in ox0..ox1 {
                                in_plane[iy * wd + ox * sw + v - pw] += wv * gplane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts([n, spec.in_channels, h, wd], gx))
}

/// Gradient of [`conv2d`] with respect to its weight.
pub fn conv2d_grad_weight<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let [n, _, h, wd] = x.shape();
    let [_, _, oh, ow] = grad_out.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let ipg = spec.in_per_group();
    let opg = spec.out_per_group();
    let mut gw = vec![T::zero(); spec.weight_len()];
    let gd = grad_out.data();
    let xd = x.data();
    for b in 0..n {
        for oc in 0..spec.out_channels {
            let g = oc / opg;
            let gplane = &gd[(b * spec.out_channels + oc) * oh * ow..][..oh * ow];
            for icg in 0..ipg {
                let ic = g * ipg + icg;
                let in_plane = &xd[(b * spec.in_channels + ic) * h * wd..][..h * wd];
                for u in 0..kh {
                    let (oy0, oy1) = valid_range(oh, h, sh, u, ph);
                    for v in 0..kw {
                        let (ox0, ox1) = valid_range(ow, wd, sw, v, pw);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * sh + u - ph;
                            for ox in ox0..ox1 {
                                acc += gplane[oy * ow + ox] * in_plane[iy * wd + ox * sw + v - pw];
                            }
                        }
                        gw[((oc * ipg + icg) * kh + u) * kw + v] += acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(spec.weight_shape(), gw))
}

/// Mean over the spatial positions of every channel: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(dim_err!("global_avg_pool needs H, W >= 1, got {}x{}", h, w));
    }
    let denom = T::from_usize(h * w).unwrap();
    let mut out = Vec::with_capacity(n * c);
    for b in 0..n {
        for ch in 0..c {
            out.push(x.plane(b, ch).iter().copied().sum::<T>() / denom);
        }
    }
    Ok(Tensor::from_parts([n, c, 1, 1], out))
}

/// Fully connected layer `y = x Wᵀ + b` over flattened samples.
///
/// `x` is `(N, Din)` after flattening C·H·W, `w` is `(Dout, Din, 1, 1)`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let n = x.n();
    let din = x.len() / n.max(1);
    let [dout, wdin, wh, ww] = w.shape();
    if wdin * wh * ww != din {
        return Err(dim_err!("linear input dim {} vs weight {:?}", din, w.shape()));
    }
    if let Some(b) = bias {
        if b.len() != dout {
            return Err(dim_err!("linear bias len {} vs {}", b.len(), dout));
        }
    }
    let xd = x.data();
    let wdat = w.data();
    let mut out = Vec::with_capacity(n * dout);
    for s in 0..n {
        let row = &xd[s * din..(s + 1) * din];
        for o in 0..dout {
            let wrow = &wdat[o * din..(o + 1) * din];
            let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
            for (a, b) in row.iter().zip(wrow) {
                acc += *a * *b;
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts([n, dout, 1, 1], out))
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Naive kernels that count multiply-accumulates.
///
/// Every tap of every output element is counted, padded taps included, so
/// the count equals the closed-form cost (`ConvSpec::madds` and friends).
pub mod reference {
    use super::*;

    pub fn conv2d<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        spec: &ConvSpec,
        macs: &mut u64,
    ) -> Result<Tensor<T>> {
        spec.check(x.shape(), w.shape(), bias.map(|b| b.shape()))?;
        let [n, _, h, wd] = x.shape();
        let (oh, ow) = spec.output_hw(h, wd)?;
        let (kh, kw) = spec.kernel;
        let ipg = spec.in_per_group();
        let opg = spec.out_per_group();
        let mut out = Tensor::zeros([n, spec.out_channels, oh, ow]);
        for b in 0..n {
            for oc in 0..spec.out_channels {
                let g = oc / opg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(T::zero(), |bv| bv.data()[oc]);
                        for icg in 0..ipg {
                            let ic = g * ipg + icg;
                            for u in 0..kh {
                                for v in 0..kw {
                                    *macs += 1;
                                    let iy = (oy * spec.stride.0 + u) as isize - spec.padding.0 as isize;
                                    let ix = (ox * spec.stride.1 + v) as isize - spec.padding.1 as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.at(oc, icg, u, v) * x.at(b, ic, iy as usize, ix as usize);
                                }
                            }
                        }
                        let o = out.offset(b, oc, oy, ox);
                        out.data_mut()[o] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>, macs: &mut u64) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if h == 0 || w == 0 {
            return Err(dim_err!("global_avg_pool needs H, W >= 1"));
        }
        let out = Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
            let mut acc = T::zero();
            for y in 0..h {
                for xx in 0..w {
                    acc += x.at(b, ch, y, xx);
                }
            }
            acc / T::from_usize(h * w).unwrap()
        });
        *macs += (n * c * h * w) as u64;
        Ok(out)
    }

    pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, macs: &mut u64) -> Result<Tensor<T>> {
        let n = x.n();
        let din = x.len() / n.max(1);
        let dout = w.n();
        if w.len() != dout * din {
            return Err(dim_err!("linear input dim {} vs weight {:?}", din, w.shape()));
        }
        let mut out = Vec::with_capacity(n * dout);
        for s in 0..n {
            for o in 0..dout {
                let mut acc = bias.map_or(T::zero(), |b| b.data()[o]);
                for i in 0..din {
                    *macs += 1;
                    acc += x.data()[s * din + i] * w.data()[o * din + i];
                }
                out.push(acc);
            }
        }
        Tensor::new([n, dout, 1, 1], out)
    }
}
