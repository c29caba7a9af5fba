//! Micro-factorized convolutions.
//!
//! A pointwise layer is factored as `W = P Φ Qᵀ`: a grouped compressor `Q`
//! from `C_in` to `hidden` channels, the transpose channel shuffle `Φ` on the
//! hidden width, and a grouped expander `P` from `hidden` to `C_out`. A
//! depthwise `k×k` layer is factored into a `k×1` and a `1×k` depthwise
//! convolution, optionally multiplying the channel count on the way.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{conv2d, reference, ConvSpec, Scalar, Tensor};

/// How a rounded square-root group count is repaired when it does not divide
/// the channel counts it partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupRepair {
    /// Round `λ√h`, clamp to `[1, C]`, then step down to a common divisor.
    Down,
    /// Smallest common divisor that is at least `λ√h`. With `λ >= 1` this
    /// keeps `G1·G2 >= hidden`, so every block of `PΦQᵀ` has rank at most one.
    #[default]
    Covering,
}

/// Group count for a grouped 1×1 convolution between `wide` and `hidden` channels.
pub fn adaptive_groups(wide: usize, hidden: usize, lambda: f64, repair: GroupRepair) -> usize {
    let target = lambda * (hidden as f64).sqrt();
    let divides = |g: usize| wide.is_multiple_of(g) && hidden.is_multiple_of(g);
    match repair {
        GroupRepair::Down => {
            let mut g = (target.round() as usize).clamp(1, wide.max(1));
            while g > 1 && !divides(g) {
                g -= 1;
            }
            g
        }
        GroupRepair::Covering => (1..=wide.min(hidden))
            .find(|&g| divides(g) && g as f64 >= target - 1e-12)
            .unwrap_or_else(|| gcd(wide, hidden)),
    }
}

/// `G = clamp(round(λ·√(C/R)), 1, C)`, stepped down to a divisor of both `C` and `C/R`.
pub fn compute_groups(c: usize, r: usize, lambda: f64) -> Result<usize> {
    compute_groups_with(c, r, lambda, GroupRepair::Down)
}

pub fn compute_groups_with(c: usize, r: usize, lambda: f64, repair: GroupRepair) -> Result<usize> {
    if c == 0 || r == 0 || !(lambda > 0.0) {
        return Err(config_err!("compute_groups needs C, R >= 1 and λ > 0 (C={c}, R={r}, λ={lambda})"));
    }
    if !c.is_multiple_of(r) {
        return Err(config_err!("reduction {r} does not divide channels {c}"));
    }
    Ok(adaptive_groups(c, c / r, lambda, repair))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Source index of every output channel of the transpose shuffle.
///
/// Channel `g·(C/G) + j` of the input lands at position `j·G + g`, so
/// `out[o] = in[perm[o]]`.
pub fn shuffle_permutation(c: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(config_err!("shuffle groups {groups} must divide {c} channels"));
    }
    let per = c / groups;
    Ok((0..c)
        .map(|o| {
            let (j, g) = (o / groups, o % groups);
            g * per + j
        })
        .collect())
}

pub fn permute_channels<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if perm.len() != c {
        return Err(dim_err!("permutation of {} for {} channels", perm.len(), c));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(x.len());
    for b in 0..n {
        for &src in perm {
            out.extend_from_slice(x.plane(b, src));
        }
    }
    debug_assert_eq!(out.len(), n * c * hw);
    Tensor::new(x.shape(), out)
}

pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    permute_channels(x, &shuffle_permutation(x.c(), groups)?)
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Block-diagonal dense matrix of a grouped 1×1 weight `(out, in/groups, 1, 1)`.
pub fn grouped_dense<T: Scalar>(weight: &Tensor<T>, c_in: usize, groups: usize) -> DMatrix<f64> {
    let c_out = weight.n();
    let ipg = c_in / groups;
    let opg = c_out / groups;
    DMatrix::from_fn(c_out, c_in, |o, i| {
        if o / opg == i / ipg {
            weight.at(o, i % ipg, 0, 0).to_f64_lossy()
        } else {
            0.0
        }
    })
}

/// Grouped 1×1 convolution without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupConv1x1<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub weight: Tensor<T>,
}

impl<T: Scalar> GroupConv1x1<T> {
    pub fn new(c_in: usize, c_out: usize, groups: usize, weight: Tensor<T>) -> Result<Self> {
        let spec = ConvSpec::pointwise(c_in, c_out, groups);
        spec.validate()?;
        if weight.shape() != spec.weight_shape() {
            return Err(dim_err!("1x1 weight {:?}, expected {:?}", weight.shape(), spec.weight_shape()));
        }
        Ok(Self { c_in, c_out, groups, weight })
    }

    pub fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, groups: usize, rng: &mut R) -> Result<Self> {
        let spec = ConvSpec::pointwise(c_in, c_out, groups);
        spec.validate()?;
        Self::new(c_in, c_out, groups, he_normal(spec.weight_shape(), rng))
    }

    pub fn spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.c_in, self.c_out, self.groups)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, None, &self.spec())
    }

    pub fn dense(&self) -> DMatrix<f64> {
        grouped_dense(&self.weight, self.c_in, self.groups)
    }

    pub fn params(&self) -> usize {
        self.weight.len()
    }
}

/// Micro-factorized pointwise convolution `W = P Φ Qᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroFacPointwise<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub hidden: usize,
    pub g1: usize,
    pub g2: usize,
    /// Compressor weight, `(hidden, C_in/G1, 1, 1)`.
    pub q: Tensor<T>,
    /// Expander weight, `(C_out, hidden/G2, 1, 1)`.
    pub p: Tensor<T>,
}

impl<T: Scalar> MicroFacPointwise<T> {
    pub fn new(c_in: usize, c_out: usize, hidden: usize, g1: usize, g2: usize, q: Tensor<T>, p: Tensor<T>) -> Result<Self> {
        let layer = Self { c_in, c_out, hidden, g1, g2, q, p };
        layer.validate()?;
        Ok(layer)
    }

    /// Random layer with `hidden = C_in / R` and group counts from the square-root law.
    pub fn random<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        reduction: usize,
        lambda: f64,
        repair: GroupRepair,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || !c_in.is_multiple_of(reduction) {
            return Err(config_err!("reduction {reduction} does not divide {c_in}"));
        }
        let hidden = c_in / reduction;
        let g1 = adaptive_groups(c_in, hidden, lambda, repair);
        let g2 = adaptive_groups(c_out, hidden, lambda, repair);
        Self::with_groups(c_in, c_out, hidden, g1, g2, rng)
    }

    pub fn with_groups<R: Rng + ?Sized>(c_in: usize, c_out: usize, hidden: usize, g1: usize, g2: usize, rng: &mut R) -> Result<Self> {
        let q_spec = ConvSpec::pointwise(c_in, hidden, g1);
        let p_spec = ConvSpec::pointwise(hidden, c_out, g2);
        q_spec.validate()?;
        p_spec.validate()?;
        Self::new(
            c_in,
            c_out,
            hidden,
            g1,
            g2,
            he_normal(q_spec.weight_shape(), rng),
            he_normal(p_spec.weight_shape(), rng),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.compressor_spec();
        let p = self.expander_spec();
        q.validate()?;
        p.validate()?;
        if !self.hidden.is_multiple_of(self.g1) {
            return Err(config_err!("G1 {} must divide hidden {}", self.g1, self.hidden));
        }
        if self.q.shape() != q.weight_shape() || self.p.shape() != p.weight_shape() {
            return Err(dim_err!(
                "factor shapes Q {:?} P {:?}, expected {:?} {:?}",
                self.q.shape(),
                self.p.shape(),
                q.weight_shape(),
                p.weight_shape()
            ));
        }
        Ok(())
    }

    pub fn compressor_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.c_in, self.hidden, self.g1)
    }

    pub fn expander_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.hidden, self.c_out, self.g2)
    }

    pub fn permutation(&self) -> Vec<usize> {
        shuffle_permutation(self.hidden, self.g1).expect("validated layer")
    }

    pub fn params(&self) -> usize {
        self.c_in * self.hidden / self.g1 + self.hidden * self.c_out / self.g2
    }

    pub fn madds(&self, h: usize, w: usize) -> u64 {
        (h * w * self.params()) as u64
    }

    /// Input-to-output paths reaching each output channel.
    pub fn connectivity(&self) -> u64 {
        (self.c_in * self.hidden / (self.g1 * self.g2)) as u64
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        mfp_forward(x, self)
    }

    /// Dense `C_out×C_in` matrix `P Φ Qᵀ`.
    pub fn expand_dense(&self) -> DMatrix<f64> {
        let p = grouped_dense(&self.p, self.hidden, self.g2);
        let qt = grouped_dense(&self.q, self.c_in, self.g1);
        let perm = self.permutation();
        let phi = DMatrix::from_fn(self.hidden, self.hidden, |o, t| if perm[o] == t { 1.0 } else { 0.0 });
        p * phi * qt
    }
}

pub fn mfp_forward<T: Scalar>(x: &Tensor<T>, layer: &MicroFacPointwise<T>) -> Result<Tensor<T>> {
    layer.validate()?;
    let z = conv2d(x, &layer.q, None, &layer.compressor_spec())?;
    let z = channel_shuffle(&z, layer.g1)?;
    conv2d(&z, &layer.p, None, &layer.expander_spec())
}

/// Applies a dense `C_out×C_in` matrix as a 1×1 convolution through the reference kernel.
pub fn apply_dense<T: Scalar>(x: &Tensor<T>, w: &DMatrix<f64>) -> Result<Tensor<T>> {
    let (c_out, c_in) = w.shape();
    let weight = Tensor::from_fn([c_out, c_in, 1, 1], |o, i, _, _| T::from_f64_lossy(w[(o, i)]));
    let mut macs = 0;
    reference::conv2d(x, &weight, None, &ConvSpec::pointwise(c_in, c_out, 1), &mut macs)
}

/// Splits a channel multiplier `e` into `(e1, e2)` with `e1` the largest divisor satisfying `e1² <= e`.
pub fn expansion_split(e: usize) -> (usize, usize) {
    let e1 = (1..=e).filter(|d| e.is_multiple_of(*d) && d * d <= e).max().unwrap_or(1);
    (e1, e / e1)
}

/// Micro-factorized depthwise convolution: `k×1` then `1×k`, both depthwise.
///
/// Input channel `i` feeds `e1` intermediate channels, each of which feeds `e2`
/// outputs, so output `(i·e1 + a)·e2 + b` sees the kernel `col[i·e1+a] ⊗ row[o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroFacDepthwise<T> {
    pub channels: usize,
    pub k: usize,
    pub stride: usize,
    pub e1: usize,
    pub e2: usize,
    /// `(C·e1, 1, k, 1)`.
    pub w_col: Tensor<T>,
    /// `(C·e1·e2, 1, 1, k)`.
    pub w_row: Tensor<T>,
}

impl<T: Scalar> MicroFacDepthwise<T> {
    pub fn new(channels: usize, k: usize, stride: usize, expansion: usize, w_col: Tensor<T>, w_row: Tensor<T>) -> Result<Self> {
        if expansion == 0 {
            return Err(config_err!("depthwise expansion must be a positive integer"));
        }
        let (e1, e2) = expansion_split(expansion);
        let layer = Self { channels, k, stride, e1, e2, w_col, w_row };
        layer.col_spec().validate()?;
        layer.row_spec().validate()?;
        if layer.w_col.shape() != layer.col_spec().weight_shape() || layer.w_row.shape() != layer.row_spec().weight_shape() {
            return Err(dim_err!(
                "depthwise weights {:?} {:?} for C={} k={} e={}",
                layer.w_col.shape(),
                layer.w_row.shape(),
                channels,
                k,
                expansion
            ));
        }
        Ok(layer)
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, k: usize, stride: usize, expansion: usize, rng: &mut R) -> Result<Self> {
        if expansion == 0 || channels == 0 || k == 0 || stride == 0 {
            return Err(config_err!("depthwise needs positive C, k, stride and expansion"));
        }
        let (e1, e2) = expansion_split(expansion);
        let col = he_normal([channels * e1, 1, k, 1], rng);
        let row = he_normal([channels * e1 * e2, 1, 1, k], rng);
        Self::new(channels, k, stride, expansion, col, row)
    }

    pub fn expansion(&self) -> usize {
        self.e1 * self.e2
    }

    pub fn out_channels(&self) -> usize {
        self.channels * self.expansion()
    }

    pub fn col_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.channels,
            out_channels: self.channels * self.e1,
            kernel: (self.k, 1),
            stride: (self.stride, 1),
            padding: (self.k / 2, 0),
            groups: self.channels,
        }
    }

    pub fn row_spec(&self) -> ConvSpec {
        let mid = self.channels * self.e1;
        ConvSpec {
            in_channels: mid,
            out_channels: mid * self.e2,
            kernel: (1, self.k),
            stride: (1, self.stride),
            padding: (0, self.k / 2),
            groups: mid,
        }
    }

    /// Geometry of the equivalent single `k×k` convolution.
    pub fn full_spec(&self) -> ConvSpec {
        ConvSpec::square(self.channels, self.out_channels(), self.k, self.stride, self.k / 2, self.channels)
    }

    /// The `(C·e, 1, k, k)` outer-product kernel.
    pub fn effective_kernel(&self) -> Tensor<T> {
        let k = self.k;
        Tensor::from_fn([self.out_channels(), 1, k, k], |o, _, u, v| {
            self.w_col.at(o / self.e2, 0, u, 0) * self.w_row.at(o, 0, 0, v)
        })
    }

    pub fn params(&self) -> usize {
        self.w_col.len() + self.w_row.len()
    }

    pub fn madds(&self, h: usize, w: usize) -> Result<u64> {
        let (mh, mw) = self.col_spec().output_hw(h, w)?;
        Ok(self.col_spec().madds(h, w)? + self.row_spec().madds(mh, mw)?)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        mfd_forward(x, self)
    }
}

pub fn mfd_forward<T: Scalar>(x: &Tensor<T>, layer: &MicroFacDepthwise<T>) -> Result<Tensor<T>> {
    let z = conv2d(x, &layer.w_col, None, &layer.col_spec())?;
    conv2d(&z, &layer.w_row, None, &layer.row_spec())
}

/// Lite combination: channel-expanding factorized depthwise, then one grouped squeeze.
pub fn lite_forward<T: Scalar>(x: &Tensor<T>, dw: &MicroFacDepthwise<T>, squeeze: &GroupConv1x1<T>) -> Result<Tensor<T>> {
    if squeeze.c_in != dw.out_channels() {
        return Err(dim_err!("squeeze expects {} channels, depthwise gives {}", squeeze.c_in, dw.out_channels()));
    }
    squeeze.forward(&mfd_forward(x, dw)?)
}

/// MAdds of the lite combination `c_in -> wide -> hidden` at stride 1.
pub fn lite_madds(c_in: usize, wide: usize, hidden: usize, k: usize, hw: (usize, usize), repair: GroupRepair) -> u64 {
    let (e1, _) = expansion_split(wide / c_in);
    let pos = (hw.0 * hw.1) as u64;
    let dw = pos * (c_in * e1 * k + wide * k) as u64;
    let g = adaptive_groups(wide, hidden, 1.0, repair);
    dw + pos * (wide * hidden / g) as u64
}

/// MAdds of the regular combination with the same endpoints: a factorized
/// pointwise expansion `c_in -> wide`, factorized depthwise on `wide`, and a
/// factorized pointwise squeeze `wide -> hidden`, all with bottleneck `hidden`.
pub fn regular_madds(c_in: usize, wide: usize, hidden: usize, k: usize, hw: (usize, usize), repair: GroupRepair) -> u64 {
    let pos = (hw.0 * hw.1) as u64;
    let mfp = |a: usize, b: usize| {
        let g1 = adaptive_groups(a, hidden, 1.0, repair);
        let g2 = adaptive_groups(b, hidden, 1.0, repair);
        (a * hidden / g1 + hidden * b / g2) as u64
    };
    pos * (mfp(c_in, wide) + 2 * (wide * k) as u64 + mfp(wide, hidden))
}

/// Width, cost and connectivity of a square micro-factorized pointwise layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityProfile {
    pub c: usize,
    pub r: usize,
    pub g: usize,
    /// Paths per output channel, `C²/(R·G²)`.
    pub e: u64,
    /// MAdds per position, `2C²/(R·G)`.
    pub o: u64,
    pub balanced: bool,
}

pub fn connectivity(c: usize, r: usize, g: usize) -> Result<ConnectivityProfile> {
    if c == 0 || r == 0 || g == 0 || !c.is_multiple_of(r) {
        return Err(config_err!("connectivity needs R | C and positive G (C={c}, R={r}, G={g})"));
    }
    let h = c / r;
    if !c.is_multiple_of(g) || !h.is_multiple_of(g) {
        return Err(config_err!("G={g} must divide C={c} and C/R={h}"));
    }
    let e = (c * h / (g * g)) as u64;
    Ok(ConnectivityProfile {
        c,
        r,
        g,
        e,
        o: (2 * c * h / g) as u64,
        balanced: e == c as u64,
    })
}

/// Counts `(input, hidden)` pairs that reach `out_channel` through nonzero
/// structural blocks of `Q`, `Φ` and `P`.
pub fn path_count_oracle<T: Scalar>(layer: &MicroFacPointwise<T>, out_channel: usize) -> u64 {
    let perm = layer.permutation();
    let q_in = layer.c_in / layer.g1;
    let q_out = layer.hidden / layer.g1;
    let p_in = layer.hidden / layer.g2;
    let p_out = layer.c_out / layer.g2;
    let mut count = 0;
    for (slot, &t) in perm.iter().enumerate() {
        if slot / p_in != out_channel / p_out {
            continue;
        }
        for i in 0..layer.c_in {
            if i / q_in == t / q_out {
                count += 1;
            }
        }
    }
    count
}
