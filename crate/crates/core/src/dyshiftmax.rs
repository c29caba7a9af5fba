//! Dynamic Shift-Max activation.
//!
//! `y_i = max_k Σ_j a[i,j,k] · x_{(i + j·C/G) mod C}` where the coefficients
//! `a` come from a squeeze-style hyper-function of the global average pool.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{global_avg_pool, linear, sigmoid, Scalar, Tensor};

/// Hyper-parameters of one activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DyShiftMaxConfig {
    pub j: usize,
    pub k: usize,
    /// Hyper-function width is `max(C / reduction, floor)`.
    pub reduction: usize,
    pub floor: usize,
}

impl Default for DyShiftMaxConfig {
    fn default() -> Self {
        Self {
            j: 2,
            k: 2,
            reduction: 8,
            floor: 8,
        }
    }
}

impl DyShiftMaxConfig {
    pub fn hidden(&self, channels: usize) -> usize {
        (channels / self.reduction.max(1)).max(self.floor).max(1)
    }
}

/// One `(channel, shift order)` pair and the channel it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftIndex {
    pub i: usize,
    pub j: usize,
    pub target: usize,
}

impl ShiftIndex {
    pub fn new(channels: usize, groups: usize, i: usize, j: usize) -> Self {
        let stride = channels / groups;
        Self {
            i,
            j,
            target: (i + j * stride) % channels,
        }
    }
}

/// Output channel `i` reads input channel `(i + j·C/G) mod C`.
pub fn circular_shift<T: Scalar>(x: &Tensor<T>, j: usize, groups: usize) -> Result<Tensor<T>> {
    let c = x.c();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(config_err!("shift groups {groups} must divide {c} channels"));
    }
    let perm: Vec<usize> = (0..c).map(|i| ShiftIndex::new(c, groups, i, j).target).collect();
    crate::microfac::permute_channels(x, &perm)
}

/// Coefficient index inside the `C·J·K` hyper-function output.
#[inline]
pub fn coef_index(i: usize, j: usize, k: usize, jn: usize, kn: usize) -> usize {
    (i * jn + j) * kn + k
}

/// DY-Shift-Max layer with its hyper-function weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DyShiftMaxLayer<T> {
    pub channels: usize,
    pub groups: usize,
    pub j: usize,
    pub k: usize,
    pub hidden: usize,
    /// `(hidden, C, 1, 1)`.
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `(C·J·K, hidden, 1, 1)`.
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> DyShiftMaxLayer<T> {
    /// Fresh layer with a zeroed output projection, so `a` starts at the
    /// init bias: the identity fusion for `K = 1` and ReLU for `K = 2`.
    pub fn new<R: Rng + ?Sized>(channels: usize, groups: usize, cfg: DyShiftMaxConfig, rng: &mut R) -> Result<Self> {
        let hidden = cfg.hidden(channels);
        let w1 = Tensor::randn([hidden, channels, 1, 1], (2.0 / channels as f64).sqrt(), rng);
        let out = channels * cfg.j * cfg.k;
        let layer = Self {
            channels,
            groups,
            j: cfg.j,
            k: cfg.k,
            hidden,
            w1,
            b1: Tensor::zeros([hidden, 1, 1, 1]),
            w2: Tensor::zeros([out, hidden, 1, 1]),
            b2: Tensor::zeros([out, 1, 1, 1]),
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.groups == 0 || self.j == 0 || self.k == 0 || self.hidden == 0 {
            return Err(config_err!("DY-Shift-Max needs positive C, G, J, K and hidden width"));
        }
        if !self.channels.is_multiple_of(self.groups) {
            return Err(config_err!("shift groups {} must divide {} channels", self.groups, self.channels));
        }
        let out = self.coef_len();
        let ok = self.w1.shape() == [self.hidden, self.channels, 1, 1]
            && self.b1.len() == self.hidden
            && self.w2.shape() == [out, self.hidden, 1, 1]
            && self.b2.len() == out;
        if !ok {
            return Err(dim_err!("hyper-function weight shapes inconsistent with C={} hidden={}", self.channels, self.hidden));
        }
        Ok(())
    }

    pub fn coef_len(&self) -> usize {
        self.channels * self.j * self.k
    }

    pub fn config(&self, reduction: usize, floor: usize) -> DyShiftMaxConfig {
        DyShiftMaxConfig {
            j: self.j,
            k: self.k,
            reduction,
            floor,
        }
    }

    pub fn params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn madds(&self, h: usize, w: usize) -> u64 {
        dysm_madds(self.channels, self.hidden, self.j, self.k, h, w)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        dysm_forward(x, self)
    }
}

/// Constant added to the mapped coefficient: 1 at `(j, k) = (0, 0)`, else 0.
#[inline]
pub fn init_bias<T: Scalar>(j: usize, k: usize) -> T {
    if j == 0 && k == 0 {
        T::one()
    } else {
        T::zero()
    }
}

/// Maps raw hyper-function outputs to coefficients: `a = 2σ(z) − 1 + init_bias`.
pub fn map_coefficients<T: Scalar>(z: &Tensor<T>, jn: usize, kn: usize) -> Tensor<T> {
    let two = T::from_f64_lossy(2.0);
    let per = jn * kn;
    let data = z
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let jk = idx % per;
            two * sigmoid(v) - T::one() + init_bias::<T>(jk / kn, jk % kn)
        })
        .collect();
    Tensor::new(z.shape(), data).expect("same shape")
}

/// Coefficients `(N, C·J·K, 1, 1)` from `gap → fc → relu → fc → sigmoid → map`.
pub fn hyper_forward<T: Scalar>(x: &Tensor<T>, layer: &DyShiftMaxLayer<T>) -> Result<Tensor<T>> {
    layer.validate()?;
    if x.c() != layer.channels {
        return Err(dim_err!("DY-Shift-Max on {} channels got {}", layer.channels, x.c()));
    }
    let pooled = global_avg_pool(x)?;
    let z = linear(&pooled, &layer.w1, Some(&layer.b1))?;
    let z = z.map(|v| v.max(T::zero()));
    let z = linear(&z, &layer.w2, Some(&layer.b2))?;
    Ok(map_coefficients(&z, layer.j, layer.k))
}

fn check_apply<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>, jn: usize, kn: usize, groups: usize) -> Result<()> {
    let c = x.c();
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(config_err!("shift groups {groups} must divide {c} channels"));
    }
    if a.n() != x.n() || a.len() != x.n() * c * jn * kn {
        return Err(dim_err!("coefficients {:?} for input {:?} with J={jn} K={kn}", a.shape(), x.shape()));
    }
    Ok(())
}

/// Applies fixed coefficients: per position, the max over `k` of the `J`-term shifted fusion.
/// Ties go to the lowest `k`.
pub fn dysm_apply<T: Scalar>(x: &Tensor<T>, a: &Tensor<T>, jn: usize, kn: usize, groups: usize) -> Result<Tensor<T>> {
    check_apply(x, a, jn, kn, groups)?;
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let stride = c / groups;
    let ad = a.data();
    let mut out = vec![T::zero(); x.len()];
    let mut acc = vec![T::zero(); hw];
    for b in 0..n {
        let coef = &ad[b * c * jn * kn..(b + 1) * c * jn * kn];
        for i in 0..c {
            let dst = &mut out[(b * c + i) * hw..(b * c + i + 1) * hw];
            for k in 0..kn {
                acc.iter_mut().for_each(|v| *v = T::zero());
                for j in 0..jn {
                    let coeff = coef[coef_index(i, j, k, jn, kn)];
                    let src = x.plane(b, (i + j * stride) % c);
                    for (s, &v) in acc.iter_mut().zip(src) {
                        *s += coeff * v;
                    }
                }
                if k == 0 {
                    dst.copy_from_slice(&acc);
                } else {
                    for (d, &s) in dst.iter_mut().zip(&acc) {
                        if s > *d {
                            *d = s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Gradients of [`dysm_apply`] with respect to `x` and `a`, routing through the winning `k`.
pub fn dysm_apply_backward<T: Scalar>(
    x: &Tensor<T>,
    a: &Tensor<T>,
    grad_y: &Tensor<T>,
    jn: usize,
    kn: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_apply(x, a, jn, kn, groups)?;
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let stride = c / groups;
    let ad = a.data();
    let gy = grad_y.data();
    let xd = x.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut ga = vec![T::zero(); a.len()];
    let cjk = c * jn * kn;
    for b in 0..n {
        let coef = &ad[b * cjk..(b + 1) * cjk];
        for i in 0..c {
            for pos in 0..hw {
                let mut best = T::zero();
                let mut win = 0;
                for k in 0..kn {
                    let mut s = T::zero();
                    for j in 0..jn {
                        let src = (i + j * stride) % c;
                        s += coef[coef_index(i, j, k, jn, kn)] * xd[(b * c + src) * hw + pos];
                    }
                    if k == 0 || s > best {
                        best = s;
                        win = k;
                    }
                }
                let g = gy[(b * c + i) * hw + pos];
                for j in 0..jn {
                    let src = (i + j * stride) % c;
                    let ci = coef_index(i, j, win, jn, kn);
                    gx[(b * c + src) * hw + pos] += coef[ci] * g;
                    ga[b * cjk + ci] += xd[(b * c + src) * hw + pos] * g;
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(a.shape(), ga)?))
}

pub fn dysm_forward<T: Scalar>(x: &Tensor<T>, layer: &DyShiftMaxLayer<T>) -> Result<Tensor<T>> {
    let a = hyper_forward(x, layer)?;
    dysm_apply(x, &a, layer.j, layer.k, layer.groups)
}

/// Pooling, the two hyper-function FC layers, and per-position application.
pub fn dysm_madds(c: usize, hidden: usize, j: usize, k: usize, h: usize, w: usize) -> u64 {
    let hw = (h * w) as u64;
    let (c, hidden, j, k) = (c as u64, hidden as u64, j as u64, k as u64);
    hw * c + c * hidden + hidden * c * j * k + hw * c * j * k
}

/// Naive evaluation with a multiply-accumulate counter.
pub mod reference {
    use super::*;
    use crate::tensor::reference as kernels;

    pub fn dysm_forward<T: Scalar>(x: &Tensor<T>, layer: &DyShiftMaxLayer<T>, macs: &mut u64) -> Result<Tensor<T>> {
        layer.validate()?;
        let pooled = kernels::global_avg_pool(x, macs)?;
        let z = kernels::linear(&pooled, &layer.w1, Some(&layer.b1), macs)?.map(|v| v.max(T::zero()));
        let z = kernels::linear(&z, &layer.w2, Some(&layer.b2), macs)?;
        let a = map_coefficients(&z, layer.j, layer.k);
        let [n, c, h, w] = x.shape();
        let (jn, kn) = (layer.j, layer.k);
        Ok(Tensor::from_fn([n, c, h, w], |b, i, y, xx| {
            let mut best = T::neg_infinity();
            for k in 0..kn {
                let mut s = T::zero();
                for j in 0..jn {
                    *macs += 1;
                    let src = ShiftIndex::new(c, layer.groups, i, j).target;
                    s += a.data()[b * c * jn * kn + coef_index(i, j, k, jn, kn)] * x.at(b, src, y, xx);
                }
                if k == 0 || s > best {
                    best = s;
                }
            }
            best
        }))
    }
}
