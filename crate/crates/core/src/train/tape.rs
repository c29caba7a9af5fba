//! Reverse-mode gradient tape.
//!
//! Values are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep. With
//! recording disabled the same operators run as a plain interpreter.

use crate::dyshiftmax::{dysm_apply, dysm_apply_backward, map_coefficients};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{conv2d, conv2d_grad_input, conv2d_grad_weight, global_avg_pool, linear, sigmoid, ConvSpec, Scalar, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Untracked,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Gap(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Dysm {
        x: Var,
        a: Var,
        j: usize,
        k: usize,
        groups: usize,
    },
    CoefMap {
        z: Var,
    },
    Mask {
        x: Var,
        mask: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Per-channel statistics measured by a batch-statistics normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T> {
    recording: bool,
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(recording: bool) -> Self {
        Self {
            recording,
            nodes: Vec::new(),
        }
    }

    pub fn recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let op = if self.recording { op } else { Op::Untracked };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        Ok(self.push(y, Op::Conv { x, w, b, spec }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::Gap(x)))
    }

    /// `out[o] = in[perm[o]]` over channels.
    pub fn permute_channels(&mut self, x: Var, perm: Vec<usize>) -> Result<Var> {
        let y = crate::microfac::permute_channels(self.value(x), &perm)?;
        Ok(self.push(y, Op::Permute { x, perm }))
    }

    pub fn dysm_apply(&mut self, x: Var, a: Var, j: usize, k: usize, groups: usize) -> Result<Var> {
        let y = dysm_apply(self.value(x), self.value(a), j, k, groups)?;
        Ok(self.push(y, Op::Dysm { x, a, j, k, groups }))
    }

    /// `a = 2σ(z) − 1 + init_bias` with the `(J, K)` layout of the hyper-function.
    pub fn coef_map(&mut self, z: Var, j: usize, k: usize) -> Var {
        let y = map_coefficients(self.value(z), j, k);
        self.push(y, Op::CoefMap { z })
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(dim_err!("mask of {} for {} elements", mask.len(), xv.len()));
        }
        let y = Tensor::new(xv.shape(), xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect())?;
        Ok(self.push(y, Op::Mask { x, mask }))
    }

    /// Per-channel normalization followed by `gamma·x̂ + beta`.
    ///
    /// With `stats = None` the batch mean and biased variance are used and
    /// returned; otherwise the given running statistics are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != c || b.len() != c {
            return Err(dim_err!("norm over {} channels with {} / {} affine params", c, g.len(), b.len()));
        }
        let hw = h * w;
        let m = T::from_usize(n * hw).unwrap();
        let (mean, var, batch_stats) = match stats {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(dim_err!("running stats length mismatch for {} channels", c));
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..n {
                        s += xv.plane(bi, ch).iter().copied().sum::<T>();
                    }
                    let mu = s / m;
                    let mut q = T::zero();
                    for bi in 0..n {
                        for &v in xv.plane(bi, ch) {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / m;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for bi in 0..n {
            for ch in 0..c {
                let (gc, bc) = (g.data()[ch], b.data()[ch]);
                for &v in xv.plane(bi, ch) {
                    let xh = (v - mean[ch]) * inv_std[ch];
                    xhat.push(xh);
                    y.push(gc * xh + bc);
                }
            }
        }
        let shape = xv.shape();
        let out = Tensor::new(shape, y)?;
        let stats = batch_stats.then_some(BatchStats { mean, var });
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
                batch_stats,
            },
        );
        Ok((var, stats))
    }

    /// Scalar `Σ w·x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(dim_err!("weighted sum of {} with {} weights", xv.len(), weights.len()));
        }
        let s: T = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::vector(vec![s]), Op::WeightedSum { x, weights }))
    }

    /// Mean softmax cross-entropy of `(N, classes)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.n();
        let classes = lv.len() / n.max(1);
        if labels.len() != n || n == 0 {
            return Err(dim_err!("{} labels for {} logits rows", labels.len(), n));
        }
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = T::zero();
        for (row, &label) in lv.data().chunks(classes).zip(labels) {
            if label >= classes {
                return Err(dim_err!("label {} out of range for {} classes", label, classes));
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            loss += z.ln() + mx - row[label];
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let loss = loss / T::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::vector(vec![loss]),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every value on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Usage("backward on a tape that was not recording".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("variable {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor<T>| -> Result<()> {
            let slot = &mut grads[v.0];
            *slot = Some(match slot.take() {
                Some(prev) => prev.add(&t)?,
                None => t,
            });
            Ok(())
        };
        match &node.op {
            Op::Leaf | Op::Untracked => {}
            Op::Conv { x, w, b, spec } => {
                let xv = self.value(*x);
                acc(*x, conv2d_grad_input(g, self.value(*w), spec, (xv.h(), xv.w()))?)?;
                acc(*w, conv2d_grad_weight(g, xv, spec)?)?;
                if let Some(b) = b {
                    acc(*b, channel_sums(g).reshape(self.value(*b).shape())?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.n();
                let din = xv.len() / n;
                let dout = wv.n();
                let mut gx = vec![T::zero(); xv.len()];
                let mut gw = vec![T::zero(); wv.len()];
                let mut gb = vec![T::zero(); dout];
                for s in 0..n {
                    for o in 0..dout {
                        let go = g.data()[s * dout + o];
                        gb[o] += go;
                        for i in 0..din {
                            gx[s * din + i] += go * wv.data()[o * din + i];
                            gw[o * din + i] += go * xv.data()[s * din + i];
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape(), gx)?)?;
                acc(*w, Tensor::new(wv.shape(), gw)?)?;
                if let Some(b) = b {
                    acc(*b, Tensor::new(self.value(*b).shape(), gb)?)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Relu(x) => {
                acc(*x, self.value(*x).zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() })?)?;
            }
            Op::Sigmoid(x) => {
                acc(*x, node.value.zip_map(g, |s, gv| gv * s * (T::one() - s))?)?;
            }
            Op::Gap(x) => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.shape();
                let denom = T::from_usize(h * w).unwrap();
                acc(*x, Tensor::from_fn([n, c, h, w], |b, ch, _, _| g.at(b, ch, 0, 0) / denom))?;
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (o, &src) in perm.iter().enumerate() {
                    inverse[src] = o;
                }
                acc(*x, crate::microfac::permute_channels(g, &inverse)?)?;
            }
            Op::Dysm { x, a, j, k, groups } => {
                let (gx, ga) = dysm_apply_backward(self.value(*x), self.value(*a), g, *j, *k, *groups)?;
                acc(*x, gx)?;
                acc(*a, ga)?;
            }
            Op::CoefMap { z } => {
                // a = 2σ(z) − 1 + c  ⇒  da/dz = 2σ(z)(1 − σ(z))
                let two = T::from_f64_lossy(2.0);
                acc(
                    *z,
                    self.value(*z).zip_map(g, |zv, gv| {
                        let s = sigmoid(zv);
                        gv * two * s * (T::one() - s)
                    })?,
                )?;
            }
            Op::Mask { x, mask } => {
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                acc(*x, Tensor::new(g.shape(), data)?)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = g.shape();
                let hw = h * w;
                let m = T::from_usize(n * hw).unwrap();
                let gv = self.value(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for (&gy, &xh) in g.plane(b, ch).iter().zip(xhat.plane(b, ch)) {
                            dgamma[ch] += gy * xh;
                            dbeta[ch] += gy;
                        }
                    }
                }
                let mut dx = Vec::with_capacity(g.len());
                for b in 0..n {
                    for ch in 0..c {
                        let scale = gv.data()[ch] * inv_std[ch];
                        for (&gy, &xh) in g.plane(b, ch).iter().zip(xhat.plane(b, ch)) {
                            if *batch_stats {
                                // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                                dx.push(scale * (gy - dbeta[ch] / m - xh * dgamma[ch] / m));
                            } else {
                                dx.push(scale * gy);
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(g.shape(), dx)?)?;
                acc(*gamma, Tensor::new(gv.shape(), dgamma)?)?;
                acc(*beta, Tensor::new(self.value(*beta).shape(), dbeta)?)?;
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights.scale(g.data()[0]))?;
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let lv = self.value(*logits);
                let n = lv.n();
                let classes = lv.len() / n;
                let scale = g.data()[0] / T::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (s, &label) in labels.iter().enumerate() {
                    d[s * classes + label] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::new(lv.shape(), d)?)?;
            }
        }
        Ok(())
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = g.shape();
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, slot) in out.iter_mut().enumerate() {
            *slot += g.plane(b, ch).iter().copied().sum::<T>();
        }
    }
    Tensor::vector(out)
}
