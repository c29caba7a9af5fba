use rand::{Rng, RngCore};

use super::spec::{ActKind, BlockKind, BlockSpec, BuildOptions, ModelSpec, Norm, StemSpec, Variant};
use crate::dyshiftmax::{self, DyShiftMaxLayer};
use crate::error::{config_err, dim_err, Error, Result};
use crate::microfac::{adaptive_groups, expansion_split, shuffle_permutation, MicroFacPointwise};
use crate::tensor::{reference, ConvSpec, Scalar, Tensor};
use crate::train::tape::{BatchStats, Tape, Var};

/// Normalization with learned affine parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, eps: f64) -> Self {
        let shape = [channels, 1, 1, 1];
        Self {
            gamma: Tensor::full(shape, T::one()),
            beta: Tensor::zeros(shape),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, T::one()),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential update of the running statistics.
    pub fn update_running(&mut self, stats: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for (r, &s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op<T> {
    Conv {
        spec: ConvSpec,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    BatchNorm(BatchNorm<T>),
    Relu,
    DyShiftMax(DyShiftMaxLayer<T>),
    Shuffle {
        groups: usize,
    },
    /// Saves the current activation for a later [`Op::AddSkip`].
    PushSkip,
    AddSkip,
    GlobalPool,
    Linear {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Dropout {
        rate: f64,
    },
}

/// Role of a layer inside its block, used to locate factorized pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Stem,
    DepthwiseCol,
    DepthwiseRow,
    Squeeze,
    Compress,
    Expand,
    Norm,
    Activation(u8),
    Shuffle,
    Skip,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    /// Index into `ModelSpec::blocks`, `None` for stem and head.
    pub block: Option<usize>,
    pub role: Role,
    pub op: Op<T>,
}

/// Named tensors of a layer: `(suffix, tensor, trainable)`.
type Slots<'a, T> = Vec<(&'static str, &'a Tensor<T>, bool)>;

impl<T: Scalar> Layer<T> {
    pub fn tensors(&self) -> Slots<'_, T> {
        match &self.op {
            Op::Conv { weight, bias, .. } => {
                let mut v = vec![("weight", weight, true)];
                if let Some(b) = bias {
                    v.push(("bias", b, true));
                }
                v
            }
            Op::BatchNorm(bn) => vec![
                ("gamma", &bn.gamma, true),
                ("beta", &bn.beta, true),
                ("running_mean", &bn.running_mean, false),
                ("running_var", &bn.running_var, false),
            ],
            Op::DyShiftMax(d) => vec![("w1", &d.w1, true), ("b1", &d.b1, true), ("w2", &d.w2, true), ("b2", &d.b2, true)],
            Op::Linear { weight, bias } => vec![("weight", weight, true), ("bias", bias, true)],
            _ => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>, bool)> {
        match &mut self.op {
            Op::Conv { weight, bias, .. } => {
                let mut v = vec![("weight", weight, true)];
                if let Some(b) = bias {
                    v.push(("bias", b, true));
                }
                v
            }
            Op::BatchNorm(bn) => vec![
                ("gamma", &mut bn.gamma, true),
                ("beta", &mut bn.beta, true),
                ("running_mean", &mut bn.running_mean, false),
                ("running_var", &mut bn.running_var, false),
            ],
            Op::DyShiftMax(d) => vec![
                ("w1", &mut d.w1, true),
                ("b1", &mut d.b1, true),
                ("w2", &mut d.w2, true),
                ("b2", &mut d.b2, true),
            ],
            Op::Linear { weight, bias } => vec![("weight", weight, true), ("bias", bias, true)],
            _ => Vec::new(),
        }
    }

    /// Trainable parameter count.
    pub fn params(&self) -> usize {
        self.tensors().iter().filter(|t| t.2).map(|t| t.1.len()).sum()
    }
}

/// How a forward pass treats normalization and dropout.
pub enum Mode<'a> {
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics, no dropout.
    BatchStats,
    /// Batch statistics and dropout drawn from the generator.
    Train(&'a mut dyn RngCore),
}

/// Tape handles produced by [`Network::forward_tape`].
pub struct TapeForward<T> {
    pub logits: Var,
    /// One leaf per trainable tensor, in [`Network::trainable`] order.
    pub params: Vec<Var>,
    /// Batch statistics per layer index, for normalization layers in train mode.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

/// Instantiated model: an ordered layer list bound to weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<T>>,
}

fn he<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

struct Builder<'a, T, R: ?Sized> {
    layers: Vec<Layer<T>>,
    opts: &'a BuildOptions,
    rng: &'a mut R,
    block: Option<usize>,
    prefix: String,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn push(&mut self, suffix: &str, role: Role, op: Op<T>) {
        self.layers.push(Layer {
            name: format!("{}.{}", self.prefix, suffix),
            block: self.block,
            role,
            op,
        });
    }

    fn conv(&mut self, suffix: &str, role: Role, spec: ConvSpec) -> Result<()> {
        spec.validate()?;
        let weight = he(spec.weight_shape(), self.rng);
        self.push(suffix, role, Op::Conv { spec, weight, bias: None });
        Ok(())
    }

    fn norm(&mut self, suffix: &str, channels: usize) {
        if self.opts.norm == Norm::Bn {
            self.push(suffix, Role::Norm, Op::BatchNorm(BatchNorm::new(channels, self.opts.bn_eps)));
        }
    }

    fn act(&mut self, slot: u8, kind: ActKind, channels: usize, groups: usize) -> Result<()> {
        let suffix = format!("act{slot}");
        match kind {
            ActKind::Relu => self.push(&suffix, Role::Activation(slot), Op::Relu),
            ActKind::Dysm => {
                let layer = DyShiftMaxLayer::new(channels, groups, self.opts.dysm, self.rng)?;
                self.push(&suffix, Role::Activation(slot), Op::DyShiftMax(layer));
            }
            ActKind::None => {}
        }
        Ok(())
    }

    /// `k×1` then `1×k` depthwise convolutions from `c_in` to `c_in·e`.
    fn depthwise(&mut self, c_in: usize, e: usize, k: usize, stride: usize) -> Result<usize> {
        let (e1, e2) = expansion_split(e);
        let mid = c_in * e1;
        self.conv(
            "dw_col",
            Role::DepthwiseCol,
            ConvSpec {
                in_channels: c_in,
                out_channels: mid,
                kernel: (k, 1),
                stride: (stride, 1),
                padding: (k / 2, 0),
                groups: c_in,
            },
        )?;
        self.norm("dw_col_bn", mid);
        self.conv(
            "dw_row",
            Role::DepthwiseRow,
            ConvSpec {
                in_channels: mid,
                out_channels: mid * e2,
                kernel: (1, k),
                stride: (1, stride),
                padding: (0, k / 2),
                groups: mid,
            },
        )?;
        self.norm("dw_row_bn", mid * e2);
        Ok(mid * e2)
    }
}

/// Layers of the stem: `3×1` conv with vertical stride 2, `1×3` grouped
/// conv with horizontal stride 2 expanding to `C_stem`, then ReLU.
pub fn build_stem<T: Scalar, R: Rng + ?Sized>(stem: &StemSpec, opts: &BuildOptions, rng: &mut R) -> Result<Vec<Layer<T>>> {
    let mut b = Builder {
        layers: Vec::new(),
        opts,
        rng,
        block: None,
        prefix: "stem".into(),
    };
    b.conv(
        "conv_col",
        Role::Stem,
        ConvSpec {
            in_channels: 3,
            out_channels: stem.hidden,
            kernel: (3, 1),
            stride: (2, 1),
            padding: (1, 0),
            groups: 1,
        },
    )?;
    b.norm("bn_col", stem.hidden);
    b.conv(
        "conv_row",
        Role::Stem,
        ConvSpec {
            in_channels: stem.hidden,
            out_channels: stem.channels,
            kernel: (1, 3),
            stride: (1, 2),
            padding: (0, 1),
            groups: stem.groups,
        },
    )?;
    b.norm("bn_row", stem.channels);
    b.push("act", Role::Activation(0), Op::Relu);
    Ok(b.layers)
}

/// Layers of one Micro-Block taking `c_in` channels.
pub fn build_block<T: Scalar, R: Rng + ?Sized>(
    spec: &BlockSpec,
    index: usize,
    c_in: usize,
    opts: &BuildOptions,
    rng: &mut R,
) -> Result<Vec<Layer<T>>> {
    let mut b = Builder {
        layers: Vec::new(),
        opts,
        rng,
        block: Some(index),
        prefix: format!("b{index}"),
    };
    let ga = |wide: usize| adaptive_groups(wide, spec.hidden, opts.lambda, opts.group_repair);
    let h = spec.hidden;
    match spec.kind {
        BlockKind::MicroA => {
            if !spec.channels.is_multiple_of(c_in) {
                return Err(config_err!("MicroA width {} is not a multiple of input {}", spec.channels, c_in));
            }
            let wide = b.depthwise(c_in, spec.channels / c_in, spec.k, spec.stride)?;
            let g = ga(wide);
            b.act(1, spec.acts[0], wide, g)?;
            b.conv("squeeze", Role::Squeeze, ConvSpec::pointwise(wide, h, g))?;
            b.norm("squeeze_bn", h);
            b.act(2, spec.acts[1], h, g)?;
            b.push("shuffle", Role::Shuffle, Op::Shuffle { groups: g });
        }
        BlockKind::MicroB | BlockKind::MicroC => {
            if spec.skip {
                if c_in != spec.channels || spec.stride != 1 {
                    return Err(config_err!("skip on block {index} with mismatched shapes"));
                }
                b.push("skip_in", Role::Skip, Op::PushSkip);
            }
            let e = if spec.kind == BlockKind::MicroB { opts.microb_expansion } else { 1 };
            let wide = b.depthwise(c_in, e, spec.k, spec.stride)?;
            let g1 = ga(wide);
            let g2 = ga(spec.channels);
            b.act(1, spec.acts[0], wide, g1)?;
            b.conv("compress", Role::Compress, ConvSpec::pointwise(wide, h, g1))?;
            b.norm("compress_bn", h);
            b.act(2, spec.acts[1], h, g1)?;
            b.push("shuffle", Role::Shuffle, Op::Shuffle { groups: g1 });
            b.conv("expand", Role::Expand, ConvSpec::pointwise(h, spec.channels, g2))?;
            b.norm("expand_bn", spec.channels);
            b.act(3, spec.acts[2], spec.channels, g2)?;
            if spec.skip {
                b.push("skip_add", Role::Skip, Op::AddSkip);
            }
        }
    }
    Ok(b.layers)
}

fn build_head<T: Scalar, R: Rng + ?Sized>(c_in: usize, spec: &ModelSpec, rng: &mut R) -> Vec<Layer<T>> {
    let d = spec.head_width;
    let mk = |name: &str, role, op| Layer {
        name: format!("head.{name}"),
        block: None,
        role,
        op,
    };
    vec![
        mk("pool", Role::Head, Op::GlobalPool),
        mk(
            "fc1",
            Role::Head,
            Op::Linear {
                weight: he([d, c_in, 1, 1], rng),
                bias: Tensor::zeros([d, 1, 1, 1]),
            },
        ),
        mk("act", Role::Activation(0), Op::Relu),
        mk("dropout", Role::Head, Op::Dropout { rate: spec.dropout }),
        mk(
            "fc2",
            Role::Head,
            Op::Linear {
                weight: Tensor::randn([spec.num_classes, d, 1, 1], (1.0 / d as f64).sqrt(), rng),
                bias: Tensor::zeros([spec.num_classes, 1, 1, 1]),
            },
        ),
    ]
}

pub fn build_model<T: Scalar, R: Rng + ?Sized>(variant: Variant, rng: &mut R) -> Result<Network<T>> {
    Network::build(&ModelSpec::for_variant(variant), rng)
}

impl<T: Scalar> Network<T> {
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = build_stem(&spec.stem, &spec.options, rng)?;
        let mut c = spec.stem.channels;
        for (i, block) in spec.blocks.iter().enumerate() {
            layers.extend(build_block(block, i, c, &spec.options, rng)?);
            c = block.out_channels();
        }
        layers.extend(build_head(c, spec, rng));
        Ok(Self { spec: spec.clone(), layers })
    }

    /// Every stored tensor with its qualified name, buffers included.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .flat_map(|l| l.tensors().into_iter().map(move |(s, t, _)| (format!("{}.{}", l.name, s), t)))
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let name = l.name.clone();
                l.tensors_mut().into_iter().map(move |(s, t, _)| (format!("{name}.{s}"), t))
            })
            .collect()
    }

    /// Trainable tensors in a fixed order.
    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.tensors().into_iter().filter(|t| t.2).map(|t| t.1))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut().into_iter().filter(|t| t.2).map(|t| t.1))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::params).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Compressor/expander pairs of every block as factorized pointwise layers.
    pub fn pointwise_factors(&self) -> Vec<(String, MicroFacPointwise<T>)> {
        let mut out = Vec::new();
        let mut pending: Option<(&Layer<T>, usize)> = None;
        for layer in &self.layers {
            match (&layer.role, &layer.op) {
                (Role::Compress, Op::Conv { .. }) => pending = Some((layer, 0)),
                (Role::Shuffle, Op::Shuffle { groups }) => {
                    if let Some((_, g)) = pending.as_mut() {
                        *g = *groups;
                    }
                }
                (Role::Expand, Op::Conv { spec: pspec, weight: p, .. }) => {
                    if let Some((
                        Layer {
                            op: Op::Conv { spec: qspec, weight: q, .. },
                            ..
                        },
                        _,
                    )) = pending.take()
                    {
                        let name = layer.name.trim_end_matches(".expand").to_string();
                        if let Ok(mfp) = MicroFacPointwise::new(
                            qspec.in_channels,
                            pspec.out_channels,
                            qspec.out_channels,
                            qspec.groups,
                            pspec.groups,
                            q.clone(),
                            p.clone(),
                        ) {
                            out.push((name, mfp));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != 3 {
            return Err(dim_err!("network input needs 3 channels, got {c}"));
        }
        if h < 32 || w < 32 {
            return Err(dim_err!("network input must be at least 32×32, got {h}×{w}"));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Eval-mode logits `(N, classes, 1, 1)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut tape = Tape::new(false);
        let xv = tape.leaf(x.clone());
        let out = self.forward_tape(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Runs the network on a tape, creating one leaf per trainable tensor.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: Var, mut mode: Mode<'_>) -> Result<TapeForward<T>> {
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let mut skips = Vec::new();
        let mut cur = x;
        let leaf = |tape: &mut Tape<T>, t: &Tensor<T>, params: &mut Vec<Var>| {
            let v = tape.leaf(t.clone());
            params.push(v);
            v
        };
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match &layer.op {
                Op::Conv { spec, weight, bias } => {
                    let w = leaf(tape, weight, &mut params);
                    let b = bias.as_ref().map(|b| leaf(tape, b, &mut params));
                    tape.conv(cur, w, b, *spec)?
                }
                Op::BatchNorm(bn) => {
                    let g = leaf(tape, &bn.gamma, &mut params);
                    let b = leaf(tape, &bn.beta, &mut params);
                    let eps = T::from_f64_lossy(bn.eps);
                    let stats = match mode {
                        Mode::Eval => Some((bn.running_mean.data(), bn.running_var.data())),
                        Mode::BatchStats | Mode::Train(_) => None,
                    };
                    let (y, measured) = tape.batch_norm(cur, g, b, stats, eps)?;
                    if let Some(s) = measured {
                        bn_stats.push((idx, s));
                    }
                    y
                }
                Op::Relu => tape.relu(cur),
                Op::DyShiftMax(d) => {
                    let w1 = leaf(tape, &d.w1, &mut params);
                    let b1 = leaf(tape, &d.b1, &mut params);
                    let w2 = leaf(tape, &d.w2, &mut params);
                    let b2 = leaf(tape, &d.b2, &mut params);
                    let pooled = tape.global_avg_pool(cur)?;
                    let z = tape.linear(pooled, w1, Some(b1))?;
                    let z = tape.relu(z);
                    let z = tape.linear(z, w2, Some(b2))?;
                    let a = tape.coef_map(z, d.j, d.k);
                    tape.dysm_apply(cur, a, d.j, d.k, d.groups)?
                }
                Op::Shuffle { groups } => {
                    let perm = shuffle_permutation(tape.value(cur).c(), *groups)?;
                    tape.permute_channels(cur, perm)?
                }
                Op::PushSkip => {
                    skips.push(cur);
                    cur
                }
                Op::AddSkip => {
                    let s = skips.pop().ok_or_else(|| config_err!("{}: residual add without a saved input", layer.name))?;
                    tape.add(cur, s)?
                }
                Op::GlobalPool => tape.global_avg_pool(cur)?,
                Op::Linear { weight, bias } => {
                    let w = leaf(tape, weight, &mut params);
                    let b = leaf(tape, bias, &mut params);
                    tape.linear(cur, w, Some(b))?
                }
                Op::Dropout { rate } => match &mut mode {
                    Mode::Train(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let scale = T::from_f64_lossy(1.0 / keep);
                        let n = tape.value(cur).len();
                        let mask = (0..n).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
                        tape.mask(cur, mask)?
                    }
                    _ => cur,
                },
            };
        }
        Ok(TapeForward {
            logits: cur,
            params,
            bn_stats,
        })
    }

    /// Eval-mode forward through the naive kernels, returning the
    /// multiply-accumulates counted in each layer.
    pub fn forward_counted(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u64>)> {
        let mut counts = Vec::with_capacity(self.layers.len());
        let mut skips = Vec::new();
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut macs = 0u64;
            cur = match &layer.op {
                Op::Conv { spec, weight, bias } => reference::conv2d(&cur, weight, bias.as_ref(), spec, &mut macs)?,
                Op::BatchNorm(bn) => {
                    let eps = T::from_f64_lossy(bn.eps);
                    Tensor::from_fn(cur.shape(), |b, c, y, xx| {
                        let inv = T::one() / (bn.running_var.data()[c] + eps).sqrt();
                        bn.gamma.data()[c] * (cur.at(b, c, y, xx) - bn.running_mean.data()[c]) * inv + bn.beta.data()[c]
                    })
                }
                Op::Relu => cur.map(|v| v.max(T::zero())),
                Op::DyShiftMax(d) => dyshiftmax::reference::dysm_forward(&cur, d, &mut macs)?,
                Op::Shuffle { groups } => crate::microfac::channel_shuffle(&cur, *groups)?,
                Op::PushSkip => {
                    skips.push(cur.clone());
                    cur
                }
                Op::AddSkip => cur.add(&skips.pop().ok_or_else(|| config_err!("unbalanced residual"))?)?,
                Op::GlobalPool => reference::global_avg_pool(&cur, &mut macs)?,
                Op::Linear { weight, bias } => reference::linear(&cur, weight, Some(bias), &mut macs)?,
                Op::Dropout { .. } => cur,
            };
            counts.push(macs / x.n().max(1) as u64);
        }
        Ok((cur, counts))
    }
}
