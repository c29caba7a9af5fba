//! Fixtures and independent oracles shared by the integration suites.
#![allow(dead_code)]

use micronet_core::dyshiftmax::{coef_index, DyShiftMaxLayer};
use micronet_core::train::tape::{Tape, Var};
use micronet_core::{ConvSpec, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random `(C, R)` with `R | C`, `C ∈ 8..=192`, `R ∈ {2, 4, 6}`.
pub fn random_mfp_shape<R: Rng>(rng: &mut R) -> (usize, usize) {
    let r = [2, 4, 6][rng.random_range(0..3)];
    let lo = 8usize.div_ceil(r);
    let c = r * rng.random_range(lo..=192 / r);
    (c, r)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Scalar-loop evaluation of the dynamic shift-max, hyper-function included.
pub fn naive_dysm(x: &Tensor<f64>, layer: &DyShiftMaxLayer<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let (jn, kn, g) = (layer.j, layer.k, layer.groups);
    let mut data = Vec::with_capacity(x.len());
    for b in 0..n {
        let pooled: Vec<f64> = (0..c)
            .map(|ch| {
                let mut s = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        s += x.at(b, ch, y, xx);
                    }
                }
                s / (h * w) as f64
            })
            .collect();
        let hidden: Vec<f64> = (0..layer.hidden)
            .map(|u| {
                let mut s = layer.b1.data()[u];
                for (ch, p) in pooled.iter().enumerate() {
                    s += layer.w1.at(u, ch, 0, 0) * p;
                }
                s.max(0.0)
            })
            .collect();
        let coef = |i: usize, j: usize, k: usize| {
            let row = (i * jn + j) * kn + k;
            let mut z = layer.b2.data()[row];
            for (u, hv) in hidden.iter().enumerate() {
                z += layer.w2.at(row, u, 0, 0) * hv;
            }
            2.0 * sigmoid(z) - 1.0 + if j == 0 && k == 0 { 1.0 } else { 0.0 }
        };
        for i in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    for k in 0..kn {
                        let mut s = 0.0;
                        for j in 0..jn {
                            s += coef(i, j, k) * x.at(b, (i + j * (c / g)) % c, y, xx);
                        }
                        best = best.max(s);
                    }
                    data.push(best);
                }
            }
        }
    }
    Tensor::new(x.shape(), data).unwrap()
}

/// Layer with every weight drawn at random, so no coefficient sits at its init value.
pub fn random_dysm(c: usize, g: usize, j: usize, k: usize, rng: &mut ChaCha8Rng) -> DyShiftMaxLayer<f64> {
    let hidden = (c / 4).max(2);
    DyShiftMaxLayer {
        channels: c,
        groups: g,
        j,
        k,
        hidden,
        w1: Tensor::randn([hidden, c, 1, 1], 1.0, rng),
        b1: Tensor::randn([hidden, 1, 1, 1], 0.5, rng),
        w2: Tensor::randn([c * j * k, hidden, 1, 1], 1.0, rng),
        b2: Tensor::randn([c * j * k, 1, 1, 1], 0.5, rng),
    }
}

/// Smallest gap between the winning fusion and any other, over all outputs.
pub fn dysm_margin(x: &Tensor<f64>, a: &Tensor<f64>, jn: usize, kn: usize, groups: usize) -> f64 {
    let [n, c, h, w] = x.shape();
    let mut margin = f64::INFINITY;
    for b in 0..n {
        for i in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut sums: Vec<f64> = (0..kn)
                        .map(|k| {
                            (0..jn)
                                .map(|j| {
                                    a.data()[b * c * jn * kn + coef_index(i, j, k, jn, kn)]
                                        * x.at(b, (i + j * (c / groups)) % c, y, xx)
                                })
                                .sum()
                        })
                        .collect();
                    sums.sort_by(|p, q| q.total_cmp(p));
                    if sums.len() > 1 {
                        margin = margin.min(sums[0] - sums[1]);
                    }
                }
            }
        }
    }
    margin
}

pub type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One operator under finite-difference test: a scalar function of its inputs.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub loss: LossFn,
}

/// Projects any output onto fixed random weights to get a scalar.
pub fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let w = Tensor::randn(tape.value(y).shape(), 1.0, &mut rng(0xfeed));
    tape.weighted_sum(y, w)
}

fn away_from_zero(t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

fn conv_case(name: &'static str, spec: ConvSpec, hw: (usize, usize), bias: bool, rng: &mut ChaCha8Rng) -> GradCase {
    let mut inputs = vec![
        Tensor::randn([2, spec.in_channels, hw.0, hw.1], 1.0, rng),
        Tensor::randn(spec.weight_shape(), 0.5, rng),
    ];
    if bias {
        inputs.push(Tensor::randn([spec.out_channels, 1, 1, 1], 0.5, rng));
    }
    GradCase {
        name,
        inputs,
        loss: Box::new(move |t, v| {
            let y = t.conv(v[0], v[1], v.get(2).copied(), spec)?;
            project(t, y)
        }),
    }
}

fn tie_free_dysm_inputs(c: usize, jn: usize, kn: usize, g: usize, rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    loop {
        let x = Tensor::randn([2, c, 3, 3], 1.0, rng);
        let a = Tensor::randn([2, c * jn * kn, 1, 1], 1.0, rng);
        if dysm_margin(&x, &a, jn, kn, g) > 1e-3 {
            return (x, a);
        }
    }
}

/// Every differentiable tape operator, plus the factorized layers and a whole network.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut r = rng(7);
    let mut cases = vec![
        conv_case("conv 3x3 dense", ConvSpec::square(3, 4, 3, 1, 1, 1), (5, 5), true, &mut r),
        conv_case(
            "conv kx1 grouped strided",
            ConvSpec {
                in_channels: 4,
                out_channels: 6,
                kernel: (3, 1),
                stride: (2, 1),
                padding: (1, 0),
                groups: 2,
            },
            (6, 5),
            false,
            &mut r,
        ),
        conv_case(
            "conv 1xk depthwise strided",
            ConvSpec {
                in_channels: 4,
                out_channels: 8,
                kernel: (1, 3),
                stride: (1, 2),
                padding: (0, 1),
                groups: 4,
            },
            (3, 6),
            false,
            &mut r,
        ),
        conv_case("conv 1x1 grouped", ConvSpec::pointwise(6, 4, 2), (3, 3), true, &mut r),
    ];
    cases.push(GradCase {
        name: "linear",
        inputs: vec![
            Tensor::randn([3, 5, 1, 1], 1.0, &mut r),
            Tensor::randn([4, 5, 1, 1], 1.0, &mut r),
            Tensor::randn([4, 1, 1, 1], 1.0, &mut r),
        ],
        loss: Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "add",
        inputs: vec![Tensor::randn([2, 3, 2, 2], 1.0, &mut r), Tensor::randn([2, 3, 2, 2], 1.0, &mut r)],
        loss: Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "relu",
        inputs: vec![away_from_zero(Tensor::randn([2, 3, 3, 3], 1.0, &mut r), 1e-2)],
        loss: Box::new(|t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "sigmoid",
        inputs: vec![Tensor::randn([2, 3, 3, 3], 2.0, &mut r)],
        loss: Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "global average pool",
        inputs: vec![Tensor::randn([2, 4, 3, 5], 1.0, &mut r)],
        loss: Box::new(|t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "channel shuffle",
        inputs: vec![Tensor::randn([2, 6, 2, 2], 1.0, &mut r)],
        loss: Box::new(|t, v| {
            let perm = micronet_core::microfac::shuffle_permutation(6, 3)?;
            let y = t.permute_channels(v[0], perm)?;
            project(t, y)
        }),
    });
    for (name, c, jn, kn, g) in [
        ("shift-max J2 K2 G2", 4, 2, 2, 2),
        ("shift-max J3 K3 G4", 8, 3, 3, 4),
        ("shift-max J1 K3 G1", 3, 1, 3, 1),
    ] {
        let (x, a) = tie_free_dysm_inputs(c, jn, kn, g, &mut r);
        cases.push(GradCase {
            name,
            inputs: vec![x, a],
            loss: Box::new(move |t, v| {
                let y = t.dysm_apply(v[0], v[1], jn, kn, g)?;
                project(t, y)
            }),
        });
    }
    cases.push(GradCase {
        name: "coefficient map",
        inputs: vec![Tensor::randn([2, 8, 1, 1], 1.5, &mut r)],
        loss: Box::new(|t, v| {
            let y = t.coef_map(v[0], 2, 2);
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "dropout mask",
        inputs: vec![Tensor::randn([2, 5, 1, 1], 1.0, &mut r)],
        loss: Box::new(|t, v| {
            let mask = (0..10).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
            let y = t.mask(v[0], mask)?;
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "batch norm (batch statistics)",
        inputs: vec![
            Tensor::randn([3, 4, 2, 2], 1.0, &mut r),
            Tensor::randn([4, 1, 1, 1], 1.0, &mut r),
            Tensor::randn([4, 1, 1, 1], 1.0, &mut r),
        ],
        loss: Box::new(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "batch norm (running statistics)",
        inputs: vec![
            Tensor::randn([3, 4, 2, 2], 1.0, &mut r),
            Tensor::randn([4, 1, 1, 1], 1.0, &mut r),
            Tensor::randn([4, 1, 1, 1], 1.0, &mut r),
        ],
        loss: Box::new(|t, v| {
            let (mean, var) = ([0.1, -0.2, 0.3, 0.0], [1.5, 0.7, 2.0, 1.0]);
            let (y, _) = t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?;
            project(t, y)
        }),
    });
    cases.push(GradCase {
        name: "softmax cross-entropy",
        inputs: vec![Tensor::randn([4, 3, 1, 1], 2.0, &mut r)],
        loss: Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])),
    });

    let layer = random_dysm(8, 2, 2, 2, &mut r);
    let x = loop {
        let x = away_from_zero(Tensor::randn([2, 8, 3, 3], 1.0, &mut r), 1e-2);
        let a = micronet_core::dyshiftmax::hyper_forward(&x, &layer).unwrap();
        if dysm_margin(&x, &a, 2, 2, 2) > 1e-3 {
            break x;
        }
    };
    cases.push(GradCase {
        name: "shift-max with hyper-function",
        inputs: vec![x, layer.w1.clone(), layer.b1.clone(), layer.w2.clone(), layer.b2.clone()],
        loss: Box::new(|t, v| {
            let p = t.global_avg_pool(v[0])?;
            let z = t.linear(p, v[1], Some(v[2]))?;
            let z = t.relu(z);
            let z = t.linear(z, v[3], Some(v[4]))?;
            let a = t.coef_map(z, 2, 2);
            let y = t.dysm_apply(v[0], a, 2, 2, 2)?;
            project(t, y)
        }),
    });

    let mfp = micronet_core::MicroFacPointwise::<f64>::with_groups(12, 12, 6, 3, 3, &mut r).unwrap();
    let (qs, ps, perm) = (mfp.compressor_spec(), mfp.expander_spec(), mfp.permutation());
    cases.push(GradCase {
        name: "micro-factorized pointwise",
        inputs: vec![Tensor::randn([2, 12, 2, 2], 1.0, &mut r), mfp.q.clone(), mfp.p.clone()],
        loss: Box::new(move |t, v| {
            let z = t.conv(v[0], v[1], None, qs)?;
            let z = t.permute_channels(z, perm.clone())?;
            let y = t.conv(z, v[2], None, ps)?;
            project(t, y)
        }),
    });

    let mfd = micronet_core::MicroFacDepthwise::<f64>::random(3, 3, 2, 2, &mut r).unwrap();
    let (cs, rs) = (mfd.col_spec(), mfd.row_spec());
    cases.push(GradCase {
        name: "micro-factorized depthwise",
        inputs: vec![Tensor::randn([2, 3, 5, 5], 1.0, &mut r), mfd.w_col.clone(), mfd.w_row.clone()],
        loss: Box::new(move |t, v| {
            let z = t.conv(v[0], v[1], None, cs)?;
            let y = t.conv(z, v[2], None, rs)?;
            project(t, y)
        }),
    });

    let net = micronet_core::Network::<f64>::build(&micronet_core::ModelSpec::micro(2), &mut rng(3)).unwrap();
    cases.push(GradCase {
        name: "micro network (input gradient)",
        inputs: vec![Tensor::randn([2, 3, 32, 32], 1.0, &mut r)],
        loss: Box::new(move |t, v| {
            let out = net.forward_tape(t, v[0], micronet_core::models::Mode::BatchStats)?;
            t.cross_entropy(out.logits, &[0, 1])
        }),
    });
    cases
}
