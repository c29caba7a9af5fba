//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use micronet_core::analysis::{count_costs, sweep_tradeoff, verify_rank};
use micronet_core::dyshiftmax::{dysm_apply, dysm_forward, hyper_forward};
use micronet_core::microfac::{apply_dense, compute_groups, mfd_forward, mfp_forward, path_count_oracle};
use micronet_core::models::Role;
use micronet_core::tensor::conv2d;
use micronet_core::train::data::synthetic_separable;
use micronet_core::train::gradcheck::{gradcheck, GradCheckConfig};
use micronet_core::{
    build_model, train_loop, weights_io, GroupRepair, MicroFacDepthwise, MicroFacPointwise, ModelSpec, Network,
    Tensor, TrainConfig, Variant,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(actual: f64, target: f64, tol: f64) -> bool {
    ((actual - target) / target).abs() <= tol
}

fn budgets() -> Outcome {
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let start = Instant::now();
        let net = build_model::<f32, _>(v, &mut common::rng(0)).map_err(|e| e.to_string())?;
        let report = count_costs(&net, (224, 224)).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let (madds, params) = v.budget();
        let (m, p) = (report.total_madds as f64, report.total_params as f64);
        ensure(within(m, madds, 0.10), || format!("{v}: {m} MAdds vs {madds}"))?;
        ensure(within(p, params, 0.10), || format!("{v}: {p} params vs {params}"))?;
        ensure(elapsed < Duration::from_secs(1), || format!("{v}: analysis took {elapsed:?}"))?;
        parts.push(format!(
            "{v} {:.2}M MAdds ({:+.1}%) {:.2}M params ({:+.1}%)",
            m / 1e6,
            100.0 * (m / madds - 1.0),
            p / 1e6,
            100.0 * (p / params - 1.0)
        ));
    }
    Ok(parts.join("; "))
}

fn random_pointwise(seed: u64) -> Vec<MicroFacPointwise<f64>> {
    let mut rng = common::rng(seed);
    (0..200)
        .map(|_| {
            let (c, r) = common::random_mfp_shape(&mut rng);
            MicroFacPointwise::random(c, c, r, 1.0, GroupRepair::Covering, &mut rng).unwrap()
        })
        .collect()
}

fn factorization() -> Outcome {
    let start = Instant::now();
    let mut rng = common::rng(2);
    let mut worst = 0.0f64;
    for layer in random_pointwise(1) {
        let x = Tensor::<f64>::randn([1, layer.c_in, 3, 2], 1.0, &mut rng);
        let fact = mfp_forward(&x, &layer).map_err(|e| e.to_string())?;
        let dense = apply_dense(&x, &layer.expand_dense()).map_err(|e| e.to_string())?;
        worst = worst.max(fact.max_abs_diff(&dense));
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-10, || format!("max deviation {worst:.3e}"))?;
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("200 configs, max |factorized - dense| {worst:.2e}, {elapsed:.1?}"))
}

fn rank_law() -> Outcome {
    let mut layers = 0;
    for v in Variant::ALL {
        let net = build_model::<f64, _>(v, &mut common::rng(3)).map_err(|e| e.to_string())?;
        let report = verify_rank(&net);
        ensure(report.passed(), || format!("{v}: {:?}", report.violations()))?;
        layers += report.layers.len();
    }
    let data = synthetic_separable::<f64>(64, 32, 5);
    let mut net = Network::<f64>::build(&ModelSpec::micro(2), &mut common::rng(5)).map_err(|e| e.to_string())?;
    let before = verify_rank(&net);
    // 25 epochs of 4 minibatches: 100 updates.
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 16,
        seed: 5,
        ..Default::default()
    };
    train_loop(&mut net, &data, &cfg).map_err(|e| e.to_string())?;
    let after = verify_rank(&net);
    ensure(!after.layers.is_empty(), || "micro model has no factorized layers".into())?;
    ensure(after.passed(), || format!("after training: {:?}", after.violations()))?;
    let worst = after.layers.iter().map(|l| l.worst_ratio).fold(0.0, f64::max);
    let moved = before != after;
    ensure(moved, || "weights did not change during training".into())?;
    Ok(format!("{layers} layers at init, {} after 100 steps, worst σ2/σ1 {worst:.1e}", after.layers.len()))
}

fn connectivity_law() -> Outcome {
    for layer in random_pointwise(1) {
        let expected = (layer.c_in * layer.c_in) as u64 / (layer.c_in / layer.hidden * layer.g1 * layer.g1) as u64;
        ensure(layer.g1 == layer.g2, || "square layers should share group counts".into())?;
        for o in 0..layer.c_out {
            let got = path_count_oracle(&layer, o);
            ensure(got == expected, || {
                format!("C={} R={} G={} out {o}: {got} paths vs {expected}", layer.c_in, layer.c_in / layer.hidden, layer.g1)
            })?;
        }
        // Independent count: with unit weights, entry (o, i) of PΦQᵀ is the number of paths.
        let ones = MicroFacPointwise::new(
            layer.c_in,
            layer.c_out,
            layer.hidden,
            layer.g1,
            layer.g2,
            Tensor::full(layer.q.shape(), 1.0),
            Tensor::full(layer.p.shape(), 1.0),
        )
        .unwrap();
        let dense = ones.expand_dense();
        for o in 0..layer.c_out {
            let paths: f64 = dense.row(o).sum();
            ensure(paths == expected as f64, || format!("dense path count {paths} vs {expected}"))?;
        }
    }
    let mut balanced = 0;
    for r in [2, 4, 6] {
        for c in (8..=192).filter(|c| c % r == 0) {
            let h = c / r;
            let g = (h as f64).sqrt().round() as usize;
            if g * g != h || c % g != 0 {
                continue;
            }
            let groups = compute_groups(c, r, 1.0).map_err(|e| e.to_string())?;
            let layer = MicroFacPointwise::<f64>::with_groups(c, c, h, groups, groups, &mut common::rng(4)).unwrap();
            ensure(groups == g && layer.connectivity() == c as u64, || {
                format!("C={c} R={r}: G={groups}, E={}", layer.connectivity())
            })?;
            ensure((0..c).all(|o| path_count_oracle(&layer, o) == c as u64), || format!("C={c} R={r} oracle"))?;
            balanced += 1;
        }
    }
    Ok(format!("200 configs E = C²/(RG²) on every output; {balanced} perfect-square cases have E = C"))
}

fn depthwise() -> Outcome {
    let mut rng = common::rng(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = rng.random_range(1..=8);
        let k = [3, 5, 7][rng.random_range(0..3)];
        let s = rng.random_range(1..=2);
        let e = rng.random_range(1..=6);
        let layer = MicroFacDepthwise::<f64>::random(c, k, s, e, &mut rng).unwrap();
        let (h, w) = (rng.random_range(k..=k + 6), rng.random_range(k..=k + 6));
        let x = Tensor::<f64>::randn([2, c, h, w], 1.0, &mut rng);
        let fact = mfd_forward(&x, &layer).map_err(|e| e.to_string())?;
        let full = conv2d(&x, &layer.effective_kernel(), None, &layer.full_spec()).map_err(|e| e.to_string())?;
        ensure(fact.shape() == full.shape(), || format!("shapes {:?} vs {:?}", fact.shape(), full.shape()))?;
        worst = worst.max(fact.max_abs_diff(&full));
    }
    ensure(worst <= 1e-10, || format!("max deviation {worst:.3e}"))?;

    // Cost from the analyzer on the regular blocks, which keep the channel count.
    let mut checked = 0;
    for v in Variant::ALL {
        let net = build_model::<f32, _>(v, &mut common::rng(0)).map_err(|e| e.to_string())?;
        let report = count_costs(&net, (224, 224)).map_err(|e| e.to_string())?;
        let mut input = [3usize, 224, 224];
        for (layer, cost) in net.layers.iter().zip(&report.per_layer) {
            if layer.role == Role::DepthwiseCol {
                if let micronet_core::models::Op::Conv { spec, .. } = &layer.op {
                    let next = net.layers.iter().position(|l| l.name == layer.name.replace("dw_col", "dw_row")).unwrap();
                    let row_cost = report.per_layer[next].madds;
                    let [c, h, w] = report.per_layer[next].output;
                    if spec.stride == (1, 1) && spec.out_channels == spec.in_channels && c == spec.in_channels {
                        let positions = (h * w) as u64;
                        let k = spec.kernel.0 as u64;
                        let factored = cost.madds + row_cost;
                        ensure(factored == 2 * k * c as u64 * positions, || format!("{}: {factored}", layer.name))?;
                        let full = layer_full_cost(c, spec.kernel.0, (input[1], input[2]));
                        ensure(full == k * k * c as u64 * positions, || format!("{}: full {full}", layer.name))?;
                        checked += 1;
                    }
                }
            }
            input = cost.output;
        }
    }
    ensure(checked > 0, || "no stride-1 depthwise layers found".into())?;
    Ok(format!("100 layers, max deviation {worst:.2e}; {checked} layers cost 2kC per position vs k²C"))
}

fn layer_full_cost(c: usize, k: usize, hw: (usize, usize)) -> u64 {
    micronet_core::ConvSpec::square(c, c, k, 1, k / 2, c).madds(hw.0, hw.1).unwrap()
}

fn shift_max() -> Outcome {
    let mut rng = common::rng(8);
    let mut worst = 0.0f64;
    let mut count = 0;
    while count < 1000 {
        let (j, k, g) = (rng.random_range(1..=3), rng.random_range(1..=3), [1, 2, 4][rng.random_range(0..3)]);
        let c = g * rng.random_range(1..=4);
        let layer = common::random_dysm(c, g, j, k, &mut rng);
        let x = Tensor::<f64>::randn([2, c, rng.random_range(1..=4), rng.random_range(1..=4)], 1.0, &mut rng);
        let got = dysm_forward(&x, &layer).map_err(|e| e.to_string())?;
        let want = common::naive_dysm(&x, &layer);
        worst = worst.max(got.max_abs_diff(&want));
        if j == 1 {
            let a = hyper_forward(&x, &layer).map_err(|e| e.to_string())?;
            let y = dysm_apply(&x, &a, 1, k, g).map_err(|e| e.to_string())?;
            let per_channel = Tensor::from_fn(x.shape(), |b, i, yy, xx| {
                (0..k)
                    .map(|kk| a.data()[(b * c + i) * k + kk] * x.at(b, i, yy, xx))
                    .fold(f64::NEG_INFINITY, f64::max)
            });
            ensure(y == per_channel, || format!("J=1 differs from per-channel max (K={k}, G={g})"))?;
        }
        count += 1;
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("1000 instances, max deviation {worst:.2e}; J=1 is a per-channel max of K linear maps"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = common::gradient_cases();
    let mut worst = (0.0f64, "");
    for case in &cases {
        let report = gradcheck(&case.loss, &case.inputs, GradCheckConfig::default()).map_err(|e| format!("{}: {e}", case.name))?;
        ensure(report.probes.len() == 20, || format!("{}: {} probes", case.name, report.probes.len()))?;
        ensure(report.passed, || format!("{}: rel err {:.3e}", case.name, report.max_rel_err))?;
        if report.max_rel_err >= worst.0 {
            worst = (report.max_rel_err, case.name);
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} operators x 20 probes, worst rel err {:.1e} ({}), {elapsed:.1?}",
        cases.len(),
        worst.0,
        worst.1
    ))
}

fn training() -> Outcome {
    let mut passed = 0;
    let mut epochs = Vec::new();
    for seed in 0..100u64 {
        let data = synthetic_separable::<f32>(128, 32, seed);
        let mut net = Network::<f32>::build(&ModelSpec::micro(2), &mut common::rng(seed)).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            epochs: 30,
            seed,
            target_accuracy: Some(0.99),
            ..Default::default()
        };
        let history = train_loop(&mut net, &data, &cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        if history.final_accuracy() >= 0.99 {
            passed += 1;
            epochs.push(history.epochs.len() - 1);
        }
    }
    ensure(passed >= 95, || format!("{passed}/100 seeds reached 99%"))?;
    epochs.sort_unstable();
    Ok(format!(
        "{passed}/100 seeds reached ≥99% train accuracy, median {} epochs, max {}",
        epochs[epochs.len() / 2],
        epochs.last().unwrap()
    ))
}

fn serialization() -> Outcome {
    let x = Tensor::<f32>::randn([2, 3, 32, 32], 1.0, &mut common::rng(9));
    let data = synthetic_separable::<f32>(32, 32, 9);
    let mut trained = Network::<f32>::build(&ModelSpec::micro(2), &mut common::rng(9)).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    train_loop(&mut trained, &data, &cfg).map_err(|e| e.to_string())?;
    let bytes = weights_io::to_bytes(&trained).map_err(|e| e.to_string())?;

    for seed in 0..100u64 {
        let net = if seed == 0 {
            trained.clone()
        } else {
            Network::<f32>::build(&ModelSpec::micro(2), &mut common::rng(seed)).unwrap()
        };
        let back = weights_io::from_bytes::<f32>(&weights_io::to_bytes(&net).unwrap()).map_err(|e| e.to_string())?;
        let (a, b) = (net.forward(&x).unwrap(), back.forward(&x).unwrap());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a) == bits(&b), || format!("seed {seed}: outputs differ after round-trip"))?;
    }

    let mut rng = common::rng(10);
    let mut rejected = 0;
    for pos in 0..bytes.len() {
        // every header byte, then a random sample of the payload
        if pos > 512 && rng.random_range(0..16) != 0 {
            continue;
        }
        let mut bad = bytes.clone();
        bad[pos] ^= 1 << rng.random_range(0..8);
        ensure(weights_io::from_bytes::<f32>(&bad).is_err(), || format!("bit flip at byte {pos} accepted"))?;
        rejected += 1;
    }
    for len in (0..bytes.len()).step_by(97).chain([bytes.len() - 1]) {
        ensure(weights_io::from_bytes::<f32>(&bytes[..len]).is_err(), || format!("truncation to {len} accepted"))?;
        rejected += 1;
    }
    ensure(weights_io::from_bytes::<f64>(&bytes).is_err(), || "dtype mismatch accepted".into())?;
    Ok(format!("100 bitwise round-trips; {rejected} corrupted archives rejected"))
}

fn sweep() -> Outcome {
    let mut cases = 0;
    for r in [2.0, 4.0, 6.0] {
        for g in 1..=8usize {
            let budget = 2.0 * r * (g as f64).powi(3);
            let s = sweep_tradeoff(budget, r, 16).map_err(|e| e.to_string())?;
            let row1 = s.rows[0];
            for row in &s.rows {
                let gf = row.g as f64;
                ensure((row.c / gf.sqrt() - row1.c).abs() <= 1e-9 * row1.c, || format!("C not ∝ √G at G={}", row.g))?;
                ensure((row.e * gf - row1.e).abs() <= 1e-9 * row1.e, || format!("E not ∝ 1/G at G={}", row.g))?;
                let cost = 2.0 * row.c * row.c / (r * gf);
                ensure((cost - budget).abs() <= 1e-9 * budget, || format!("budget drifts at G={}", row.g))?;
            }
            let crossings: Vec<_> = s.rows.iter().filter(|row| row.crossing).collect();
            ensure(crossings.len() == 1 && crossings[0].g == g, || format!("O={budget} R={r}: crossings {crossings:?}"))?;
            let c = crossings[0].c;
            ensure(((c / r).sqrt() - g as f64).abs() <= 1e-9, || format!("G={g} but √(C/R) = {}", (c / r).sqrt()))?;
            ensure((s.crossing_g - g as f64).abs() <= 1e-9, || format!("closed-form crossing {}", s.crossing_g))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} perfect-square budgets: C ∝ √G, E ∝ 1/G, crossing at G = √(C/R)"))
}

type Check = fn() -> Outcome;

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("budget reproduction", budgets),
        ("factorization oracle", factorization),
        ("rank law", rank_law),
        ("connectivity law", connectivity_law),
        ("depthwise factorization", depthwise),
        ("shift-max oracle", shift_max),
        ("gradient suite", gradients),
        ("desk-scale training", training),
        ("serialization", serialization),
        ("trade-off sweep", sweep),
    ];
    // `cargo test -- --list` and name filters come from libtest; honour the basics.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (i, (name, _)) in criteria.iter().enumerate() {
            println!("criterion {}: {name}: test", i + 1);
        }
        return;
    }
    let filter = args.iter().find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2} {name}", i + 1);
        if filter.is_some_and(|f| !label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {label} ({:.1?}): {detail}", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {label} ({:.1?}): {detail}", start.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
