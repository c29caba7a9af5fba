//! `micronet`: analyze, verify, run, train and benchmark MicroNet models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use micronet_core::analysis::{
    count_costs, default_sweep_range, render_cost_human, render_cost_jsonl, render_sweep_human, render_sweep_jsonl,
    sweep_tradeoff, verify_network,
};
use micronet_core::train::data::{read_images, synthetic_separable, Dataset};
use micronet_core::{weights_io, Error, ModelSpec, Network, Scalar, Tensor, TrainConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

const HISTORY_SCHEMA: &str = "micronet.history/1";
const INFER_SCHEMA: &str = "micronet.infer/1";
const BENCH_SCHEMA: &str = "micronet.bench/1";
const VERIFY_SCHEMA: &str = "micronet.verify/1";

mod exit {
    pub const CHECK_FAILED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const MALFORMED: u8 = 4;
}

#[derive(Parser)]
#[command(name = "micronet", version, about = "MicroNet engine and cost analyzer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Human,
    Jsonl,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Built-in variant (M0..M3).
    #[arg(long, conflicts_with = "config")]
    model: Option<Variant>,
    /// Model config file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer MAdds and parameters.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Square input resolution.
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Rank law, connectivity law, factorized-vs-dense equivalence and shuffle checks.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        /// Check trained weights instead of a fresh build.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Top-k classes for every image in a raw image file.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Train on a dataset directory, writing an archive and a metrics history.
    Train {
        /// Training config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics history; defaults to `<out>.history.jsonl`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Single-threaded batch-1 latency.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Untimed iterations before measuring.
        #[arg(long, default_value_t = 50)]
        warmup: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        input: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Width/connectivity trade-off at a fixed per-position budget.
    Sweep {
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        reduction: f64,
        /// Largest group count listed.
        #[arg(long)]
        max_g: Option<usize>,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Write the two-class synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) => exit::IO,
            Error::Usage(_) => exit::USAGE,
            _ => exit::MALFORMED,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: exit::USAGE,
        message: message.into(),
    }
}

type Outcome = Result<(String, bool), Failure>;

/// `MICRONET_SEED`, or 0.
fn env_seed() -> Result<u64, Failure> {
    match std::env::var("MICRONET_SEED") {
        Ok(s) => s.trim().parse().map_err(|_| usage(format!("MICRONET_SEED must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(0),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure {
        code: exit::IO,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure {
        code: exit::IO,
        message: format!("{}: {e}", path.display()),
    })
}

fn resolve_spec(args: &ModelArgs) -> Result<ModelSpec, Failure> {
    match (&args.model, &args.config) {
        (Some(v), _) => Ok(ModelSpec::for_variant(*v)),
        (None, Some(path)) => Ok(ModelSpec::from_toml(&read_text(path)?)?),
        (None, None) => Err(usage("one of --model or --config is required")),
    }
}

/// An archive in whichever precision it was written.
enum Loaded {
    F32(Network<f32>),
    F64(Network<f64>),
}

fn load_any(path: &Path) -> Result<Loaded, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure {
        code: exit::IO,
        message: format!("{}: {e}", path.display()),
    })?;
    match weights_io::from_bytes::<f32>(&bytes) {
        Ok(net) => Ok(Loaded::F32(net)),
        Err(Error::DType { .. }) => Ok(Loaded::F64(weights_io::from_bytes::<f64>(&bytes)?)),
        Err(e) => Err(e.into()),
    }
}

fn analyze(args: &ModelArgs, input: usize, format: Format) -> Outcome {
    let spec = resolve_spec(args)?;
    let net = Network::<f32>::build(&spec, &mut ChaCha8Rng::seed_from_u64(env_seed()?))?;
    let report = count_costs(&net, (input, input))?;
    let mut out = match format {
        Format::Human => render_cost_human(&report),
        Format::Jsonl => render_cost_jsonl(&report),
    };
    if let (Some(v), Format::Human) = (spec.variant(), format) {
        let (madds, params) = v.budget();
        if input == 224 {
            let _ = writeln!(
                out,
                "budget: {:.0}M MAdds ({:+.1}%), {:.1}M params ({:+.1}%), tolerance ±10%",
                madds / 1e6,
                100.0 * (report.total_madds as f64 / madds - 1.0),
                params / 1e6,
                100.0 * (report.total_params as f64 / params - 1.0)
            );
        }
    }
    Ok((out, true))
}

fn verify_report<T: Scalar>(net: &Network<T>, format: Format) -> Result<(String, bool), Failure> {
    let report = verify_network(net, &mut ChaCha8Rng::seed_from_u64(env_seed()?));
    let mut out = String::new();
    for c in &report.checks {
        match format {
            Format::Human => {
                let _ = writeln!(out, "{} {:<28} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            Format::Jsonl => {
                let rec = serde_json::json!({
                    "schema": VERIFY_SCHEMA, "record": "check", "name": c.name, "passed": c.passed, "detail": c.detail,
                });
                let _ = writeln!(out, "{rec}");
            }
        }
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    match format {
        Format::Human => {
            let _ = writeln!(out, "{} checks, {failed} failed", report.checks.len());
        }
        Format::Jsonl => {
            let rec = serde_json::json!({
                "schema": VERIFY_SCHEMA, "record": "summary", "model": net.spec.name,
                "checks": report.checks.len(), "failed": failed,
            });
            let _ = writeln!(out, "{rec}");
        }
    }
    Ok((out, report.passed()))
}

fn verify(args: &ModelArgs, weights: Option<&Path>, format: Format) -> Outcome {
    match weights {
        Some(path) => match load_any(path)? {
            Loaded::F32(net) => verify_report(&net, format),
            Loaded::F64(net) => verify_report(&net, format),
        },
        None => {
            let spec = resolve_spec(args)?;
            let net = Network::<f32>::build(&spec, &mut ChaCha8Rng::seed_from_u64(env_seed()?))?;
            verify_report(&net, format)
        }
    }
}

fn infer_with<T: Scalar>(net: &Network<T>, image: &Path, topk: usize, format: Format) -> Outcome {
    let bytes = fs::read(image).map_err(|e| Failure {
        code: exit::IO,
        message: format!("{}: {e}", image.display()),
    })?;
    let x = read_images::<T>(&bytes)?;
    let logits = net.forward(&x)?;
    let classes = logits.c();
    let mut out = String::new();
    for (i, row) in logits.data().chunks(classes).enumerate() {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let mut ranked: Vec<(usize, f64)> = row.iter().map(|v| (v - mx).exp() / z).enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(topk.min(classes));
        match format {
            Format::Human => {
                let list: Vec<String> = ranked.iter().map(|(c, p)| format!("{c}:{p:.4}")).collect();
                let _ = writeln!(out, "image {i}: {}", list.join(" "));
            }
            Format::Jsonl => {
                let rec = serde_json::json!({
                    "schema": INFER_SCHEMA,
                    "image": i,
                    "classes": ranked.iter().map(|r| r.0).collect::<Vec<_>>(),
                    "scores": ranked.iter().map(|r| r.1).collect::<Vec<_>>(),
                });
                let _ = writeln!(out, "{rec}");
            }
        }
    }
    Ok((out, true))
}

fn infer(weights: &Path, image: &Path, topk: usize, format: Format) -> Outcome {
    if topk == 0 {
        return Err(usage("--topk must be at least 1"));
    }
    match load_any(weights)? {
        Loaded::F32(net) => infer_with(&net, image, topk, format),
        Loaded::F64(net) => infer_with(&net, image, topk, format),
    }
}

/// Training config file: optimizer settings plus the model to train.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    /// `micro`, a variant name, or a model config path relative to this file.
    model: String,
    #[serde(default)]
    dtype: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    #[serde(default = "default_momentum")]
    momentum: f64,
    #[serde(default)]
    weight_decay: f64,
    #[serde(default = "default_bn_momentum")]
    bn_momentum: f64,
    #[serde(default)]
    target_accuracy: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn train_with<T: Scalar>(spec: &ModelSpec, cfg: &TrainConfig, data_dir: &Path, out: &Path, history: &Path) -> Outcome {
    let data = Dataset::<T>::load(data_dir)?;
    if data.num_classes > spec.num_classes {
        return Err(Failure {
            code: exit::MALFORMED,
            message: format!("dataset has {} classes, model has {}", data.num_classes, spec.num_classes),
        });
    }
    let mut net = Network::<T>::build(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let hist = micronet_core::train_loop(&mut net, &data, cfg)?;
    weights_io::save(&net, out)?;
    let mut lines = String::new();
    let mut text = String::new();
    for m in &hist.epochs {
        let rec = serde_json::json!({
            "schema": HISTORY_SCHEMA, "epoch": m.epoch, "loss": m.loss, "accuracy": m.accuracy, "lr": m.lr,
        });
        let _ = writeln!(lines, "{rec}");
        let _ = writeln!(text, "epoch {:>3}  loss {:.6}  accuracy {:.4}  lr {:.5}", m.epoch, m.loss, m.accuracy, m.lr);
    }
    write_file(history, lines)?;
    let _ = writeln!(text, "wrote {} and {}", out.display(), history.display());
    Ok((text, true))
}

fn train(config: &Path, data: &Path, out: &Path, history: Option<&Path>) -> Outcome {
    let file: TrainFile = toml::from_str(&read_text(config)?).map_err(|e| Failure {
        code: exit::MALFORMED,
        message: format!("{}: {e}", config.display()),
    })?;
    let num_classes = match fs::read(data.join(micronet_core::train::data::LABELS_FILE)) {
        Ok(bytes) => micronet_core::train::data::read_labels(&bytes)?.into_iter().max().map_or(1, |m| m + 1),
        Err(e) => {
            return Err(Failure {
                code: exit::IO,
                message: format!("{}: {e}", data.display()),
            })
        }
    };
    let spec = if file.model == "micro" {
        ModelSpec::micro(num_classes.max(2))
    } else if let Ok(v) = file.model.parse::<Variant>() {
        ModelSpec::for_variant(v)
    } else {
        let path = config.parent().unwrap_or(Path::new(".")).join(&file.model);
        ModelSpec::from_toml(&read_text(&path)?)?
    };
    let cfg = TrainConfig {
        epochs: file.epochs,
        batch_size: file.batch_size,
        lr: file.lr,
        momentum: file.momentum,
        weight_decay: file.weight_decay,
        bn_momentum: file.bn_momentum,
        seed: match file.seed {
            Some(s) => s,
            None => env_seed()?,
        },
        target_accuracy: file.target_accuracy,
    };
    let default_history = PathBuf::from(format!("{}.history.jsonl", out.display()));
    let history = history.unwrap_or(&default_history);
    match file.dtype.as_deref().unwrap_or("f32") {
        "f32" => train_with::<f32>(&spec, &cfg, data, out, history),
        "f64" => train_with::<f64>(&spec, &cfg, data, out, history),
        other => Err(Failure {
            code: exit::MALFORMED,
            message: format!("{}: dtype must be f32 or f64, got {other:?}", config.display()),
        }),
    }
}

/// `(mean, median, p95)` in milliseconds; p95 by nearest rank.
fn latency_stats(samples: &mut [f64]) -> (f64, f64, f64) {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (mean, median, samples[rank - 1])
}

fn bench_with<T: Scalar>(net: &Network<T>, input: usize, iters: usize, warmup: usize, format: Format) -> Outcome {
    let x = Tensor::<T>::randn([1, 3, input, input], 1.0, &mut ChaCha8Rng::seed_from_u64(env_seed()?));
    for _ in 0..warmup {
        net.forward(&x)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(net.forward(std::hint::black_box(&x))?);
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (mean, median, p95) = latency_stats(&mut samples);
    let out = match format {
        Format::Human => format!(
            "model {}  input {input}x{input}  batch 1  threads 1  warmup {warmup}  iters {iters}\n\
             latency ms: mean {mean:.3}  median {median:.3}  p95 {p95:.3}\n",
            net.spec.name
        ),
        Format::Jsonl => format!(
            "{}\n",
            serde_json::json!({
                "schema": BENCH_SCHEMA, "model": net.spec.name, "input": input, "batch": 1, "threads": 1,
                "warmup": warmup, "iters": iters, "mean_ms": mean, "median_ms": median, "p95_ms": p95,
            })
        ),
    };
    Ok((out, true))
}

fn bench(
    args: &ModelArgs,
    weights: Option<&Path>,
    iters: usize,
    warmup: usize,
    threads: usize,
    input: Option<usize>,
    format: Format,
) -> Outcome {
    if threads != 1 {
        return Err(usage("the engine is single-threaded; --threads must be 1"));
    }
    if iters == 0 {
        return Err(usage("--iters must be at least 1"));
    }
    match weights {
        Some(path) => match load_any(path)? {
            Loaded::F32(net) => {
                let size = input.unwrap_or(net.spec.input_size);
                bench_with(&net, size, iters, warmup, format)
            }
            Loaded::F64(net) => {
                let size = input.unwrap_or(net.spec.input_size);
                bench_with(&net, size, iters, warmup, format)
            }
        },
        None => {
            let spec = resolve_spec(args)?;
            let net = Network::<f32>::build(&spec, &mut ChaCha8Rng::seed_from_u64(env_seed()?))?;
            bench_with(&net, input.unwrap_or(spec.input_size), iters, warmup, format)
        }
    }
}

fn sweep(budget: f64, reduction: f64, max_g: Option<usize>, format: Format) -> Outcome {
    let max_g = max_g.unwrap_or_else(|| default_sweep_range(budget, reduction));
    let s = sweep_tradeoff(budget, reduction, max_g)?;
    let out = match format {
        Format::Human => render_sweep_human(&s),
        Format::Jsonl => render_sweep_jsonl(&s),
    };
    Ok((out, true))
}

fn synth(out: &Path, samples: usize, size: usize) -> Outcome {
    if samples == 0 || size < 32 {
        return Err(usage("--samples must be positive and --size at least 32"));
    }
    let data = synthetic_separable::<f32>(samples, size, env_seed()?);
    data.save(out)?;
    Ok((format!("wrote {samples} images of 3x{size}x{size} to {}\n", out.display()), true))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Analyze { model, input, format } => analyze(&model, input, format),
        Command::Verify { model, weights, format } => verify(&model, weights.as_deref(), format),
        Command::Infer {
            weights,
            image,
            topk,
            format,
        } => infer(&weights, &image, topk, format),
        Command::Train {
            config,
            data,
            out,
            history,
        } => train(&config, &data, &out, history.as_deref()),
        Command::Bench {
            model,
            weights,
            iters,
            warmup,
            threads,
            input,
            format,
        } => bench(&model, weights.as_deref(), iters, warmup, threads, input, format),
        Command::Sweep {
            budget,
            reduction,
            max_g,
            format,
        } => sweep(budget, reduction, max_g, format),
        Command::Synth { out, samples, size } => synth(&out, samples, size),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 and usage text on unknown flags.
    let cli = Cli::parse();
    match run(cli) {
        Ok((out, passed)) => {
            print!("{out}");
            if passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(exit::CHECK_FAILED)
            }
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
