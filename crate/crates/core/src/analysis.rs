//! Static cost model, structural verifiers and report rendering.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dyshiftmax::dysm_madds;
use crate::error::{config_err, Result};
use crate::microfac::{apply_dense, channel_shuffle, path_count_oracle, MicroFacPointwise};
use crate::models::{Network, Op};
use crate::tensor::{Scalar, Tensor};

/// Version tag written into every machine-readable record.
pub const COST_SCHEMA: &str = "micronet.cost/1";
pub const SWEEP_SCHEMA: &str = "micronet.sweep/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub op: String,
    pub madds: u64,
    pub params: u64,
    /// `(C, H, W)` after the layer.
    pub output: [usize; 3],
    pub dynamic: bool,
}

/// Per-image cost of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub input: [usize; 2],
    pub per_layer: Vec<LayerCost>,
    pub total_madds: u64,
    pub total_params: u64,
    pub dynamic_madds: u64,
    /// Fraction of MAdds spent in DY-Shift-Max (hyper-function and application).
    pub dynamic_share: f64,
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Conv { .. } => "conv",
        Op::BatchNorm(_) => "batchnorm",
        Op::Relu => "relu",
        Op::DyShiftMax(_) => "dyshiftmax",
        Op::Shuffle { .. } => "shuffle",
        Op::PushSkip => "skip_save",
        Op::AddSkip => "skip_add",
        Op::GlobalPool => "avgpool",
        Op::Linear { .. } => "linear",
        Op::Dropout { .. } => "dropout",
    }
}

/// Closed-form MAdds and parameters of every layer for one `h×w` image.
///
/// Convolutions count every tap including padding, pooling counts one
/// accumulate per input element, linear layers `Din·Dout`. Normalization,
/// bias and activation comparisons are free.
pub fn count_costs<T: Scalar>(net: &Network<T>, input: (usize, usize)) -> Result<CostReport> {
    let (mut c, mut h, mut w) = (3usize, input.0, input.1);
    let mut per_layer = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let mut dynamic = false;
        let madds = match &layer.op {
            Op::Conv { spec, .. } => {
                if spec.in_channels != c {
                    return Err(config_err!("{}: expects {} channels, gets {}", layer.name, spec.in_channels, c));
                }
                let m = spec.madds(h, w)?;
                (h, w) = spec.output_hw(h, w)?;
                c = spec.out_channels;
                m
            }
            Op::DyShiftMax(d) => {
                dynamic = true;
                dysm_madds(d.channels, d.hidden, d.j, d.k, h, w)
            }
            Op::GlobalPool => {
                let m = (c * h * w) as u64;
                (h, w) = (1, 1);
                m
            }
            Op::Linear { weight, .. } => {
                let din = c * h * w;
                c = weight.n();
                (h, w) = (1, 1);
                (din * c) as u64
            }
            _ => 0,
        };
        per_layer.push(LayerCost {
            name: layer.name.clone(),
            op: op_name(&layer.op).into(),
            madds,
            params: layer.params() as u64,
            output: [c, h, w],
            dynamic,
        });
    }
    let total_madds = per_layer.iter().map(|l| l.madds).sum();
    let total_params = per_layer.iter().map(|l| l.params).sum();
    let dynamic_madds = per_layer.iter().filter(|l| l.dynamic).map(|l| l.madds).sum();
    Ok(CostReport {
        model: net.spec.name.clone(),
        input: [input.0, input.1],
        per_layer,
        total_madds,
        total_params,
        dynamic_madds,
        dynamic_share: if total_madds == 0 { 0.0 } else { dynamic_madds as f64 / total_madds as f64 },
    })
}

pub fn render_cost_human(r: &CostReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model {}  input {}x{}", r.model, r.input[0], r.input[1]);
    let _ = writeln!(s, "{:<24} {:<11} {:>12} {:>10}  output", "layer", "op", "madds", "params");
    for l in &r.per_layer {
        let _ = writeln!(
            s,
            "{:<24} {:<11} {:>12} {:>10}  {}x{}x{}",
            l.name, l.op, l.madds, l.params, l.output[0], l.output[1], l.output[2]
        );
    }
    let _ = writeln!(
        s,
        "total: {:.3}M MAdds, {:.3}M params, dynamic share {:.1}% ({:.3}M)",
        r.total_madds as f64 / 1e6,
        r.total_params as f64 / 1e6,
        r.dynamic_share * 100.0,
        r.dynamic_madds as f64 / 1e6
    );
    s
}

/// One JSON object per line: every layer, then a `total` record.
pub fn render_cost_jsonl(r: &CostReport) -> String {
    let mut s = String::new();
    for l in &r.per_layer {
        let rec = serde_json::json!({
            "schema": COST_SCHEMA,
            "record": "layer",
            "model": r.model,
            "name": l.name,
            "op": l.op,
            "madds": l.madds,
            "params": l.params,
            "output": l.output,
            "dynamic": l.dynamic,
        });
        let _ = writeln!(s, "{rec}");
    }
    let total = serde_json::json!({
        "schema": COST_SCHEMA,
        "record": "total",
        "model": r.model,
        "input": r.input,
        "madds": r.total_madds,
        "params": r.total_params,
        "dynamic_madds": r.dynamic_madds,
        "dynamic_share": r.dynamic_share,
    });
    let _ = writeln!(s, "{total}");
    s
}

/// Rank-one check of one factorized layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEntry {
    pub name: String,
    pub row_groups: usize,
    pub col_groups: usize,
    /// Largest `σ₂/σ₁` over all blocks.
    pub worst_ratio: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub layers: Vec<RankEntry>,
}

impl RankReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn violations(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect()
    }
}

/// Singular-value threshold: a block is rank one when `σ₂ < 1e-8·σ₁`.
pub const RANK_TOL: f64 = 1e-8;

/// `σ₂/σ₁` of each block when `w` is split into `row_groups × col_groups` equal blocks.
pub fn block_ratios(w: &DMatrix<f64>, row_groups: usize, col_groups: usize) -> Vec<f64> {
    let (rows, cols) = w.shape();
    let (bh, bw) = (rows / row_groups, cols / col_groups);
    let mut out = Vec::with_capacity(row_groups * col_groups);
    for a in 0..row_groups {
        for b in 0..col_groups {
            let block = w.view((a * bh, b * bw), (bh, bw)).into_owned();
            let mut sv: Vec<f64> = block.singular_values().iter().copied().collect();
            sv.sort_by(|x, y| y.total_cmp(x));
            let ratio = match (sv.first(), sv.get(1)) {
                (Some(&s1), Some(&s2)) if s1 > 0.0 => s2 / s1,
                _ => 0.0,
            };
            out.push(ratio);
        }
    }
    out
}

/// Checks a dense matrix against the rank-one block law.
pub fn check_dense_rank(name: &str, w: &DMatrix<f64>, row_groups: usize, col_groups: usize) -> RankEntry {
    let worst = block_ratios(w, row_groups, col_groups).into_iter().fold(0.0, f64::max);
    RankEntry {
        name: name.into(),
        row_groups,
        col_groups,
        worst_ratio: worst,
        passed: worst < RANK_TOL,
    }
}

pub fn check_layer_rank<T: Scalar>(name: &str, layer: &MicroFacPointwise<T>) -> RankEntry {
    check_dense_rank(name, &layer.expand_dense(), layer.g2, layer.g1)
}

/// Expands every factorized pointwise layer and checks each block for rank one.
pub fn verify_rank<T: Scalar>(net: &Network<T>) -> RankReport {
    RankReport {
        layers: net.pointwise_factors().iter().map(|(n, l)| check_layer_rank(n, l)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// All structural checks of a network's factorized layers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Rank law, connectivity law, factorized-vs-dense forward equivalence and
/// shuffle involution for every factorized pointwise layer.
pub fn verify_network<T: Scalar, R: Rng + ?Sized>(net: &Network<T>, rng: &mut R) -> VerifyReport {
    let mut checks = Vec::new();
    for (name, layer) in net.pointwise_factors() {
        let rank = check_layer_rank(&name, &layer);
        checks.push(Check {
            name: format!("{name}.rank"),
            passed: rank.passed,
            detail: format!("worst σ2/σ1 {:.3e} over {}x{} blocks", rank.worst_ratio, rank.row_groups, rank.col_groups),
        });

        let expected = layer.connectivity();
        let bad = (0..layer.c_out).filter(|&o| path_count_oracle(&layer, o) != expected).count();
        checks.push(Check {
            name: format!("{name}.connectivity"),
            passed: bad == 0,
            detail: format!("E = {expected} paths, {bad} output channels disagree"),
        });

        let layer64 = MicroFacPointwise::<f64>::new(
            layer.c_in,
            layer.c_out,
            layer.hidden,
            layer.g1,
            layer.g2,
            layer.q.cast(),
            layer.p.cast(),
        )
        .expect("same structure");
        let x = Tensor::<f64>::randn([1, layer.c_in, 3, 3], 1.0, rng);
        let diff = match (layer64.forward(&x), apply_dense(&x, &layer64.expand_dense())) {
            (Ok(a), Ok(b)) => a.max_abs_diff(&b),
            _ => f64::INFINITY,
        };
        checks.push(Check {
            name: format!("{name}.equivalence"),
            passed: diff <= 1e-10,
            detail: format!("max |factorized − dense| = {diff:.3e}"),
        });

        let g = layer.g1;
        let z = Tensor::<f64>::randn([1, layer.hidden, 1, 1], 1.0, rng);
        let back = channel_shuffle(&z, g).and_then(|s| channel_shuffle(&s, layer.hidden / g));
        checks.push(Check {
            name: format!("{name}.shuffle"),
            passed: back.map(|b| b == z).unwrap_or(false),
            detail: format!("shuffle({g}) then shuffle({})", layer.hidden / g),
        });
    }
    VerifyReport { checks }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub g: usize,
    pub c: f64,
    pub e: f64,
    /// `C == E` on this row.
    pub crossing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub budget: f64,
    pub reduction: f64,
    pub rows: Vec<SweepRow>,
    /// Exact crossing `G* = (O / 2R)^(1/3)` where `C = E = O / (2G*)`.
    pub crossing_g: f64,
    pub crossing_c: f64,
}

/// Width `C = √(O·R·G/2)` and connectivity `E = O/(2G)` at a fixed per-position budget `O`.
pub fn sweep_tradeoff(budget: f64, reduction: f64, max_g: usize) -> Result<Sweep> {
    if !(budget > 0.0) || !(reduction > 0.0) || max_g == 0 {
        return Err(config_err!("sweep needs a positive budget, reduction and group range"));
    }
    let rows = (1..=max_g)
        .map(|g| {
            let gf = g as f64;
            let c = (budget * reduction * gf / 2.0).sqrt();
            let e = budget / (2.0 * gf);
            SweepRow {
                g,
                c,
                e,
                crossing: (c - e).abs() <= 1e-9 * c.max(e),
            }
        })
        .collect();
    let crossing_g = (budget / (2.0 * reduction)).cbrt();
    Ok(Sweep {
        budget,
        reduction,
        rows,
        crossing_g,
        crossing_c: budget / (2.0 * crossing_g),
    })
}

/// Default group range: enough rows to bracket the crossing.
pub fn default_sweep_range(budget: f64, reduction: f64) -> usize {
    let g = (budget / (2.0 * reduction)).cbrt();
    ((2.0 * g).ceil() as usize).max(8)
}

pub fn render_sweep_human(s: &Sweep) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "budget O={} per position, R={}", s.budget, s.reduction);
    let _ = writeln!(out, "{:>4} {:>12} {:>12}", "G", "C", "E");
    for r in &s.rows {
        let mark = if r.crossing { "  <- C == E" } else { "" };
        let _ = writeln!(out, "{:>4} {:>12.4} {:>12.4}{}", r.g, r.c, r.e, mark);
    }
    let _ = writeln!(
        out,
        "crossing at G = {:.4}, C = E = {:.4}, sqrt(C/R) = {:.4}",
        s.crossing_g,
        s.crossing_c,
        (s.crossing_c / s.reduction).sqrt()
    );
    out
}

pub fn render_sweep_jsonl(s: &Sweep) -> String {
    let mut out = String::new();
    for r in &s.rows {
        let rec = serde_json::json!({
            "schema": SWEEP_SCHEMA,
            "record": "row",
            "g": r.g,
            "c": r.c,
            "e": r.e,
            "crossing": r.crossing,
        });
        let _ = writeln!(out, "{rec}");
    }
    let rec = serde_json::json!({
        "schema": SWEEP_SCHEMA,
        "record": "crossing",
        "budget": s.budget,
        "reduction": s.reduction,
        "g": s.crossing_g,
        "c": s.crossing_c,
        "e": s.crossing_c,
    });
    let _ = writeln!(out, "{rec}");
    out
}
