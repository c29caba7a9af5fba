//! Central finite-difference oracle for tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub probes: usize,
    pub step: f64,
    pub rtol: f64,
    /// Denominator floor of the relative error, for near-zero gradients.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 20,
            step: 1e-6,
            rtol: 1e-5,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares tape gradients of a scalar function against central differences
/// at randomly chosen input coordinates.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() || inputs.iter().all(|t| t.is_empty()) {
        return Err(Error::Usage("gradcheck needs at least one non-empty input".into()));
    }
    let eval = |vals: &[Tensor<f64>], record: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new(record);
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs, true)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probes = Vec::with_capacity(cfg.probes);
    let candidates: Vec<usize> = (0..inputs.len()).filter(|&i| !inputs[i].is_empty()).collect();
    for _ in 0..cfg.probes {
        let input = candidates[rng.random_range(0..candidates.len())];
        let index = rng.random_range(0..inputs[input].len());
        let analytic = grads.get(vars[input]).map_or(0.0, |g| g.data()[index]);
        let mut shifted = inputs.to_vec();
        let base = inputs[input].data()[index];
        let mut at = |delta: f64| -> Result<f64> {
            shifted[input].data_mut()[index] = base + delta;
            let (t, _, o) = eval(&shifted, false)?;
            Ok(t.value(o).data()[0])
        };
        let numeric = (at(cfg.step)? - at(-cfg.step)?) / (2.0 * cfg.step);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
        probes.push(Probe {
            input,
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= cfg.rtol,
        probes,
        max_rel_err,
    })
}
