//! Gradients, optimizer and the desk-scale training loop.

pub mod data;
pub mod gradcheck;
pub mod tape;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::models::{Mode, Network, Op};
use crate::tensor::{Scalar, Tensor};
use data::Dataset;
use tape::{BatchStats, Tape};

/// `base · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: f64, total: f64, base: f64) -> f64 {
    if total <= 0.0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch.clamp(0.0, total) / total).cos())
}

/// Momentum buffers, one per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(shapes: impl IntoIterator<Item = [usize; 4]>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: shapes.into_iter().map(Tensor::zeros).collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn for_network(net: &Network<T>, momentum: f64, weight_decay: f64) -> Self {
        Self::new(net.trainable().iter().map(|t| t.shape()), momentum, weight_decay)
    }
}

/// `v ← m·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], state: &mut OptimState<T>, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(dim_err!(
            "{} params, {} grads, {} momentum buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        ));
    }
    let (m, wd, lr) = (
        T::from_f64_lossy(state.momentum),
        T::from_f64_lossy(state.weight_decay),
        T::from_f64_lossy(lr),
    );
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(dim_err!("param {:?} grad {:?} buffer {:?}", p.shape(), g.shape(), v.shape()));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the newest batch in the running normalization statistics.
    pub bn_momentum: f64,
    pub seed: u64,
    /// Stop once full-set accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-5,
            bn_momentum: 0.1,
            seed: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Entry 0 is measured before the first update.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
}

impl History {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |m| m.accuracy)
    }
}

/// Batch statistics keyed by normalization layer index.
pub type LayerStats<T> = Vec<(usize, BatchStats<T>)>;

/// Loss and accuracy over the whole set in one batch with batch statistics
/// and no dropout; also returns those statistics per normalization layer.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset<T>) -> Result<(f64, f64, LayerStats<T>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut tape = Tape::new(false);
    let x = tape.leaf(data.images.clone());
    let out = net.forward_tape(&mut tape, x, Mode::BatchStats)?;
    let loss = tape.cross_entropy(out.logits, &data.labels)?;
    let logits = tape.value(out.logits);
    let classes = logits.c();
    let correct = logits
        .data()
        .chunks(classes)
        .zip(&data.labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == label
        })
        .count();
    Ok((
        tape.value(loss).data()[0].to_f64_lossy(),
        correct as f64 / data.len() as f64,
        out.bn_stats,
    ))
}

fn set_running<T: Scalar>(net: &mut Network<T>, stats: &[(usize, BatchStats<T>)], momentum: f64) {
    for (idx, s) in stats {
        if let Op::BatchNorm(bn) = &mut net.layers[*idx].op {
            bn.update_running(s, momentum);
        }
    }
}

/// Minibatch SGD with cosine decay. Running statistics are replaced by
/// full-set statistics at the end, so eval-mode inference matches the
/// recorded metrics.
pub fn train_loop<T: Scalar>(net: &mut Network<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<History> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::for_network(net, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let (loss, accuracy, _) = evaluate(net, data)?;
    history.epochs.push(EpochMetrics {
        epoch: 0,
        loss,
        accuracy,
        lr: cfg.lr,
    });
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg.epochs as f64, cfg.lr);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let mut tape = Tape::new(true);
            let xv = tape.leaf(x);
            let out = net.forward_tape(&mut tape, xv, Mode::Train(&mut rng))?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor<T>> = out
                .params
                .iter()
                .map(|&v| grads.get_or_zeros(v, tape.value(v).shape()))
                .collect();
            drop(tape);
            sgd_step(&mut net.trainable_mut(), &g, &mut state, lr)?;
            set_running(net, &out.bn_stats, cfg.bn_momentum);
        }
        let (loss, accuracy, _) = evaluate(net, data)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        history.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            loss,
            accuracy,
            lr,
        });
        if cfg.target_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }
    let (_, _, stats) = evaluate(net, data)?;
    set_running(net, &stats, 1.0);
    Ok(history)
}
