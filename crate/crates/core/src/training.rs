//! Losses, learning-rate schedule, the SGD training loop and validation metrics.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoder::Sample;
use crate::netspec::{NetworkSpec, ValueLoss};
use crate::nn::{pack_inputs, Network, NnError, Output};
use crate::records::{Corpus, Split};

pub const BCE_CLAMP: f64 = 1e-7;
/// Samples per inference batch during evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("epoch {epoch} outside 0..{total}")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("non-finite {what} at step {step}")]
    Numeric { step: usize, what: &'static str },
    #[error("training diverged at step {step}; last good checkpoint: {checkpoint:?}")]
    Diverged { step: usize, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("no training samples available")]
    NoSamples,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub value_loss: ValueLoss,
    pub value_weight: f64,
    pub l2_weight: f64,
    pub batch_size: usize,
    pub epoch_samples: usize,
    /// (start epoch, learning rate), strictly increasing from epoch 0.
    pub schedule: Vec<(usize, f64)>,
    pub total_epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Directory for per-epoch checkpoints; none are written when absent.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            value_loss: ValueLoss::Mse,
            value_weight: 1.0,
            l2_weight: 0.0001,
            batch_size: 256,
            epoch_samples: 1_000_000,
            schedule: vec![(0, 0.005), (100, 0.0005), (150, 0.00005)],
            total_epochs: 200,
            momentum: 0.0,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Takes value loss and weight from the network name labels.
    pub fn for_spec(spec: &NetworkSpec) -> TrainConfig {
        TrainConfig {
            value_loss: spec.value_loss,
            value_weight: spec.value_weight as f64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.schedule.first().map(|s| s.0) != Some(0) {
            return bad("schedule must start at epoch 0");
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return bad("schedule epochs must be strictly increasing");
        }
        if self.schedule.iter().any(|s| !(s.1 > 0.0 && s.1.is_finite())) {
            return bad("learning rates must be positive");
        }
        if self.value_weight.is_nan() || self.value_weight <= 0.0 || self.l2_weight < 0.0 {
            return bad("weights must be positive");
        }
        if self.batch_size == 0 || self.epoch_samples == 0 {
            return bad("batch size and epoch length must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_samples.div_ceil(self.batch_size)
    }
}

/// Learning rate of the last schedule entry starting at or before `epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> Result<f64, TrainError> {
    if epoch >= cfg.total_epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            total: cfg.total_epochs,
        });
    }
    cfg.schedule
        .iter()
        .rev()
        .find(|s| s.0 <= epoch)
        .map(|s| s.1)
        .ok_or_else(|| TrainError::Config("schedule must start at epoch 0".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LossComponents {
    pub policy: f64,
    /// Weighted value term.
    pub value: f64,
    /// Weighted L2 term.
    pub l2: f64,
    pub total: f64,
}

/// Loss value plus its gradient at the policy and value scores.
pub struct LossGrad {
    pub components: LossComponents,
    pub d_policy_logits: Vec<f32>,
    pub d_value_logits: Vec<f32>,
}

/// Sum of squares of the L2-regularized weights.
pub fn weight_norm(net: &Network) -> f64 {
    net.params()
        .iter()
        .filter(|p| p.kind.decayed())
        .flat_map(|p| p.data.iter())
        .map(|&w| (w as f64) * (w as f64))
        .sum()
}

/// Mean value loss for one output under `kind`.
fn value_term(kind: ValueLoss, v: f64, t: f64) -> f64 {
    match kind {
        ValueLoss::Mse => (v - t) * (v - t),
        ValueLoss::Bce => {
            let v = v.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * v.ln() + (1.0 - t) * (1.0 - v).ln())
        }
    }
}

/// Cross-entropy plus weighted value loss plus weighted L2, averaged over the batch.
pub fn loss(out: &Output<f32>, targets: &[(usize, f32)], net: &Network, cfg: &TrainConfig, step: usize) -> Result<LossGrad, TrainError> {
    let b = out.batch;
    assert_eq!(targets.len(), b, "one target per output row");
    let s = out.policy.len() / b;
    let inv_b = 1.0 / b as f64;
    let mut policy = 0.0;
    let mut value = 0.0;
    let mut dpl = vec![0f32; b * s];
    let mut dvl = vec![0f32; b];
    for (i, &(target, vt)) in targets.iter().enumerate() {
        let logits = &out.policy_logits[i * s..(i + 1) * s];
        let mx = logits.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let lse = mx + logits.iter().map(|&z| (z as f64 - mx).exp()).sum::<f64>().ln();
        policy += lse - logits[target] as f64;
        for k in 0..s {
            let p = out.policy[i * s + k] as f64;
            let onehot = if k == target { 1.0 } else { 0.0 };
            dpl[i * s + k] = ((p - onehot) * inv_b) as f32;
        }
        let (v, t) = (out.value[i] as f64, vt as f64);
        value += value_term(cfg.value_loss, v, t);
        let dz = match cfg.value_loss {
            ValueLoss::Mse => 2.0 * (v - t) * v * (1.0 - v),
            ValueLoss::Bce => v - t,
        };
        dvl[i] = (cfg.value_weight * dz * inv_b) as f32;
    }
    let policy = policy * inv_b;
    let value = cfg.value_weight * value * inv_b;
    let l2 = cfg.l2_weight * weight_norm(net);
    let components = LossComponents {
        policy,
        value,
        l2,
        total: policy + value + l2,
    };
    if !components.total.is_finite() {
        return Err(TrainError::Numeric { step, what: "loss" });
    }
    if out.policy.iter().chain(&out.value).any(|v| !v.is_finite()) {
        return Err(TrainError::Numeric { step, what: "network output" });
    }
    Ok(LossGrad {
        components,
        d_policy_logits: dpl,
        d_value_logits: dvl,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Metrics {
    pub policy_accuracy: f64,
    pub value_mse: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub l2_loss: f64,
}

/// Top-1 accuracy, value MSE and mean cross-entropy in inference mode.
/// `value_loss` mirrors `value_mse`; `l2_loss` is zero.
pub fn evaluate(net: &Network, validation: &[Sample]) -> Result<Metrics, TrainError> {
    if validation.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut hits = 0usize;
    let mut se = 0.0;
    let mut ce = 0.0;
    for chunk in validation.chunks(EVAL_BATCH) {
        let inputs: Vec<_> = chunk.iter().map(|s| &s.input).collect();
        let out = net.infer(&pack_inputs(&inputs), chunk.len())?;
        let s = out.policy.len() / chunk.len();
        for (i, sample) in chunk.iter().enumerate() {
            let row = &out.policy[i * s..(i + 1) * s];
            // Ties resolve to the lowest index.
            let best = (0..s).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hits += (best == sample.policy_target) as usize;
            let d = out.value[i] as f64 - sample.value_target as f64;
            se += d * d;
            let logits = &out.policy_logits[i * s..(i + 1) * s];
            let mx = logits.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
            let lse = mx + logits.iter().map(|&z| (z as f64 - mx).exp()).sum::<f64>().ln();
            ce += lse - logits[sample.policy_target] as f64;
        }
    }
    let n = validation.len() as f64;
    Ok(Metrics {
        policy_accuracy: hits as f64 / n,
        value_mse: se / n,
        policy_loss: ce / n,
        value_loss: se / n,
        l2_loss: 0.0,
    })
}

/// Where training batches come from.
pub trait SampleSource {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>, TrainError>;
}

impl SampleSource for Corpus {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>, TrainError> {
        self.sample_batch(n, rng).map_err(|_| TrainError::NoSamples)
    }
}

/// A fixed set of samples visited in reshuffled passes.
pub struct FixedSamples {
    samples: Vec<Sample>,
    order: Vec<usize>,
    cursor: usize,
}

impl FixedSamples {
    pub fn new(samples: Vec<Sample>) -> FixedSamples {
        let order = (0..samples.len()).collect();
        FixedSamples {
            cursor: samples.len(),
            samples,
            order,
        }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

impl SampleSource for FixedSamples {
    fn next_batch(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>, TrainError> {
        if self.samples.is_empty() {
            return Err(TrainError::NoSamples);
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.samples[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        Ok(out)
    }
}

/// One optimizer step of SGD with optional momentum. Returns the loss.
pub struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(net: &Network) -> Sgd {
        Sgd {
            velocity: net.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, batch: &[Sample], cfg: &TrainConfig, lr: f64, step: usize) -> Result<LossComponents, TrainError> {
        let inputs: Vec<_> = batch.iter().map(|s| &s.input).collect();
        let targets: Vec<(usize, f32)> = batch.iter().map(|s| (s.policy_target, s.value_target)).collect();
        let tape = net.forward_train(&pack_inputs(&inputs), batch.len())?;
        let lg = loss(&tape.output, &targets, net, cfg, step)?;
        let grads = net.backward(&tape, &lg.d_policy_logits, &lg.d_value_logits);
        let (lr, mu, l2) = (lr as f32, cfg.momentum as f32, 2.0 * cfg.l2_weight as f32);
        for ((p, g), v) in net.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            if !p.kind.trainable() {
                continue;
            }
            let decay = if p.kind.decayed() { l2 } else { 0.0 };
            for ((w, g), v) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                let g = g + decay * *w;
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        Ok(lg.components)
    }
}

/// Per-epoch log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Training-side means over the epoch plus validation accuracy and MSE.
    pub metrics: Metrics,
}

pub const METRICS_HEADER: &str = "epoch,lr,policy_loss,value_loss,l2_loss,val_accuracy,val_mse";

pub fn write_metrics_csv<W: Write>(log: &[EpochLog], mut w: W) -> io::Result<()> {
    writeln!(w, "{}", METRICS_HEADER)?;
    for row in log {
        let m = row.metrics;
        writeln!(
            w,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.epoch, row.lr, m.policy_loss, m.value_loss, m.l2_loss, m.policy_accuracy, m.value_mse
        )?;
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{:04}.mgnn", epoch))
}

/// Trains `net` for `cfg.total_epochs` epochs of `cfg.epoch_samples` samples,
/// evaluating on `validation` after each epoch (skipped when empty).
pub fn train_network<S: SampleSource>(
    mut net: Network,
    source: &mut S,
    validation: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut sgd = Sgd::new(&net);
    let mut log = Vec::with_capacity(cfg.total_epochs);
    let mut last_good: Option<PathBuf> = None;
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut step = 0;
    for epoch in 0..cfg.total_epochs {
        let lr = lr_at(cfg, epoch)?;
        let mut sums = LossComponents::default();
        let mut remaining = cfg.epoch_samples;
        let mut weight = 0.0;
        while remaining > 0 {
            let n = remaining.min(cfg.batch_size);
            let batch = source.next_batch(n, &mut rng)?;
            let c = match sgd.step(&mut net, &batch, cfg, lr, step) {
                Ok(c) => c,
                Err(TrainError::Numeric { step, .. }) => return Err(TrainError::Diverged { step, checkpoint: last_good }),
                Err(e) => return Err(e),
            };
            let w = n as f64;
            sums.policy += c.policy * w;
            sums.value += c.value * w;
            sums.l2 += c.l2 * w;
            weight += w;
            remaining -= n;
            step += 1;
        }
        let val = if validation.is_empty() {
            Metrics::default()
        } else {
            evaluate(&net, validation)?
        };
        log.push(EpochLog {
            epoch,
            lr,
            metrics: Metrics {
                policy_accuracy: val.policy_accuracy,
                value_mse: val.value_mse,
                policy_loss: sums.policy / weight,
                value_loss: sums.value / weight,
                l2_loss: sums.l2 / weight,
            },
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = checkpoint_path(dir, epoch);
            net.save(&path)?;
            last_good = Some(path);
        }
    }
    Ok((net, log))
}

/// Builds a freshly initialized network for `spec` and trains it on a split.
pub fn train(spec: &NetworkSpec, split: &Split, cfg: &TrainConfig) -> Result<(Network, Vec<EpochLog>), TrainError> {
    let net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut source = split.train.clone();
    train_network(net, &mut source, &split.validation, cfg)
}

/// Draws `n` distinct-state samples from a corpus, each under a random symmetry.
pub fn fixed_samples_from<R: Rng>(corpus: &Corpus, n: usize, rng: &mut R) -> Vec<Sample> {
    corpus.sample_batch(n, rng).unwrap_or_default()
}
