//! Desk-scale recovery training: AdamW with warmup + linear decay, held-out
//! evaluation, and a finite-difference gradient check for the hand-written
//! backward pass.

mod backprop;
pub mod corpus;

pub use backprop::{batch_loss, loss_and_grads, zero_grads, Grads};
pub use corpus::{make_corpus, Corpus};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::kernels;
use crate::model::Checkpoint;

/// Optimizer choice; the only supported family is adaptive moments with
/// decoupled weight decay.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    LinearDecay,
}

/// Per-tensor freeze flags; frozen tensors receive no updates and report no
/// gradients.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: BTreeSet<String>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all(ckpt: &Checkpoint) -> Self {
        FreezeMask { frozen: ckpt.tensor_names().into_iter().collect() }
    }

    /// Freezes everything except factored-pair tensors (`*.w0` / `*.w1`),
    /// restricting training to the decomposed layers.
    pub fn all_but_factored(ckpt: &Checkpoint) -> Self {
        FreezeMask {
            frozen: ckpt
                .tensor_names()
                .into_iter()
                .filter(|n| !(n.ends_with(".w0") || n.ends_with(".w1")))
                .collect(),
        }
    }

    pub fn freeze(&mut self, name: impl Into<String>) {
        self.frozen.insert(name.into());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }
}

/// Training hyperparameters. `Default` is the no-tuning baseline: AdamW,
/// warmup ratio 0.03, linear decay, 1 epoch, lr 2e-5, weight decay 0,
/// max sequence length 512.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub weight_decay: f64,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Tokens consumed per epoch; batches are fixed-length packed sequences,
    /// drop-last.
    pub token_budget: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub freeze_mask: FreezeMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::default(),
            learning_rate: 2e-5,
            warmup_ratio: 0.03,
            schedule: Schedule::LinearDecay,
            epochs: 1,
            weight_decay: 0.0,
            max_seq_len: 512,
            seed: 0,
            token_budget: 50_000,
            batch_size: 1,
            freeze_mask: FreezeMask::none(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio)));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.token_budget == 0 {
            return Err(Error::Config("token_budget must be positive".into()));
        }
        Ok(())
    }
}

/// One optimizer step in the loss trace.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainStepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Tokens consumed up to and including this step.
    pub tokens: u64,
}

/// Held-out evaluation summary; `perplexity == exp(cross_entropy)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cross_entropy: f64,
    pub perplexity: f64,
    pub tokens: u64,
}

/// Learning rate at 1-based `step` of `total`: ramp over the first
/// `ceil(warmup_ratio · total)` steps, then decay linearly to zero at `total`.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warmup = (cfg.warmup_ratio * total as f64).ceil() as usize;
    if warmup > 0 && step <= warmup {
        cfg.learning_rate * step as f64 / warmup as f64
    } else if total == warmup {
        cfg.learning_rate
    } else {
        cfg.learning_rate * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Trains a copy of the checkpoint on the corpus train split and returns it
/// with the per-step loss trace. Fixed seed, config and corpus give a
/// bit-identical trace.
pub fn train(ckpt: &Checkpoint, cfg: &TrainConfig, corpus: &Corpus) -> Result<(Checkpoint, Vec<TrainStepRecord>)> {
    cfg.validate()?;
    if corpus.vocab_size > ckpt.graph.dims.vocab {
        return Err(Error::InvalidInput(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size, ckpt.graph.dims.vocab
        )));
    }
    if corpus.train.is_empty() {
        return Err(Error::InvalidInput("corpus train split is empty".into()));
    }

    let seq_len = corpus.seq_len.min(cfg.max_seq_len).min(ckpt.graph.dims.max_seq_len);
    if seq_len < 2 {
        return Err(Error::Config("effective sequence length below 2".into()));
    }
    let tokens_per_step = (cfg.batch_size * seq_len) as u64;
    let total_steps = (cfg.token_budget * cfg.epochs as u64 / tokens_per_step) as usize;
    if total_steps == 0 {
        return Err(Error::Config(format!(
            "token_budget {} smaller than one batch of {tokens_per_step} tokens",
            cfg.token_budget
        )));
    }

    let mut work = ckpt.clone();
    let mut moments1: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut moments2: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let Optimizer::AdamW { beta1, beta2, eps } = cfg.optimizer;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut trace = Vec::with_capacity(total_steps);
    for step in 1..=total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let seq = &corpus.train[order[cursor]];
            cursor += 1;
            batch.push(seq[..seq_len.min(seq.len())].to_vec());
        }

        let (loss, grads) = loss_and_grads(&work, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }

        let lr = lr_at(cfg, step, total_steps);
        let bias1 = 1.0 - beta1.powi(step as i32);
        let bias2 = 1.0 - beta2.powi(step as i32);
        for (name, grad) in &grads {
            if cfg.freeze_mask.is_frozen(name) {
                continue;
            }
            let w = work.tensor_mut(name).expect("grads cover all tensors");
            let m = moments1.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = moments2.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                w.data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + cfg.weight_decay * w.data[i]);
            }
        }

        trace.push(TrainStepRecord { step, lr, loss, tokens: step as u64 * tokens_per_step });
    }

    Ok((work, trace))
}

/// Mean token-level cross-entropy and perplexity over held-out sequences.
pub fn evaluate(ckpt: &Checkpoint, held_out: &[Vec<u32>]) -> Result<EvalReport> {
    let usable: Vec<Vec<u32>> = held_out.iter().filter(|s| s.len() >= 2).cloned().collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput("evaluation corpus is empty".into()));
    }
    let per_seq: Vec<Result<(f64, usize)>> = kernels::map_ordered(usable, |seq| {
        let (loss, n) = sequence_eval(ckpt, &seq)?;
        Ok((loss, n))
    });
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for r in per_seq {
        let (l, n) = r?;
        loss_sum += l;
        count += n;
    }
    let ce = loss_sum / count as f64;
    if !ce.is_finite() {
        return Err(Error::InvalidInput("non-finite evaluation loss".into()));
    }
    Ok(EvalReport { cross_entropy: ce, perplexity: ce.exp(), tokens: count as u64 })
}

fn sequence_eval(ckpt: &Checkpoint, seq: &[u32]) -> Result<(f64, usize)> {
    let logits = ckpt.forward(seq)?;
    let mut sum = 0.0;
    for i in 0..seq.len() - 1 {
        let row = logits.row(i);
        let target = seq[i + 1] as usize;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        sum += max + denom.ln() - row[target];
    }
    Ok((sum, seq.len() - 1))
}

/// Gradients of the mean batch loss with frozen tensors removed from the map
/// (frozen gradients are reported as absent).
pub fn gradients(ckpt: &Checkpoint, batch: &[Vec<u32>], freeze: &FreezeMask) -> Result<(f64, Grads)> {
    let (loss, mut grads) = loss_and_grads(ckpt, batch)?;
    let frozen: Vec<String> = freeze.frozen_names().map(str::to_string).collect();
    for name in frozen {
        grads.remove(&name);
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Number of parameters to sample across trainable tensors.
    pub samples: usize,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Central-difference step.
    pub fd_step: f64,
    pub seed: u64,
    pub freeze_mask: FreezeMask,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            samples: 200,
            tolerance: 1e-4,
            fd_step: 1e-5,
            seed: 0,
            freeze_mask: FreezeMask::none(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Largest relative errors, worst first.
    pub worst: Vec<GradCheckSample>,
}

/// Magnitudes below this are treated as zero when forming relative errors;
/// central differences at `h = 1e-5` cannot resolve anything smaller.
const GRAD_MAGNITUDE_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central finite differences on a
/// random parameter subsample. Fails with [`Error::GradCheckFailed`] listing
/// the worst tensors when any relative error exceeds the tolerance.
pub fn grad_check(ckpt: &Checkpoint, batch: &[Vec<u32>], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if ckpt.count_params() > 50_000 {
        return Err(Error::InvalidInput(format!(
            "grad_check expects a model of at most 50k parameters, got {}",
            ckpt.count_params()
        )));
    }

    let (_, grads) = gradients(ckpt, batch, &cfg.freeze_mask)?;
    let names: Vec<&String> = grads.keys().collect();
    let sizes: Vec<usize> = names.iter().map(|n| grads[*n].len()).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("no trainable parameters to check".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = ckpt.clone();
    let mut samples = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0usize;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let name = names[which].clone();
        let analytic = grads[&name][flat];

        let original = work.tensor(&name).expect("sampled tensor exists").data[flat];
        work.tensor_mut(&name).expect("sampled tensor exists").data[flat] = original + cfg.fd_step;
        let loss_plus = batch_loss(&work, batch)?;
        work.tensor_mut(&name).expect("sampled tensor exists").data[flat] = original - cfg.fd_step;
        let loss_minus = batch_loss(&work, batch)?;
        work.tensor_mut(&name).expect("sampled tensor exists").data[flat] = original;

        let numeric = (loss_plus - loss_minus) / (2.0 * cfg.fd_step);
        let denom = analytic.abs().max(numeric.abs());
        let rel_error = if denom < GRAD_MAGNITUDE_FLOOR { 0.0 } else { (analytic - numeric).abs() / denom };
        samples.push(GradCheckSample { tensor: name, index: flat, analytic, numeric, rel_error });
    }

    samples.sort_by(|a, b| b.rel_error.partial_cmp(&a.rel_error).unwrap());
    let max_rel_error = samples.first().map(|s| s.rel_error).unwrap_or(0.0);
    let report = GradCheckReport {
        max_rel_error,
        checked: samples.len(),
        worst: samples.into_iter().take(5).collect(),
    };

    if max_rel_error > cfg.tolerance {
        let worst = report
            .worst
            .iter()
            .map(|s| format!("{}[{}] rel {:.3e}", s.tensor, s.index, s.rel_error))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::GradCheckFailed { max_rel_error, tolerance: cfg.tolerance, worst });
    }
    Ok(report)
}
