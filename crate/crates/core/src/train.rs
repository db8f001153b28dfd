//! Training objective, optimizer loop, and gradient checking.
//!
//! The objective is the mean, over every non-padding target cell of every
//! predicted window, of `w_j · CE(softmax(logits[t][j]), target[t][j])`.
//! Inputs are corrupted by the configured [`NoiseSchedule`] before each
//! forward pass; targets are always clean.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval;
use crate::linalg::{self, Real};
use crate::model::{self, ModelConfig, ModelParams, SequenceInput};
use crate::noise::{self, LossWeights, NoiseSchedule, ScheduleKind};
use crate::seed::{self, Stream};
use crate::tensorize::{self, WindowedSequence};
use crate::toydata::{self, Sample, TokenId};

/// Loss value with its per-slot breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Weighted mean cross-entropy over unmasked cells (nats).
    pub loss: f64,
    /// Unweighted mean cross-entropy within each slot; `NaN` for slots with
    /// no unmasked cell.
    pub slot_losses: Vec<f64>,
    pub slot_counts: Vec<usize>,
    pub cells: usize,
}

fn check_loss_shapes<F>(
    logits: &[F],
    targets: &[TokenId],
    mask: &[bool],
    weights: &LossWeights,
    vocab_size: usize,
) -> Result<usize> {
    let k = weights.w.len();
    if targets.len() != mask.len() || targets.len() % k != 0 {
        return Err(Error::param(format!(
            "{} targets / {} mask cells do not form rows of {k}",
            targets.len(),
            mask.len()
        )));
    }
    if logits.len() != targets.len() * vocab_size {
        return Err(Error::param(format!(
            "{} logits for {} cells of vocabulary {vocab_size}",
            logits.len(),
            targets.len()
        )));
    }
    let cells = mask.iter().filter(|m| **m).count();
    if cells == 0 {
        return Err(Error::EmptyLoss);
    }
    for (&t, &m) in targets.iter().zip(mask) {
        if m && t as usize >= vocab_size {
            return Err(Error::param(format!("unmasked target {t} outside vocabulary")));
        }
    }
    Ok(cells)
}

/// Masked, weighted cross-entropy. `logits` is `cells × V`, `targets` and
/// `mask` are `cells` long and grouped in rows of `k = weights.w.len()`.
pub fn loss<F: Real>(
    logits: &[F],
    targets: &[TokenId],
    mask: &[bool],
    weights: &LossWeights,
    vocab_size: usize,
) -> Result<LossOutput> {
    let cells = check_loss_shapes(logits, targets, mask, weights, vocab_size)?;
    Ok(loss_impl(logits, targets, mask, weights, vocab_size, cells as f64, None))
}

/// [`loss`] plus the gradient with respect to the logits.
pub fn loss_and_grad<F: Real>(
    logits: &[F],
    targets: &[TokenId],
    mask: &[bool],
    weights: &LossWeights,
    vocab_size: usize,
) -> Result<(LossOutput, Vec<F>)> {
    let cells = check_loss_shapes(logits, targets, mask, weights, vocab_size)?;
    let mut grad = vec![F::ZERO; logits.len()];
    let out = loss_impl(logits, targets, mask, weights, vocab_size, cells as f64, Some(&mut grad));
    Ok((out, grad))
}

/// Shared kernel. `denominator` normalizes both the loss and the gradient,
/// which lets sharded batches share one global cell count.
pub(crate) fn loss_impl<F: Real>(
    logits: &[F],
    targets: &[TokenId],
    mask: &[bool],
    weights: &LossWeights,
    vocab_size: usize,
    denominator: f64,
    mut grad: Option<&mut [F]>,
) -> LossOutput {
    let k = weights.w.len();
    let v = vocab_size;
    let mut total = 0.0;
    let mut slot_sum = vec![0.0; k];
    let mut slot_counts = vec![0usize; k];
    let mut probs = vec![0.0f64; v];
    for (cell, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let j = cell % k;
        let row = &logits[cell * v..(cell + 1) * v];
        let lse = linalg::log_sum_exp(row);
        let ce = lse - row[t as usize].to_f64();
        total += weights.w[j] * ce;
        slot_sum[j] += ce;
        slot_counts[j] += 1;
        if let Some(g) = grad.as_deref_mut() {
            for (p, &x) in probs.iter_mut().zip(row) {
                *p = (x.to_f64() - lse).exp();
            }
            probs[t as usize] -= 1.0;
            let scale = weights.w[j] / denominator;
            for (o, &p) in g[cell * v..(cell + 1) * v].iter_mut().zip(&probs) {
                *o = F::from_f64(p * scale);
            }
        }
    }
    LossOutput {
        loss: total / denominator,
        slot_losses: slot_sum
            .iter()
            .zip(&slot_counts)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        slot_counts,
        cells: mask.iter().filter(|m| **m).count(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub schedule: NoiseSchedule,
    pub weights: LossWeights,
    /// Samples per forward/backward shard; gradients of all shards are summed.
    pub shard_size: usize,
    /// Held-out NLL is measured every this many steps (and at the last step).
    /// Zero disables it.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(k: usize) -> Result<Self> {
        Ok(TrainConfig {
            batch_size: 32,
            steps: 2000,
            learning_rate: 1e-3,
            warmup_steps: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
            schedule: NoiseSchedule::new(ScheduleKind::Exponential, k)?,
            weights: LossWeights::uniform(k),
            shard_size: 32,
            eval_every: 0,
        })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::param(format!("learning rate {} invalid", self.learning_rate)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.shard_size == 0 {
            return Err(Error::param("steps, batch_size and shard_size must be >= 1"));
        }
        if self.schedule.k != k || self.weights.w.len() != k {
            return Err(Error::param(format!(
                "noise schedule (k={}) and loss weights ({}) must match window size {k}",
                self.schedule.k,
                self.weights.w.len()
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("moment decay rates must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adaptive-moment optimizer state with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    /// Number of updates applied so far.
    pub t: u64,
    decay_mask: Vec<bool>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let n = params.data.len();
        Optimizer {
            m: vec![F::ZERO; n],
            v: vec![F::ZERO; n],
            t: 0,
            decay_mask: decay_mask(params),
        }
    }

    pub fn restore(params: &ModelParams<F>, m: Vec<F>, v: Vec<F>, t: u64) -> Result<Self> {
        let n = params.data.len();
        if m.len() != n || v.len() != n {
            return Err(Error::param("optimizer moments do not match parameter count"));
        }
        Ok(Optimizer {
            m,
            v,
            t,
            decay_mask: decay_mask(params),
        })
    }

    pub fn apply(&mut self, params: &mut ModelParams<F>, grads: &[F], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (fb1, fb2) = (F::from_f64(b1), F::from_f64(b2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - b1), F::from_f64(1.0 - b2));
        let step = F::from_f64(lr / c1);
        let inv_c2 = F::from_f64(1.0 / c2);
        let eps = F::from_f64(cfg.epsilon);
        let decay = F::from_f64(lr * cfg.weight_decay);
        for i in 0..grads.len() {
            let g = grads[i];
            self.m[i] = fb1 * self.m[i] + one_b1 * g;
            self.v[i] = fb2 * self.v[i] + one_b2 * g * g;
            let denom = (self.v[i] * inv_c2).sqrt() + eps;
            let mut x = params.data[i];
            if self.decay_mask[i] {
                x -= decay * x;
            }
            params.data[i] = x - step * self.m[i] / denom;
        }
    }
}

/// Decay applies to 2-D weight matrices other than embeddings.
fn decay_mask<F>(params: &ModelParams<F>) -> Vec<bool> {
    let mut mask = vec![false; params.data.len()];
    for e in &params.layout.entries {
        if e.shape.len() == 2 && e.name.ends_with(".w") {
            mask[e.range.clone()].fill(true);
        }
    }
    mask
}

pub fn global_norm<F: Real>(g: &[F]) -> f64 {
    g.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
}

/// Windowed, corrupted, target-aligned view of one sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub class_label: usize,
    pub windowed: WindowedSequence,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

pub fn prepare_sample(
    sample: &Sample,
    k: usize,
    vocab_size: usize,
    schedule: &NoiseSchedule,
    corrupt_seed: u64,
) -> Result<PreparedSample> {
    let mut windowed = tensorize::to_windows(&sample.tokens, k, vocab_size)?;
    let (targets, mask) = windowed.prediction_targets();
    noise::corrupt_inputs_in_place(&mut windowed, schedule, corrupt_seed);
    Ok(PreparedSample {
        class_label: sample.class_label,
        windowed,
        targets,
        mask,
    })
}

pub(crate) fn prepare_batch(
    samples: &[Sample],
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    batch_seed: u64,
) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.tokens.len() != cfg.seq_len {
                return Err(Error::param(format!(
                    "sample {i} has {} tokens, model expects {}",
                    s.tokens.len(),
                    cfg.seq_len
                )));
            }
            let item_seed = seed::derive(batch_seed, Stream::Corrupt, i as u64);
            prepare_sample(s, cfg.k, cfg.vocab_size, schedule, item_seed)
        })
        .collect()
}

/// Loss and summed parameter gradient over prepared samples, processed in
/// shards of `shard_size`. The loss is normalized by the batch-wide count
/// of unmasked cells, so the result does not depend on the sharding.
pub fn batch_gradient<F: Real>(
    params: &ModelParams<F>,
    batch: &[PreparedSample],
    weights: &LossWeights,
    shard_size: usize,
) -> Result<(LossOutput, Vec<F>)> {
    let shards: Vec<&[PreparedSample]> = batch.chunks(shard_size.max(1)).collect();
    shard_gradients(params, &shards, weights)
}

/// Like [`batch_gradient`] with explicit shards, accumulated in the given order.
pub fn shard_gradients<F: Real>(
    params: &ModelParams<F>,
    shards: &[&[PreparedSample]],
    weights: &LossWeights,
) -> Result<(LossOutput, Vec<F>)> {
    let cfg = &params.config;
    let cells: usize = shards
        .iter()
        .flat_map(|s| s.iter())
        .map(|p| p.mask.iter().filter(|m| **m).count())
        .sum();
    if cells == 0 {
        return Err(Error::EmptyLoss);
    }
    let denominator = cells as f64;
    let tables = model::q_in_tables(params);
    let mut grads = vec![F::ZERO; params.data.len()];
    let k = cfg.k;
    let mut total = 0.0;
    let mut slot_sum = vec![0.0; k];
    let mut slot_counts = vec![0usize; k];
    for shard in shards {
        if shard.is_empty() {
            continue;
        }
        let inputs: Vec<SequenceInput> = shard
            .iter()
            .map(|p| SequenceInput {
                class_label: p.class_label,
                windows: &p.windowed.inputs,
            })
            .collect();
        model::check_inputs(params, &inputs)?;
        let (logits, cache) = model::forward_batch_unchecked(params, &tables, &inputs);
        let targets: Vec<TokenId> = shard.iter().flat_map(|p| p.targets.iter().copied()).collect();
        let mask: Vec<bool> = shard.iter().flat_map(|p| p.mask.iter().copied()).collect();
        let mut dlogits = vec![F::ZERO; logits.len()];
        let part = loss_impl(
            &logits,
            &targets,
            &mask,
            weights,
            cfg.vocab_size,
            denominator,
            Some(&mut dlogits),
        );
        total += part.loss;
        for j in 0..k {
            if part.slot_counts[j] > 0 {
                slot_sum[j] += part.slot_losses[j] * part.slot_counts[j] as f64;
                slot_counts[j] += part.slot_counts[j];
            }
        }
        model::backward_batch_into(params, &cache, &dlogits, &mut grads);
    }
    let out = LossOutput {
        loss: total,
        slot_losses: slot_sum
            .iter()
            .zip(&slot_counts)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        slot_counts,
        cells,
    };
    Ok((out, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub slot_losses: Vec<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    pub batch_seed: u64,
}

/// Seed from which step `step`'s batch indices and corruption are derived.
pub fn batch_seed(cfg: &TrainConfig, step: usize) -> u64 {
    seed::derive(cfg.seed, Stream::Batch, step as u64)
}

/// Draws the step's batch (with replacement) from `dataset`.
pub fn draw_batch(dataset: &[Sample], cfg: &TrainConfig, step: usize) -> Vec<Sample> {
    let mut rng = seed::rng(batch_seed(cfg, step));
    (0..cfg.batch_size)
        .map(|_| dataset[rng.random_range(0..dataset.len())].clone())
        .collect()
}

/// One optimization step on `batch`: window, corrupt, forward, loss,
/// backward, clip, update.
pub fn train_step<F: Real>(
    params: &mut ModelParams<F>,
    opt: &mut Optimizer<F>,
    batch: &[Sample],
    cfg: &TrainConfig,
    step_index: usize,
) -> Result<StepMetrics> {
    cfg.validate(params.config.k)?;
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let bseed = batch_seed(cfg, step_index);
    let prepared = prepare_batch(batch, &params.config, &cfg.schedule, bseed)?;
    let (out, mut grads) = batch_gradient(params, &prepared, &cfg.weights, cfg.shard_size)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite {
            step: step_index,
            loss: out.loss,
            batch_seed: bseed,
        });
    }
    let norm = global_norm(&grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            step: step_index,
            loss: norm,
            batch_seed: bseed,
        });
    }
    if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
        let s = F::from_f64(cfg.grad_clip_norm / norm);
        grads.iter_mut().for_each(|g| *g *= s);
    }
    let lr = cfg.lr_at(step_index);
    opt.apply(params, &grads, lr, cfg);
    Ok(StepMetrics {
        step: step_index,
        loss: out.loss,
        slot_losses: out.slot_losses,
        grad_norm: norm,
        lr,
        batch_seed: bseed,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub slot_losses: Vec<f64>,
    pub heldout_nll: Option<f64>,
    pub ms_per_step: f64,
}

impl MetricsRecord {
    /// `step<TAB>loss<TAB>slot_losses<TAB>heldout_nll<TAB>ms_per_step`;
    /// slot losses comma-separated, missing held-out NLL written as `nan`.
    pub fn to_line(&self) -> String {
        let slots: Vec<String> = self.slot_losses.iter().map(|x| format!("{x:.6}")).collect();
        let heldout = self
            .heldout_nll
            .map(|x| format!("{x:.6}"))
            .unwrap_or_else(|| "nan".into());
        format!(
            "{}\t{:.6}\t{}\t{}\t{:.3}",
            self.step,
            self.loss,
            slots.join(","),
            heldout,
            self.ms_per_step
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn heldout_curve(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.heldout_nll.map(|h| (r.step, h)))
            .collect()
    }
}

/// Runs steps `start_step..cfg.steps`. `on_step` sees every record and may
/// checkpoint; returning an error aborts training.
pub fn train<F: Real>(
    params: &mut ModelParams<F>,
    opt: &mut Optimizer<F>,
    dataset: &[Sample],
    heldout: &[Sample],
    cfg: &TrainConfig,
    start_step: usize,
    mut on_step: impl FnMut(&MetricsRecord, &ModelParams<F>, &Optimizer<F>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate(params.config.k)?;
    if dataset.is_empty() {
        return Err(Error::param("empty training set"));
    }
    let mut report = TrainReport::default();
    for step in start_step..cfg.steps {
        let start = Instant::now();
        let batch = draw_batch(dataset, cfg, step);
        let m = train_step(params, opt, &batch, cfg, step)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let last = step + 1 == cfg.steps;
        let heldout_nll = if cfg.eval_every > 0
            && !heldout.is_empty()
            && ((step + 1) % cfg.eval_every == 0 || last)
        {
            Some(eval::heldout_nll(params, heldout, &cfg.schedule, cfg.seed)?.clean.per_token)
        } else {
            None
        };
        let rec = MetricsRecord {
            step,
            loss: m.loss,
            slot_losses: m.slot_losses,
            heldout_nll,
            ms_per_step: ms,
        };
        on_step(&rec, params, opt)?;
        report.records.push(rec);
    }
    Ok(report)
}

/// Diagnostics separating a noised run from its β ≡ 0 twin.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    /// Copy rate of the β ≡ 0 run per overlapping slot (empty for `k = 1`).
    pub copy_rate_by_slot: Vec<f64>,
    pub copy_rate_by_slot_noised: Vec<f64>,
    /// Slot `k − 1` NLL of the noised run, inputs corrupted by the probe schedule.
    pub newtoken_nll_noised: f64,
    /// Slot `k − 1` NLL of the β ≡ 0 run on the same corrupted inputs.
    pub newtoken_nll_clean: f64,
    /// Slot `k − 1` NLL of each run on clean inputs.
    pub newtoken_nll_noised_clean_inputs: f64,
    pub newtoken_nll_clean_clean_inputs: f64,
}

/// Compares two runs that differ only in their training schedule. Both are
/// scored on the same held-out inputs, corrupted by `schedule` with `seed`.
pub fn leakage_probe<F: Real>(
    noised: &ModelParams<F>,
    clean: &ModelParams<F>,
    heldout: &[Sample],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LeakageReport> {
    let (a, b) = (&noised.config, &clean.config);
    if (a.vocab_size, a.k, a.seq_len) != (b.vocab_size, b.k, b.seq_len) {
        return Err(Error::param("leakage probe needs two runs of the same shape"));
    }
    let last = a.k - 1;
    let hn = eval::heldout_nll(noised, heldout, schedule, seed)?;
    let hc = eval::heldout_nll(clean, heldout, schedule, seed)?;
    Ok(LeakageReport {
        copy_rate_by_slot: eval::copy_rates(clean, heldout)?,
        copy_rate_by_slot_noised: eval::copy_rates(noised, heldout)?,
        newtoken_nll_noised: hn.noised.slot_nll[last],
        newtoken_nll_clean: hc.noised.slot_nll[last],
        newtoken_nll_noised_clean_inputs: hn.clean.slot_nll[last],
        newtoken_nll_clean_clean_inputs: hc.clean.slot_nll[last],
    })
}

/// Trains the noised run described by `cfg` and its β ≡ 0 twin from the
/// same initialization and batch seeds. Returns `(noised, clean)`.
pub fn train_leakage_pair(
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    dataset: &[Sample],
) -> Result<(ModelParams<f32>, ModelParams<f32>)> {
    let mut clean_cfg = cfg.clone();
    clean_cfg.schedule = NoiseSchedule::none(model_cfg.k)?;
    clean_cfg.eval_every = 0;
    let mut noised_cfg = cfg.clone();
    noised_cfg.eval_every = 0;
    let mut out = Vec::with_capacity(2);
    for c in [&noised_cfg, &clean_cfg] {
        let mut params = ModelParams::<f32>::init(model_cfg)?;
        let mut opt = Optimizer::new(&params);
        train(&mut params, &mut opt, dataset, &[], c, 0, |_, _, _| Ok(()))?;
        out.push(params);
    }
    let clean = out.pop().expect("two runs");
    let noised = out.pop().expect("two runs");
    Ok((noised, clean))
}

/// Tiny-model settings for finite-difference gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    pub samples: usize,
    pub step: f64,
    pub schedule: ScheduleKind,
    pub seed: u64,
}

impl GradcheckConfig {
    /// Two layers, width 16, `T = 6`, `k = 2`, `V = 5`.
    pub fn tiny() -> Self {
        Self::tiny_with_k(2)
    }

    pub fn tiny_with_k(k: usize) -> Self {
        GradcheckConfig {
            model: ModelConfig {
                vocab_size: 5,
                k,
                seq_len: 6,
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                d_q: 1,
                num_classes: 2,
                seed: 11,
            },
            height: 2,
            width: 3,
            batch: 3,
            samples: 200,
            step: 1e-4,
            schedule: ScheduleKind::Linear,
            seed: 5,
        }
    }
}

/// Everything a gradient check needs: `f64` parameters with nonzero gates
/// and a fixed, already-corrupted batch.
pub struct GradcheckProblem {
    pub params: ModelParams<f64>,
    pub batch: Vec<PreparedSample>,
    pub weights: LossWeights,
}

impl GradcheckProblem {
    pub fn new(cfg: &GradcheckConfig) -> Result<Self> {
        let m = cfg.model;
        if cfg.height * cfg.width != m.seq_len {
            return Err(Error::param("grid does not match model sequence length"));
        }
        let spec = toydata::make_spec(m.vocab_size, cfg.height, cfg.width, m.num_classes, cfg.seed)?;
        let samples = toydata::generate_dataset(&spec, cfg.batch, cfg.seed, 0)?;
        let mut params = ModelParams::<f64>::init(m)?;
        // Nonzero gates so the query-module paths carry gradient.
        params.randomize_gates(0.3, cfg.seed);
        let schedule = NoiseSchedule::new(cfg.schedule, m.k)?;
        let batch = prepare_batch(&samples, &m, &schedule, cfg.seed)?;
        Ok(GradcheckProblem {
            params,
            batch,
            weights: LossWeights::uniform(m.k),
        })
    }

    pub fn loss_at(&self, params: &ModelParams<f64>) -> f64 {
        batch_gradient(params, &self.batch, &self.weights, self.batch.len())
            .expect("gradcheck batch is valid")
            .0
            .loss
    }

    pub fn analytic_gradient(&self, params: &ModelParams<f64>) -> Vec<f64> {
        batch_gradient(params, &self.batch, &self.weights, self.batch.len())
            .expect("gradcheck batch is valid")
            .1
    }
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `gradient` against central differences at `cfg.samples`
/// parameter indices: one from every array, the rest uniformly at random.
pub fn gradcheck_with(
    problem: &GradcheckProblem,
    cfg: &GradcheckConfig,
    gradient: &[f64],
) -> GradcheckReport {
    let params = &problem.params;
    let layout = &params.layout;
    let mut rng = seed::derived_rng(cfg.seed, Stream::Probe, 0);
    let mut indices: Vec<usize> = layout
        .entries
        .iter()
        .map(|e| rng.random_range(e.range.clone()))
        .collect();
    while indices.len() < cfg.samples {
        indices.push(rng.random_range(0..params.data.len()));
    }
    indices.truncate(cfg.samples.max(layout.entries.len()));

    let mut probe = params.clone();
    let mut worst = (0.0, String::new());
    for &i in &indices {
        let orig = probe.data[i];
        probe.data[i] = orig + cfg.step;
        let up = problem.loss_at(&probe);
        probe.data[i] = orig - cfg.step;
        let down = problem.loss_at(&probe);
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let err = relative_error(gradient[i], numeric);
        if err > worst.0 || worst.1.is_empty() {
            let name = layout
                .entries
                .iter()
                .find(|e| e.range.contains(&i))
                .map(|e| format!("{}[{}]", e.name, i - e.range.start))
                .unwrap_or_default();
            if err >= worst.0 {
                worst = (err, name);
            }
        }
    }
    GradcheckReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        checked: indices.len(),
    }
}

/// Analytic-versus-numeric gradient check on a tiny model.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let problem = GradcheckProblem::new(cfg)?;
    let grad = problem.analytic_gradient(&problem.params);
    Ok(gradcheck_with(&problem, cfg, &grad))
}
